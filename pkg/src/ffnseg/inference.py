"""
Flood-filling inference: FoV movement over a probability canvas, seed
selection and assembly of multi-object segmentations.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy import ndimage

from ffnseg import convnet
from ffnseg.distance import edt
from ffnseg.errors import BoundsError, ConfigError, DimsMismatchError
from ffnseg.volume import (
    PAD_VALUE,
    SEED_VALUE,
    BoxRegion,
    ImageVolume,
    ProbabilityCanvas,
    SegmentationVolume,
    apply_split_bias,  # noqa: F401  (part of this module's surface)
    write_patch,
)

logger = logging.getLogger(__name__)

PAPER_DELTA = (8, 8, 4)
PAPER_T_MOVE = 0.9


@dataclass(frozen=True)
class MovementPolicy:
    delta: tuple[int, int, int] = PAPER_DELTA
    t_move: float = PAPER_T_MOVE

    def __post_init__(self):
        object.__setattr__(self, "delta", tuple(int(d) for d in self.delta))
        if len(self.delta) != 3 or any(d < 1 for d in self.delta):
            raise ConfigError(f"delta components must be >= 1, got {self.delta}")
        if not 0.5 < self.t_move < 1.0:
            raise ConfigError(f"t_move must lie in (0.5, 1), got {self.t_move}")


def reduced_cell(pos, delta) -> tuple[int, int, int]:
    return tuple(int(p) // int(d) for p, d in zip(pos, delta))


def clamp_center(pos, dims, fov) -> tuple[int, int, int]:
    """Shift ``pos`` so the FoV centred on it lies inside ``dims``."""
    out = []
    for p, d, f in zip(pos, dims, fov):
        if d < f:
            raise BoundsError(f"volume extent {tuple(dims)} is smaller than the fov {tuple(fov)}")
        out.append(min(max(int(p), f // 2), d - f + f // 2))
    return tuple(out)


def _plane_candidates(values: np.ndarray, pos, delta):
    """(value, position) of the maximum on each of the six ±delta planes."""
    dims = values.shape
    lo = [max(p - d, 0) for p, d in zip(pos, delta)]
    hi = [min(p + d, n - 1) for p, d, n in zip(pos, delta, dims)]
    found = []
    for axis in range(3):
        for sign in (-1, 1):
            plane = pos[axis] + sign * delta[axis]
            if not 0 <= plane < dims[axis]:
                continue
            sl = [slice(lo[a], hi[a] + 1) for a in range(3)]
            sl[axis] = slice(plane, plane + 1)
            sub = values[tuple(sl)]
            top = sub.max()
            # ties go to the voxel nearest the face centre, then to C order
            hits = np.argwhere(sub == top) + np.array([s.start for s in sl])
            d2 = ((hits - np.array(pos)) ** 2).sum(axis=1)
            where = tuple(int(c) for c in hits[int(np.argmin(d2))])
            found.append((float(top), where))
    return found


def find_new_positions(canvas, pos, policy: MovementPolicy) -> list[tuple[int, int, int]]:
    """
    Positions on the six faces of the ±delta box around ``pos`` whose mask
    value reaches ``t_move``, one per face, sorted by value (descending).

    Faces are scanned in the order -x, +x, -y, +y, -z, +z and equal values
    keep that order. Within a face, equal maxima resolve to the voxel closest
    to ``pos``.
    """
    values = canvas.values if isinstance(canvas, ProbabilityCanvas) else np.asarray(canvas)
    hits = [c for c in _plane_candidates(values, tuple(pos), policy.delta) if c[0] >= policy.t_move]
    hits.sort(key=lambda c: -c[0])
    return [where for _, where in hits]


# --- predictors ---

class MaskPredictor(Protocol):
    fov: tuple[int, int, int]

    def begin_object(self, seed) -> None: ...

    def predict(self, image_patch: np.ndarray, mask_patch: np.ndarray,
                region: BoxRegion) -> np.ndarray: ...


class FFNPredictor:
    """Wraps a trained model; ``region`` is ignored."""

    def __init__(self, model: convnet.FFNModel):
        self.model = model
        self.fov = model.fov

    def begin_object(self, seed):
        pass

    def predict(self, image_patch, mask_patch, region=None):
        return convnet.forward(self.model, image_patch, mask_patch)


class GroundTruthOracle:
    """
    Predictor that reads the hidden ground truth: 0.95 on the seeded object's
    voxels inside the FoV, 0.05 elsewhere. A seed on background (ID 0) yields
    an all-0.05 patch.
    """

    def __init__(self, gt: SegmentationVolume, fov=convnet.PAPER_FOV):
        self.gt = gt.labels if isinstance(gt, SegmentationVolume) else np.asarray(gt)
        self.fov = tuple(fov)
        self.object_id = 0

    def begin_object(self, seed):
        self.object_id = int(self.gt[tuple(seed)])

    def predict(self, image_patch, mask_patch, region: BoxRegion):
        if self.object_id == 0:
            return np.full(region.size, PAD_VALUE, dtype=np.float32)
        inside = self.gt[region.slices()] == self.object_id
        return np.where(inside, SEED_VALUE, PAD_VALUE).astype(np.float32)


class ConstantPredictor:
    """Returns the same value everywhere; for tests and worst-case runs."""

    def __init__(self, value: float, fov=convnet.PAPER_FOV):
        self.value = float(value)
        self.fov = tuple(fov)

    def begin_object(self, seed):
        pass

    def predict(self, image_patch, mask_patch, region):
        return np.full(region.size, self.value, dtype=np.float32)


# --- single object ---

@dataclass
class InferenceState:
    """
    FIFO of pending positions plus the reduced-resolution visited set.

    Positions are kept as requested; only the FoV placed at a position is
    shifted to fit the canvas (see :func:`clamp_center`). The visited set is
    keyed on the requested position so that distinct border targets are not
    folded into one cell.
    """

    canvas: ProbabilityCanvas
    fov: tuple[int, int, int]
    policy: MovementPolicy
    queue: deque = field(default_factory=deque)
    visited: set = field(default_factory=set)
    trace: list = field(default_factory=list)

    def push(self, pos) -> bool:
        pos = tuple(int(p) for p in pos)
        if reduced_cell(pos, self.policy.delta) in self.visited:
            return False
        self.queue.append(pos)
        return True

    def pop(self):
        """Next unvisited position (marked visited), or None when done."""
        while self.queue:
            pos = self.queue.popleft()
            cell = reduced_cell(pos, self.policy.delta)
            if cell in self.visited:
                continue
            self.visited.add(cell)
            self.trace.append(pos)
            return pos
        return None

    def region(self, pos) -> BoxRegion:
        return BoxRegion.centered(clamp_center(pos, self.canvas.dims, self.fov), self.fov)

    def advance(self, pos) -> None:
        for cand in find_new_positions(self.canvas, pos, self.policy):
            self.push(cand)

    @property
    def evaluations(self) -> int:
        return len(self.trace)


def max_evaluations(dims, delta) -> int:
    return math.prod(math.ceil(n / d) for n, d in zip(dims, delta))


def grow_object(image, seed, predictor: MaskPredictor, policy: MovementPolicy,
                split_bias: bool = True) -> InferenceState:
    """Run the movement loop for one seed and return the final state."""
    voxels = image.voxels if isinstance(image, ImageVolume) else np.asarray(image, dtype=np.float32)
    seed = tuple(int(s) for s in seed)
    if len(seed) != 3 or not all(0 <= s < n for s, n in zip(seed, voxels.shape)):
        raise BoundsError(f"seed {seed} outside volume {voxels.shape}")
    canvas = ProbabilityCanvas.fresh(voxels.shape, seed)
    state = InferenceState(canvas, tuple(predictor.fov), policy)
    predictor.begin_object(seed)
    state.push(seed)
    while (pos := state.pop()) is not None:
        region = state.region(pos)
        sl = region.slices()
        patch = predictor.predict(voxels[sl], canvas.values[sl], region)
        write_patch(canvas, region, patch, split_bias_enabled=split_bias)
        state.advance(pos)
    return state


_FULL_CONNECTIVITY = np.ones((3, 3, 3), dtype=bool)


def seed_component(mask: np.ndarray, seed) -> np.ndarray:
    """The 26-connected component of ``mask`` holding ``seed`` (empty if the seed is off)."""
    seed = tuple(int(s) for s in seed)
    if not mask[seed]:
        return np.zeros_like(mask, dtype=bool)
    labels, _ = ndimage.label(mask, structure=_FULL_CONNECTIVITY)
    return labels == labels[seed]


def segment_object(image, seed, predictor: MaskPredictor, policy: MovementPolicy,
                   connected: bool = True):
    """
    Grow one object from ``seed``.

    Returns
    -------
    mask : ndarray of bool
        Voxels whose final canvas value reaches ``t_move``; with ``connected``
        only those joined to the seed through other such voxels.
    canvas : ProbabilityCanvas
    """
    state = grow_object(image, seed, predictor, policy)
    mask = state.canvas.values >= policy.t_move
    if connected:
        mask = seed_component(mask, seed)
    return mask, state.canvas


# --- seeds ---

@dataclass(frozen=True)
class SeedConfig:
    sobel_fraction: float = 0.1
    nms_radius: int = 2
    min_distance: float = 1.5
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0.0 < self.sobel_fraction < 1.0:
            raise ConfigError("sobel_fraction must lie in (0, 1)")
        if self.nms_radius < 0:
            raise ConfigError("nms_radius must be >= 0")


@dataclass
class SeedList:
    positions: list[tuple[int, int, int]]
    scores: list[float]

    def __post_init__(self):
        if any(b > a for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError("seed scores must be non-increasing")

    def __len__(self):
        return len(self.positions)

    def __iter__(self):
        return iter(zip(self.positions, self.scores))


def sobel_magnitude(voxels: np.ndarray) -> np.ndarray:
    v = np.asarray(voxels, dtype=np.float64)
    grads = [ndimage.sobel(v, axis=a, mode="nearest") for a in range(3)]
    return np.sqrt(sum(g * g for g in grads))


def seed_points(image, config: SeedConfig = SeedConfig()) -> SeedList:
    """
    Seeds far from suspected boundaries.

    Boundaries are voxels whose 3D Sobel gradient magnitude reaches
    ``sobel_fraction`` of the maximum. Seeds are local maxima (26-neighbourhood)
    of the exact distance to those voxels; each flat plateau contributes the
    voxel nearest its centroid, then maxima closer than ``nms_radius``
    (Chebyshev) to a stronger one are dropped. A flat image, or one where no
    maximum survives, yields a single seed at the volume centre.
    """
    voxels = image.voxels if isinstance(image, ImageVolume) else np.asarray(image)
    if voxels.size == 0:
        raise DimsMismatchError("empty image")
    center = tuple(n // 2 for n in voxels.shape)
    grad = sobel_magnitude(voxels)
    gmax = grad.max()
    if gmax <= 1e-12:
        return SeedList([center], [0.0])
    boundary = grad >= config.sobel_fraction * gmax
    dist = edt(boundary, config.spacing)
    peak = ndimage.maximum_filter(dist, size=3, mode="constant", cval=-np.inf)
    cand = (dist == peak) & (dist >= config.min_distance)
    labels, n = ndimage.label(cand, structure=np.ones((3, 3, 3), dtype=bool))
    reps = []
    for idx, obj in enumerate(ndimage.find_objects(labels), start=1):
        pts = np.argwhere(labels[obj] == idx) + np.array([s.start for s in obj])
        centroid = pts.mean(axis=0)
        # argwhere is in linear (C) order, so ties resolve to the first voxel
        best = pts[np.argmin(((pts - centroid) ** 2).sum(axis=1))]
        reps.append((float(dist[tuple(best)]), tuple(int(b) for b in best)))
    reps.sort(key=lambda r: (-r[0], r[1]))
    kept: list[tuple[float, tuple]] = []
    r = config.nms_radius
    for score, pos in reps:
        if all(max(abs(a - b) for a, b in zip(pos, q)) > r for _, q in kept):
            kept.append((score, pos))
    if not kept:
        return SeedList([center], [0.0])
    return SeedList([p for _, p in kept], [s for s, _ in kept])


# --- whole volume ---

@dataclass
class SegmentationRun:
    segmentation: SegmentationVolume
    seeds: SeedList
    objects: list[dict]
    canvases: dict[int, ProbabilityCanvas] | None = None

    @property
    def evaluations(self) -> int:
        return sum(o["evaluations"] for o in self.objects)

    def log_lines(self) -> list[str]:
        lines = [f"seeds {len(self.seeds)}"]
        for i, (pos, score) in enumerate(self.seeds):
            lines.append(f"seed {i} {pos[0]} {pos[1]} {pos[2]} score {score:.6g}")
        for o in self.objects:
            lines.append(
                f"object seed={o['seed_index']} id={o['id']} evaluations={o['evaluations']} "
                f"voxels={o['voxels']} detached={o['detached']} status={o['status']}"
            )
        lines.append(f"predictor_evaluations {self.evaluations}")
        return lines


def segment_volume(image, predictor: MaskPredictor, policy: MovementPolicy,
                   seed_config: SeedConfig = SeedConfig(), seeds: SeedList | None = None,
                   min_object_size: int = 0, keep_canvases: bool = False,
                   require_seed: bool = True, connected: bool = True) -> SegmentationRun:
    """
    Grow one object per seed, in seed order, and assemble a label volume.

    Seeds on already-labelled voxels are skipped. A new object takes the next
    free ID and only claims voxels that are still unlabelled. With
    ``connected`` the claim is further cut down to the part joined to the
    seed, so bright patches the predictor grabbed across a boundary are left
    for their own seeds. With ``require_seed`` (implied by ``connected``) an
    object whose own seed voxel ends below ``t_move`` is dropped: the
    predictor did not recognise anything at the seed, and what it did fill
    belongs to some neighbour.
    """
    voxels = image.voxels if isinstance(image, ImageVolume) else np.asarray(image, dtype=np.float32)
    if seeds is None:
        seeds = seed_points(voxels, seed_config)
    labels = np.zeros(voxels.shape, dtype=np.uint32)
    objects, canvases = [], {}
    next_id = 1
    for i, (pos, _score) in enumerate(seeds):
        if labels[pos] != 0:
            objects.append(dict(seed_index=i, id=0, evaluations=0, voxels=0, detached=0,
                                status="skipped"))
            continue
        state = grow_object(voxels, pos, predictor, policy)
        free = (state.canvas.values >= policy.t_move) & (labels == 0)
        claim = seed_component(free, pos) if connected else free
        size = int(claim.sum())
        entry = dict(seed_index=i, id=0, evaluations=state.evaluations, voxels=size,
                     detached=int(free.sum()) - size)
        if (require_seed or connected) and free.any() and not free[pos]:
            entry["status"] = "seed_lost"
        elif size == 0 or size < min_object_size:
            entry["status"] = "empty" if size == 0 else "small"
        else:
            labels[claim] = next_id
            entry.update(id=next_id, status="committed")
            if keep_canvases:
                canvases[next_id] = state.canvas
            next_id += 1
        objects.append(entry)
        logger.debug("seed %d at %s: %s", i, pos, entry)
    return SegmentationRun(SegmentationVolume(labels), seeds, objects,
                           canvases if keep_canvases else None)
