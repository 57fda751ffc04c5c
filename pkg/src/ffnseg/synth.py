"""
Procedural ground-truth worlds: tubes (dilated random-walk centrelines) and
ellipsoidal blobs, a noisy intensity image with dark gaps between objects,
and one skeleton per object.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from ffnseg.errors import ConfigError, PlacementError
from ffnseg.metrics import Skeleton
from ffnseg.volume import ImageVolume, SegmentationVolume


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple[int, int, int] = (64, 64, 32)
    n_objects: tuple[int, int] = (3, 8)
    tube_fraction: float = 0.75
    tube_radius: tuple[float, float] = (3.0, 4.5)
    tube_length: tuple[int, int] = (30, 90)
    curvature: float = 0.25
    blob_radius: tuple[float, float] = (4.0, 8.0)
    gap: int = 2
    interior: float = 0.8
    background: float = 0.35
    boundary: float = 0.05
    boundary_width: int = 1
    noise: float = 0.03
    anisotropy: float = 1.0
    max_retries: int = 500
    seed: int = 0

    def __post_init__(self):
        for name in ("dims", "n_objects", "tube_radius", "tube_length", "blob_radius"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"dims must be three positive ints, got {self.dims}")
        for name in ("n_objects", "tube_radius", "tube_length", "blob_radius"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo or (name != "n_objects" and lo <= 0):
                raise ConfigError(f"{name} must be a positive (lo, hi) range, got {(lo, hi)}")
        if self.gap < 1:
            raise ConfigError("gap must be at least 1 voxel so objects never touch")
        if 2 * max(self.tube_radius[1], self.blob_radius[1]) + 1 > min(self.dims):
            raise ConfigError("object radii too large for the volume")
        if self.noise < 0 or self.boundary_width < 0 or self.anisotropy <= 0:
            raise ConfigError("noise, boundary_width must be >= 0 and anisotropy > 0")

    def replace(self, **kw) -> "SynthConfig":
        return SynthConfig(**{**asdict(self), **kw})


class World(NamedTuple):
    image: ImageVolume
    segmentation: SegmentationVolume
    skeletons: list[Skeleton]


def _ball_mask(points: np.ndarray, radius: float, dims) -> np.ndarray:
    """Union of balls of ``radius`` around integer ``points``."""
    mask = np.zeros(dims, dtype=bool)
    r = int(np.ceil(max(radius, 0.0)))
    lo = np.maximum(points.min(axis=0) - r, 0)
    hi = np.minimum(points.max(axis=0) + r + 1, dims)
    box = tuple(slice(a, b) for a, b in zip(lo, hi))
    local = points - lo
    seeds = np.zeros(tuple(hi - lo), dtype=bool)
    seeds[local[:, 0], local[:, 1], local[:, 2]] = True
    mask[box] = seeds if radius <= 0 else ndimage.distance_transform_edt(~seeds) <= radius
    return mask


def _random_walk(rng, config: SynthConfig, radius: float) -> np.ndarray:
    dims = np.array(config.dims, dtype=float)
    lo = np.minimum(radius, (dims - 1) / 2)
    hi = dims - 1 - lo
    scale = np.array([1.0, 1.0, config.anisotropy])
    pos = rng.uniform(lo, hi)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    length = int(rng.integers(config.tube_length[0], config.tube_length[1] + 1))
    points = [np.rint(pos).astype(int)]
    for _ in range(length):
        direction = direction + config.curvature * rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        step = direction * scale
        step /= max(1.0, np.abs(step).max())
        nxt = pos + step
        # reflect at the walls
        for a in range(3):
            if nxt[a] < lo[a] or nxt[a] > hi[a]:
                direction[a] = -direction[a]
                nxt[a] = pos[a] - step[a]
        pos = np.clip(nxt, lo, hi)
        p = np.rint(pos).astype(int)
        if not np.array_equal(p, points[-1]):
            points.append(p)
    return np.array(points)


def _tube(rng, config):
    radius = float(rng.uniform(*config.tube_radius))
    pts = _random_walk(rng, config, radius)
    mask = _ball_mask(pts, radius, config.dims)
    edges = np.stack([np.arange(len(pts) - 1), np.arange(1, len(pts))], axis=1)
    return mask, pts, edges


def _blob(rng, config):
    radii = rng.uniform(*config.blob_radius, size=3)
    radii[2] = max(1.5, radii[2] / config.anisotropy)
    dims = np.array(config.dims)
    center = rng.uniform(radii, dims - 1 - radii)
    grid = np.indices(config.dims, dtype=float)
    r2 = sum(((grid[a] - center[a]) / radii[a]) ** 2 for a in range(3))
    mask = r2 <= 1.0
    axis = int(np.argmax(radii))
    reach = np.zeros(3)
    reach[axis] = max(radii[axis] - 1.0, 1.0)
    pts = np.rint(np.stack([center - reach, center + reach])).astype(int)
    if not np.all(mask[pts[:, 0], pts[:, 1], pts[:, 2]]):
        return None
    return mask, pts, np.array([[0, 1]])


def generate_world(config: SynthConfig = SynthConfig()) -> World:
    """
    Place a random number of disjoint objects and render their image.

    Objects of different IDs keep at least ``config.gap`` background voxels
    between them (Chebyshev distance). Raises PlacementError when the
    retry budget is exhausted.
    """
    rng = np.random.default_rng(config.seed)
    labels = np.zeros(config.dims, dtype=np.uint32)
    n_target = int(rng.integers(config.n_objects[0], config.n_objects[1] + 1))
    skeletons = []
    footprint = np.ones((2 * config.gap + 1,) * 3, dtype=bool)
    forbidden = np.zeros(config.dims, dtype=bool)
    retries = 0
    while len(skeletons) < n_target:
        if retries > config.max_retries:
            raise PlacementError(
                f"placed {len(skeletons)} of {n_target} objects in {config.max_retries} retries"
            )
        made = _tube(rng, config) if rng.random() < config.tube_fraction else _blob(rng, config)
        if made is None:
            retries += 1
            continue
        mask, pts, edges = made
        if np.any(mask & forbidden):
            retries += 1
            continue
        oid = len(skeletons) + 1
        labels[mask] = oid
        forbidden |= ndimage.binary_dilation(mask, structure=footprint)
        skeletons.append(Skeleton(oid, pts, edges))
    image = render_image(labels, config, rng)
    return World(ImageVolume(image), SegmentationVolume(labels), skeletons)


def render_image(labels: np.ndarray, config: SynthConfig, rng) -> np.ndarray:
    fg = labels > 0
    img = np.full(labels.shape, config.background, dtype=np.float64)
    if config.boundary_width > 0 and fg.any():
        size = 2 * config.boundary_width + 1
        shell = ndimage.binary_dilation(fg, structure=np.ones((size,) * 3, dtype=bool)) & ~fg
        img[shell] = config.boundary
    img[fg] = config.interior
    if config.noise > 0:
        img += rng.normal(0.0, config.noise, size=labels.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def rasterize_gt_labels(skeletons, dims, radius: float) -> SegmentationVolume:
    """Stamp every node as a ball of ``radius`` in its skeleton's ID."""
    labels = np.zeros(tuple(dims), dtype=np.uint32)
    for s in skeletons:
        if len(s.nodes) == 0:
            continue
        if np.any(s.nodes < 0) or np.any(s.nodes >= np.array(dims)):
            raise ValueError(f"skeleton {s.id} has nodes outside {tuple(dims)}")
        mask = _ball_mask(s.nodes, radius, tuple(dims))
        clash = mask & (labels != 0) & (labels != s.id)
        if clash.any():
            other = int(labels[clash][0])
            raise ValueError(f"skeletons {other} and {s.id} overlap at radius {radius}")
        labels[mask] = s.id
    return SegmentationVolume(labels)
