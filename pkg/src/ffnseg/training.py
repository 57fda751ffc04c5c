"""
Example extraction, active-fraction rebalancing and the per-move SGD loop.
"""

from __future__ import annotations

import bisect
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from ffnseg import convnet
from ffnseg.errors import BoundsError, ConfigError, DimsMismatchError
from ffnseg.inference import (
    FFNPredictor,
    InferenceState,
    MovementPolicy,
    SeedConfig,
    seed_points,
    segment_volume,
)
from ffnseg.metrics import EvaluationReport, evaluate, pool_reports
from ffnseg.volume import (
    PAD_VALUE,
    SEED_VALUE,
    BoxRegion,
    ImageVolume,
    ProbabilityCanvas,
    SegmentationVolume,
    write_patch,
)

logger = logging.getLogger(__name__)

PAPER_EXAMPLE_DIMS = (49, 49, 25)
PAPER_BOUNDARIES = (
    0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.075, 0.1,
    0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0,
)


def example_dims_for(fov, delta) -> tuple[int, int, int]:
    """Smallest box allowing one FoV step each way: fov + 2 * delta."""
    return tuple(int(f) + 2 * int(d) for f, d in zip(fov, delta))


@dataclass(frozen=True, eq=False)
class TrainingExample:
    image: np.ndarray
    target: np.ndarray
    center: tuple[int, int, int]

    def __post_init__(self):
        if self.image.shape != self.target.shape:
            raise DimsMismatchError("image and target differ in shape")
        local = tuple(n // 2 for n in self.target.shape)
        if not np.isclose(self.target[local], SEED_VALUE):
            raise ValueError("example centre must lie on the target object")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.image.shape

    @property
    def local_center(self) -> tuple[int, int, int]:
        return tuple(n // 2 for n in self.dims)


def extract_example(image, gt, center, dims=PAPER_EXAMPLE_DIMS) -> TrainingExample:
    """
    Crop ``dims`` around ``center`` and binarize the labels into soft targets:
    0.95 where the label equals the centre's label, 0.05 elsewhere.
    """
    voxels = image.voxels if isinstance(image, ImageVolume) else np.asarray(image, np.float32)
    labels = gt.labels if isinstance(gt, SegmentationVolume) else np.asarray(gt)
    center = tuple(int(c) for c in center)
    box = BoxRegion.centered(center, dims)
    if not box.inside(labels.shape):
        raise BoundsError(f"example box {box} does not fit volume {labels.shape}")
    oid = labels[center]
    if oid == 0:
        raise ValueError(f"example centre {center} lies on background")
    sl = box.slices()
    target = np.where(labels[sl] == oid, SEED_VALUE, PAD_VALUE).astype(np.float32)
    return TrainingExample(np.array(voxels[sl], dtype=np.float32), target, center)


def active_fraction(example: TrainingExample) -> float:
    return float(np.mean(example.target > 0.5))


@dataclass(frozen=True)
class RebalancingBins:
    boundaries: tuple[float, ...] = PAPER_BOUNDARIES

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if any(hi <= lo for lo, hi in zip(b, b[1:])):
            raise ConfigError("bin boundaries must be strictly increasing")

    @property
    def n_classes(self) -> int:
        return len(self.boundaries) - 1


def class_of(f_a: float, bins: RebalancingBins = RebalancingBins()) -> int:
    """1-based class i with t[i-1] <= f_a < t[i]; the top edge joins the last class."""
    if not 0.0 <= f_a <= 1.0:
        raise ValueError(f"active fraction {f_a} outside [0, 1]")
    i = bisect.bisect_right(bins.boundaries, f_a)
    return min(max(i, 1), bins.n_classes)


def rebalance_stream(source: Iterable[TrainingExample], bins: RebalancingBins = RebalancingBins(),
                     queue_size: int = 64, max_wait: int = 1000) -> Iterator[TrainingExample]:
    """
    Yield examples cycling round-robin over the active-fraction classes seen
    so far, so every present class is emitted equally often.

    Per-class queues hold at most ``queue_size`` examples (oldest dropped).
    When the scheduled class is empty the source is read until it delivers
    one, at most ``max_wait`` times; a class that is still empty then
    repeats the last example it emitted, so rare classes are oversampled
    rather than skipped. The stream ends when the source does.
    """
    source = iter(source)
    queues = {c: deque(maxlen=queue_size) for c in range(1, bins.n_classes + 1)}
    last: dict[int, TrainingExample] = {}
    seen: set[int] = set()

    def pull() -> bool:
        try:
            ex = next(source)
        except StopIteration:
            return False
        c = class_of(active_fraction(ex), bins)
        queues[c].append(ex)
        seen.add(c)
        return True

    if not pull():
        return
    cursor = 0
    while True:
        order = sorted(seen)
        cls = order[cursor % len(order)]
        waited = 0
        while not queues[cls] and waited < max_wait:
            if not pull():
                return
            waited += 1
        if queues[cls]:
            last[cls] = queues[cls].popleft()
        yield last[cls]
        order = sorted(seen)
        cursor = (order.index(cls) + 1) % len(order)


def random_examples(worlds, dims, rng: np.random.Generator) -> Iterator[TrainingExample]:
    """Endless examples centred on random labelled voxels of ``worlds``."""
    dims = tuple(dims)
    half = np.array(dims) // 2
    pools = []
    for image, gt in worlds:
        labels = gt.labels if isinstance(gt, SegmentationVolume) else np.asarray(gt)
        lo, hi = half, np.array(labels.shape) - (np.array(dims) - half)
        valid = np.zeros(labels.shape, dtype=bool)
        valid[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] = True
        pts = np.argwhere(valid & (labels != 0))
        if len(pts):
            pools.append((image, gt, pts))
    if not pools:
        raise ValueError("no labelled voxel admits a full example box")
    while True:
        image, gt, pts = pools[int(rng.integers(len(pools)))]
        yield extract_example(image, gt, tuple(pts[int(rng.integers(len(pts)))]), dims)


# --- optimisation ---

def _check_example(model: convnet.FFNModel, ex: TrainingExample, policy: MovementPolicy):
    want = example_dims_for(model.fov, policy.delta)
    if ex.dims != want:
        raise DimsMismatchError(
            f"example dims {ex.dims} != fov {model.fov} + 2 * delta {policy.delta} = {want}"
        )


def train_on_batch(model: convnet.FFNModel, examples, policy: MovementPolicy, lr: float,
                   max_steps: int | None = None,
                   on_step: Callable[[int, float], None] | None = None) -> list[float]:
    """
    Run the movement procedure on every example in lockstep, without the
    split bias. Each move gathers the examples that still have a position,
    evaluates the loss against their target crops, backpropagates and takes
    one SGD step. Returns the loss of every step.
    """
    examples = list(examples)
    for ex in examples:
        _check_example(model, ex, policy)
    states = []
    for ex in examples:
        canvas = ProbabilityCanvas.fresh(ex.dims, ex.local_center)
        st = InferenceState(canvas, model.fov, policy)
        st.push(ex.local_center)
        states.append(st)
    losses = []
    while max_steps is None or len(losses) < max_steps:
        active = [(i, pos) for i, st in enumerate(states) if (pos := st.pop()) is not None]
        if not active:
            break
        regions = [states[i].region(pos) for i, pos in active]
        imgs = np.stack([examples[i].image[r.slices()] for (i, _), r in zip(active, regions)])
        masks = np.stack([states[i].canvas.values[r.slices()] for (i, _), r in zip(active, regions)])
        tgts = np.stack([examples[i].target[r.slices()] for (i, _), r in zip(active, regions)])
        value, grads, pred = convnet._forward_backward(model, imgs, masks, tgts)
        convnet.sgd_step(model, grads, lr)
        for k, ((i, pos), r) in enumerate(zip(active, regions)):
            write_patch(states[i].canvas, r, pred[k], split_bias_enabled=False)
            states[i].advance(pos)
        losses.append(value)
        if on_step is not None:
            on_step(len(losses), value)
    return losses


def train_on_example(model, example: TrainingExample, policy: MovementPolicy,
                     lr: float = 0.001) -> list[float]:
    return train_on_batch(model, [example], policy, lr)


# --- loop ---

@dataclass
class TrainConfig:
    fov: tuple[int, int, int] = convnet.PAPER_FOV
    channels: int = 32
    modules: int | None = None
    delta: tuple[int, int, int] = (8, 8, 4)
    t_move: float = 0.9
    lr: float = 0.001
    batch_size: int = 4
    max_steps: int = 20000
    checkpoint_every: int = 1000
    patience: int = 3
    example_dims: tuple[int, int, int] | None = None
    model_seed: int = 0
    data_seed: int = 0
    queue_size: int = 64

    def __post_init__(self):
        self.fov = tuple(int(f) for f in self.fov)
        self.delta = tuple(int(d) for d in self.delta)
        want = example_dims_for(self.fov, self.delta)
        if self.example_dims is None:
            self.example_dims = want
        self.example_dims = tuple(int(e) for e in self.example_dims)
        if self.example_dims != want:
            raise ConfigError(
                f"example_dims {self.example_dims} must equal fov + 2*delta = {want}"
            )
        if self.modules is None:
            self.modules = convnet.default_module_count(self.fov)
        for name in ("channels", "batch_size", "max_steps", "checkpoint_every", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        MovementPolicy(self.delta, self.t_move)

    @property
    def policy(self) -> MovementPolicy:
        return MovementPolicy(self.delta, self.t_move)

    def build_model(self) -> convnet.FFNModel:
        return convnet.FFNModel.build(self.fov, self.channels, self.modules, seed=self.model_seed)


@dataclass
class TrainingResult:
    checkpoints: list[tuple[int, Path]] = field(default_factory=list)
    reports: list[tuple[int, EvaluationReport]] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False

    def best(self) -> tuple[int, Path, EvaluationReport] | None:
        if not self.reports:
            return None
        paths = dict(self.checkpoints)
        step, rep = max(self.reports, key=lambda sr: (sr[1].edge_accuracy, -sr[0]))
        return step, paths[step], rep


def heldout_evaluator(worlds, policy: MovementPolicy, seed_config: SeedConfig = SeedConfig(),
                      min_object_size: int = 0, connected: bool = True):
    """
    Evaluator running full inference on ``worlds`` (image, segmentation,
    skeletons) and pooling the edge tallies. Seeds are computed once.
    """
    worlds = list(worlds)
    if not worlds:
        raise ValueError("no held-out worlds")
    seeds = [seed_points(w[0], seed_config) for w in worlds]

    def run(model: convnet.FFNModel) -> EvaluationReport:
        predictor = FFNPredictor(model)
        reports = []
        for (image, _gt, skeletons), s in zip(worlds, seeds):
            seg = segment_volume(image, predictor, policy, seeds=s,
                                 min_object_size=min_object_size,
                                 connected=connected).segmentation
            reports.append(evaluate(skeletons, seg))
        run.last = reports
        return pool_reports(reports)

    run.last = []
    return run


def checkpoint_steps(max_steps: int, every: int) -> list[int]:
    steps = list(range(every, max_steps + 1, every))
    if not steps or steps[-1] != max_steps:
        steps.append(max_steps)
    return steps


def training_loop(model: convnet.FFNModel, corpus, config: TrainConfig, out_dir,
                  evaluator: Callable[[convnet.FFNModel], EvaluationReport] | None = None,
                  examples: Iterator[TrainingExample] | None = None) -> TrainingResult:
    """
    SGD over a rebalanced example stream with periodic checkpoints.

    A checkpoint is written every ``checkpoint_every`` steps and at the last
    step; each is scored by ``evaluator``. Training stops early once
    ``patience`` successive evaluations fail to beat the best edge accuracy.
    ``corpus`` is a sequence of (image, segmentation) pairs.
    """
    corpus = list(corpus)
    if not corpus and examples is None:
        raise ValueError("empty training corpus")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if examples is None:
        rng = np.random.default_rng(config.data_seed)
        examples = rebalance_stream(
            random_examples(corpus, config.example_dims, rng), queue_size=config.queue_size
        )
    policy = config.policy
    result = TrainingResult()
    best = -np.inf
    stale = 0
    log_path = out_dir / "metrics.tsv"
    log_path.write_text("step\t" + "\t".join(k for k, _ in EvaluationReport.COLUMNS) + "\n")

    def checkpoint(step: int) -> bool:
        nonlocal best, stale
        path = convnet.save_checkpoint(model, out_dir / f"ckpt_{step:06d}.ffn")
        result.checkpoints.append((step, path))
        if evaluator is None:
            return False
        rep = evaluator(model)
        result.reports.append((step, rep))
        with log_path.open("a") as fh:
            fh.write(f"{step}\t" + "\t".join(f"{v:.6f}" for v in rep.row()) + "\n")
        logger.info("step %d: %s", step, " ".join(f"{v:.2f}" for v in rep.row()))
        if rep.edge_accuracy > best:
            best, stale = rep.edge_accuracy, 0
        else:
            stale += 1
        return stale >= config.patience

    step = 0
    stop = False

    def on_step(_n, value):
        nonlocal step, stop
        step += 1
        result.losses.append(value)
        if step % config.checkpoint_every == 0:
            stop = checkpoint(step) or stop

    while step < config.max_steps and not stop:
        batch = []
        for _ in range(config.batch_size):
            try:
                batch.append(next(examples))
            except StopIteration:
                break
        if not batch:
            break
        # a batch may end mid-way at the step budget or an early stop
        _train_until(model, batch, policy, config.lr, config.max_steps - step, on_step,
                     lambda: stop)
    result.steps = step
    result.stopped_early = stop
    if not result.checkpoints or result.checkpoints[-1][0] != step:
        checkpoint(step)
    return result


def _train_until(model, batch, policy, lr, budget, on_step, should_stop):
    class _Stop(Exception):
        pass

    def wrapped(n, value):
        on_step(n, value)
        if should_stop():
            raise _Stop

    try:
        train_on_batch(model, batch, policy, lr, max_steps=budget, on_step=wrapped)
    except _Stop:
        pass
