import itertools

import numpy as np
import pytest
from scipy import stats

from ffnseg import convnet
from ffnseg.errors import BoundsError, ConfigError, DimsMismatchError
from ffnseg.inference import MovementPolicy
from ffnseg.metrics import EvaluationReport
from ffnseg.synth import SynthConfig, generate_world
from ffnseg.training import (
    PAPER_BOUNDARIES,
    RebalancingBins,
    TrainConfig,
    TrainingExample,
    active_fraction,
    checkpoint_steps,
    class_of,
    example_dims_for,
    extract_example,
    rebalance_stream,
    train_on_batch,
    train_on_example,
    training_loop,
)

FOV, DELTA = (5, 5, 3), (2, 2, 1)
POLICY = MovementPolicy(DELTA, 0.9)
EX_DIMS = example_dims_for(FOV, DELTA)


def tiny_model(seed=0):
    return convnet.FFNModel.build(FOV, channels=4, n_modules=1, seed=seed)


def fake_example(fraction, rng=None):
    """Example whose target covers roughly ``fraction`` of the box."""
    n = int(np.prod(EX_DIMS))
    k = int(round(fraction * n))
    flat = np.zeros(n, bool)
    flat[:k] = True
    if rng is not None:
        rng.shuffle(flat)
    target = np.where(flat.reshape(EX_DIMS), 0.95, 0.05).astype(np.float32)
    target[tuple(d // 2 for d in EX_DIMS)] = 0.95
    return TrainingExample(np.zeros(EX_DIMS, np.float32), target, (0, 0, 0))


# --- examples ---

def test_uniform_object_gives_all_foreground():
    gt = np.ones((9, 9, 9), np.uint32)
    ex = extract_example(np.zeros((9, 9, 9), np.float32), gt, (4, 4, 4), (5, 5, 5))
    assert np.all(ex.target == np.float32(0.95))
    assert active_fraction(ex) == 1.0


def test_half_split_box():
    gt = np.ones((8, 8, 8), np.uint32)
    gt[4:] = 2
    ex = extract_example(np.zeros((8, 8, 8), np.float32), gt, (2, 4, 4), (4, 4, 4))
    # the box spans x = 0..3, all of ID 1
    assert active_fraction(ex) == 1.0
    ex = extract_example(np.zeros((8, 8, 8), np.float32), gt, (4, 4, 4), (4, 4, 4))
    assert active_fraction(ex) == pytest.approx(0.5)
    assert ex.target[ex.local_center] == np.float32(0.95)


def test_example_errors():
    gt = np.zeros((9, 9, 9), np.uint32)
    gt[4, 4, 4] = 1
    img = np.zeros((9, 9, 9), np.float32)
    with pytest.raises(ValueError):
        extract_example(img, gt, (3, 3, 3), (5, 5, 5))
    with pytest.raises(BoundsError):
        extract_example(img, gt, (1, 4, 4), (5, 5, 5))


def test_example_dims_rule():
    assert example_dims_for((17, 17, 9), (4, 4, 2)) == (25, 25, 13)
    assert example_dims_for((33, 33, 17), (8, 8, 4)) == (49, 49, 25)


# --- rebalancing ---

@pytest.mark.parametrize("f,cls", [(0.0, 1), (0.005, 1), (0.05, 6), (0.0749, 7),
                                   (0.075, 8), (0.95, 17), (1.0, 17)])
def test_class_of(f, cls):
    assert class_of(f) == cls


def test_class_of_rejects_out_of_range():
    with pytest.raises(ValueError):
        class_of(1.2)
    with pytest.raises(ConfigError):
        RebalancingBins((0.0, 0.5, 0.5, 1.0))
    assert RebalancingBins().n_classes == len(PAPER_BOUNDARIES) - 1 == 17


def test_single_class_passes_through():
    src = [fake_example(0.5) for _ in range(20)]
    out = list(rebalance_stream(src))
    assert out == src


def test_skewed_source_is_balanced():
    rng = np.random.default_rng(0)
    small, large = fake_example(0.02), fake_example(0.8)

    def source():
        while True:
            yield small if rng.random() < 0.9 else large

    out = [class_of(active_fraction(e)) for e in itertools.islice(rebalance_stream(source()), 10000)]
    counts = np.bincount(out)
    k_small, k_large = class_of(0.02), class_of(0.8)
    assert counts[k_small] + counts[k_large] == 10000
    # expected 5000 each; binomial sigma is 50
    assert abs(counts[k_small] - 5000) <= 150


def test_rebalance_is_deterministic_and_ends_with_source():
    rng = np.random.default_rng(1)
    src = [fake_example(f) for f in rng.random(200)]
    a = [id(e) for e in rebalance_stream(src)]
    b = [id(e) for e in rebalance_stream(src)]
    assert a == b and 0 < len(a) <= 200


def test_rebalance_uniform_over_seventeen_classes():
    rng = np.random.default_rng(2)
    mids = [(lo + hi) / 2 for lo, hi in zip(PAPER_BOUNDARIES, PAPER_BOUNDARIES[1:])]
    pool = [fake_example(m, rng) for m in mids]
    assert sorted({class_of(active_fraction(e)) for e in pool}) == list(range(1, 18))
    weights = np.geomspace(1, 200, 17)
    weights /= weights.sum()

    def source():
        while True:
            yield pool[rng.choice(17, p=weights)]

    out = [class_of(active_fraction(e)) for e in itertools.islice(rebalance_stream(source()), 3400)]
    counts = np.bincount(out, minlength=18)[1:]
    assert stats.chisquare(counts).pvalue > 0.001


# --- optimisation ---

def test_center_only_target_needs_one_evaluation():
    ex = fake_example(0.0)
    assert active_fraction(ex) == pytest.approx(1 / np.prod(EX_DIMS))
    losses = train_on_example(tiny_model(), ex, POLICY, lr=0.001)
    assert len(losses) == 1


def test_repeated_training_reduces_loss():
    # a 3x3x3 object never reaches the faces of the +-delta box, so each pass
    # is the same single evaluation and the totals are comparable
    rng = np.random.default_rng(3)
    gt = np.zeros((20, 20, 12), np.uint32)
    gt[9:12, 9:12, 5:8] = 1
    img = np.where(gt > 0, 0.8, 0.3) + 0.01 * rng.random(gt.shape)
    ex = extract_example(img.astype(np.float32), gt, (10, 10, 6), EX_DIMS)
    model = tiny_model()
    passes = [train_on_example(model, ex, POLICY, lr=0.001) for _ in range(10)]
    assert all(len(p) == 1 for p in passes)
    assert sum(passes[-1]) < sum(passes[0])


def test_batch_step_bound_and_budget():
    ex = fake_example(1.0)
    model = tiny_model()
    losses = train_on_batch(model, [ex, ex], POLICY, lr=1e-4)
    # at most one step per reduced cell of the example box
    bound = int(np.prod([-(-n // d) for n, d in zip(EX_DIMS, DELTA)]))
    assert 1 <= len(losses) <= bound
    assert len(train_on_batch(tiny_model(), [ex], POLICY, lr=1e-4, max_steps=2)) <= 2


def test_wrong_example_size_rejected():
    ex = TrainingExample(np.zeros((9, 9, 9), np.float32), np.full((9, 9, 9), 0.95, np.float32),
                         (0, 0, 0))
    with pytest.raises(DimsMismatchError):
        train_on_example(tiny_model(), ex, POLICY)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(fov=(17, 17, 9), delta=(4, 4, 2), example_dims=(49, 49, 25))
    with pytest.raises(ConfigError):
        TrainConfig(fov=FOV, delta=(0, 2, 1))
    with pytest.raises(ConfigError):
        TrainConfig(fov=FOV, delta=DELTA, lr=0)
    assert TrainConfig(fov=(17, 17, 9), delta=(4, 4, 2)).example_dims == (25, 25, 13)


# --- loop ---

@pytest.fixture(scope="module")
def corpus():
    cfg = SynthConfig(dims=(24, 24, 12), n_objects=(2, 3), tube_radius=(2.0, 3.0),
                      blob_radius=(3.0, 4.0), tube_length=(10, 20))
    return [(w.image, w.segmentation) for w in (generate_world(cfg.replace(seed=s)) for s in range(2))]


def loop_config(**kw):
    base = dict(fov=FOV, channels=4, modules=1, delta=DELTA, lr=1e-4, batch_size=2,
                max_steps=25, checkpoint_every=10)
    return TrainConfig(**{**base, **kw})


def test_checkpoint_schedule(corpus, tmp_path):
    assert checkpoint_steps(250, 100) == [100, 200, 250]
    assert checkpoint_steps(200, 100) == [100, 200]
    cfg = loop_config()
    res = training_loop(cfg.build_model(), corpus, cfg, tmp_path)
    assert [s for s, _ in res.checkpoints] == [10, 20, 25]
    assert res.steps == len(res.losses) == 25
    assert all(p.exists() for _, p in res.checkpoints)


def test_metrics_log_and_early_stop(corpus, tmp_path):
    cfg = loop_config(max_steps=100, patience=3)
    res = training_loop(cfg.build_model(), corpus, cfg, tmp_path,
                        evaluator=lambda m: EvaluationReport(50.0, 0, 0, 0, 0, 10))
    # first evaluation sets the best, three more without improvement stop the run
    assert res.stopped_early and res.steps == 40
    lines = (tmp_path / "metrics.tsv").read_text().splitlines()
    assert len(lines) == 5
    assert len(lines[1].split("\t")) == 1 + len(EvaluationReport.COLUMNS)
    assert res.best()[0] == 10


def test_loop_is_deterministic(corpus, tmp_path):
    cfg = loop_config(max_steps=12)
    a = training_loop(cfg.build_model(), corpus, cfg, tmp_path / "a")
    b = training_loop(cfg.build_model(), corpus, cfg, tmp_path / "b")
    assert a.losses == b.losses
    assert a.checkpoints[-1][1].read_bytes() == b.checkpoints[-1][1].read_bytes()


def test_empty_corpus(tmp_path):
    cfg = loop_config()
    with pytest.raises(ValueError):
        training_loop(cfg.build_model(), [], cfg, tmp_path)
