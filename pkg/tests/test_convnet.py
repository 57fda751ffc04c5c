import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import conv_reference, finite_difference_check, forward_reference, log_loss_reference

from ffnseg import convnet
from ffnseg.convnet import ConvLayer, FFNModel, GradientSet, ResidualModule
from ffnseg.errors import (
    ArchitectureMismatchError,
    ChannelMismatchError,
    DimsMismatchError,
    NumericGuardError,
)

TINY = dict(fov=(9, 9, 5), channels=4, n_modules=2)


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30))


def random_layer(rng, cin, cout, dtype=np.float32, ksize=(3, 3, 3)):
    return ConvLayer(rng.normal(size=(*ksize, cin, cout)).astype(dtype),
                     rng.normal(size=cout).astype(dtype))


def tiny_inputs(seed=0, fov=(9, 9, 5), batch=None):
    rng = np.random.default_rng(seed)
    shape = fov if batch is None else (batch, *fov)
    img = rng.random(shape)
    mask = np.where(rng.random(shape) < 0.3, 0.95, 0.05)
    target = np.where(rng.random(shape) < 0.5, 0.95, 0.05)
    return img, mask, target


# --- conv3d_same ---

def test_center_delta_kernel_is_identity():
    layer = ConvLayer.zeros(3, 3)
    layer.kernel[1, 1, 1] = np.eye(3)
    x = np.random.default_rng(0).random((5, 4, 3, 3)).astype(np.float32)
    assert np.array_equal(convnet.conv3d_same(x, layer), x)


def test_zero_input_gives_bias():
    layer = ConvLayer(np.ones((3, 3, 3, 2, 3), np.float32), np.array([1.5, -2, 0], np.float32))
    out = convnet.conv3d_same(np.zeros((4, 4, 4, 2)), layer)
    assert np.all(out == np.array([1.5, -2, 0], np.float32))


def test_all_ones_center_and_corner():
    layer = ConvLayer(np.ones((3, 3, 3, 1, 1), np.float32), np.zeros(1, np.float32))
    out = convnet.conv3d_same(np.ones((3, 3, 3, 1)), layer)[..., 0]
    assert out[1, 1, 1] == 27
    assert out[0, 0, 0] == 8 and out[2, 2, 2] == 8
    assert out[1, 1, 0] == 18 and out[1, 0, 0] == 12


def test_conv_matches_nested_loops():
    rng = np.random.default_rng(4)
    for ksize in [(3, 3, 3), (1, 3, 5)]:
        layer = random_layer(rng, 3, 2, np.float64, ksize)
        x = rng.normal(size=(5, 6, 4, 3))
        assert np.allclose(convnet.conv3d_same(x, layer), conv_reference(x, layer.kernel, layer.bias),
                           rtol=1e-12, atol=1e-12)


def test_conv_batch_equals_per_sample():
    rng = np.random.default_rng(5)
    layer = random_layer(rng, 2, 3)
    x = rng.random((3, 5, 5, 4, 2)).astype(np.float32)
    batched = convnet.conv3d_same(x, layer)
    for b in range(3):
        assert np.allclose(batched[b], convnet.conv3d_same(x[b], layer), atol=1e-6)


def test_conv_channel_mismatch():
    layer = ConvLayer.zeros(2, 2)
    with pytest.raises(ChannelMismatchError):
        convnet.conv3d_same(np.zeros((3, 3, 3, 3)), layer)


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        ConvLayer(np.zeros((2, 3, 3, 1, 1)), np.zeros(1))


@settings(max_examples=30, deadline=None)
@given(st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
       st.integers(1, 3), st.integers(1, 3))
def test_conv_preserves_spatial_shape(dims, cin, cout):
    layer = random_layer(np.random.default_rng(0), cin, cout)
    out = convnet.conv3d_same(np.ones((*dims, cin), np.float32), layer)
    assert out.shape == (*dims, cout)


# --- model ---

def test_default_module_count():
    assert convnet.default_module_count((33, 33, 17)) == 8
    m = FFNModel.build(channels=2)
    assert 2 + 2 * m.n_modules == 18 >= convnet.required_layers((33, 33, 17)) == 16


def test_too_shallow_model_rejected():
    with pytest.raises(ArchitectureMismatchError):
        FFNModel.build((33, 33, 17), channels=2, n_modules=6)


def test_zero_parameters_give_one_half():
    m = FFNModel.build(**TINY)
    for p in m.parameters().values():
        p[...] = 0
    img, mask, _ = tiny_inputs()
    assert np.all(convnet.forward(m, img, mask) == np.float32(0.5))


def test_paper_fov_output_shape():
    m = FFNModel.build(channels=2)
    rng = np.random.default_rng(0)
    out = convnet.forward(m, rng.random((33, 33, 17)), np.full((33, 33, 17), 0.05))
    assert out.shape == (33, 33, 17)
    assert np.all((out > 0) & (out < 1))


def test_forward_matches_direct_summation():
    m = FFNModel.build(**TINY, seed=7).astype(np.float64)
    img, mask, _ = tiny_inputs(1)
    assert np.allclose(convnet.forward(m, img, mask), forward_reference(m, img, mask),
                       rtol=1e-10, atol=1e-12)
    m32 = FFNModel.build(**TINY, seed=7)
    assert rel_err(convnet.forward(m32, img, mask), forward_reference(m32, img, mask)) < 1e-5


def test_forward_dims_mismatch():
    m = FFNModel.build(**TINY)
    with pytest.raises(DimsMismatchError):
        convnet.forward(m, np.zeros((9, 9, 4)), np.zeros((9, 9, 4)))
    with pytest.raises(DimsMismatchError):
        convnet.forward(m, np.zeros((9, 9, 5)), np.zeros((9, 9, 4)))


def test_zero_residual_module_is_identity():
    rng = np.random.default_rng(0)
    stem = random_layer(rng, 2, 3)
    head = random_layer(rng, 3, 1)
    zero = ResidualModule(ConvLayer.zeros(3, 3), ConvLayer.zeros(3, 3))
    with_mod = FFNModel((3, 3, 3), 3, stem, [zero, zero], head)
    fwd = [convnet.forward(with_mod, *tiny_inputs(2, (3, 3, 3))[:2])]
    # the residual path contributes nothing, so h reaching the head is the stem output
    img, mask, _ = tiny_inputs(2, (3, 3, 3))
    h = convnet.conv3d_same(np.stack([img, mask], -1), stem)
    logits = convnet.conv3d_same(np.maximum(h, 0), head)[..., 0]
    assert np.allclose(fwd[0], 1 / (1 + np.exp(-logits)), atol=1e-6)


def test_receptive_field_covers_fov():
    m = FFNModel.build((9, 9, 5), channels=4, n_modules=1, seed=3).astype(np.float64)
    # push positive weights so no ReLU switches off the path
    for p in m.parameters().values():
        p[...] = np.abs(p) * 0.3 + 0.01
    m.head.kernel[...] *= 1e-3
    img, mask, _ = tiny_inputs(3)
    base = convnet.forward(m, img, mask)[4, 4, 2]
    for corner in [(0, 0, 0), (8, 8, 4), (0, 8, 0), (8, 0, 4)]:
        bumped = img.copy()
        bumped[corner] += 0.5
        assert convnet.forward(m, bumped, mask)[4, 4, 2] != base


# --- loss ---

def test_loss_at_one_half():
    target = np.where(np.arange(60).reshape(3, 4, 5) % 2, 0.95, 0.05)
    value, _ = convnet.loss(np.full((3, 4, 5), 0.5), target)
    assert value == pytest.approx(60 * math.log(2))


def test_loss_single_voxel_values():
    expect = -0.95 * math.log(0.95) - 0.05 * math.log(0.05)
    assert expect == pytest.approx(0.19853, abs=2e-5)
    assert convnet.loss(np.array([0.95]), np.array([0.95]))[0] == pytest.approx(expect)
    assert convnet.loss(np.array([0.05]), np.array([0.05]))[0] == pytest.approx(expect)


def test_loss_matches_reference_and_derivative():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 0.99, size=(4, 3, 2))
    m = np.where(rng.random((4, 3, 2)) < 0.5, 0.95, 0.05)
    value, grad = convnet.loss(p, m)
    assert value == pytest.approx(log_loss_reference(p, m), rel=1e-12)
    h = 1e-6
    for idx in [(0, 0, 0), (3, 2, 1), (1, 1, 0)]:
        dp = np.zeros_like(p)
        dp[idx] = h
        fd = (convnet.loss(p + dp, m)[0] - convnet.loss(p - dp, m)[0]) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-6)


def test_loss_entropy_floor():
    rng = np.random.default_rng(1)
    m = np.where(rng.random(500) < 0.5, 0.95, 0.05)
    h95 = -0.95 * math.log(0.95) - 0.05 * math.log(0.05)
    for _ in range(20):
        p = rng.uniform(1e-6, 1 - 1e-6, size=500)
        assert convnet.loss(p, m)[0] >= 500 * h95
    assert convnet.loss(m, m)[0] == pytest.approx(500 * h95)


def test_loss_guard():
    with pytest.raises(NumericGuardError):
        convnet.loss(np.array([0.0, 0.5]), np.array([0.05, 0.05]))
    with pytest.raises(NumericGuardError):
        convnet.loss(np.array([1.0]), np.array([0.95]))
    with pytest.raises(DimsMismatchError):
        convnet.loss(np.array([0.5]), np.array([0.95, 0.05]))


def test_forward_output_is_clamped():
    m = FFNModel.build(**TINY)
    m.head.bias[...] = 100.0
    img, mask, target = tiny_inputs()
    p = convnet.forward(m, img, mask)
    assert p.max() < 1.0
    value, _ = convnet.backward(m, img, mask, target)
    assert np.isfinite(value)


# --- backward ---

def test_gradients_match_finite_differences_sampled():
    m = FFNModel.build(**TINY, seed=1).astype(np.float64)
    img, mask, target = tiny_inputs(2)
    worst, checked, _ = finite_difference_check(m, img, mask, target, entries=6)
    assert checked > 50 and worst < 1e-5


def test_gradients_batched():
    m = FFNModel.build((5, 5, 3), channels=3, n_modules=1, seed=2).astype(np.float64)
    img, mask, target = tiny_inputs(3, (5, 5, 3), batch=2)
    assert finite_difference_check(m, img, mask, target, entries=8)[0] < 1e-5
    total, grads = convnet.backward(m, img, mask, target)
    parts = [convnet.backward(m, img[b], mask[b], target[b]) for b in range(2)]
    assert total == pytest.approx(sum(v for v, _ in parts))
    for name in grads:
        assert np.allclose(grads[name], parts[0][1][name] + parts[1][1][name])


def test_backward_loss_equals_forward_loss_bitwise():
    m = FFNModel.build(**TINY, seed=4)
    img, mask, target = tiny_inputs(4)
    value, _ = convnet.backward(m, img, mask, target)
    assert value == convnet.loss(convnet.forward(m, img, mask), np.float32(target))[0]


def test_zero_model_stem_bias_gradient_symmetric():
    m = FFNModel.build(**TINY)
    for p in m.parameters().values():
        p[...] = 0
    img, mask, _ = tiny_inputs()
    target = np.where(np.indices((9, 9, 5)).sum(0) % 2, 0.95, 0.05)
    _, grads = convnet.backward(m, img, mask, target)
    g = grads["stem.bias"]
    assert np.all(np.isfinite(g)) and np.all(g == g[0])


def test_backward_reports_layer_on_nan():
    m = FFNModel.build(**TINY)
    m.modules[1].conv2.kernel[0, 0, 0, 0, 0] = np.nan
    img, mask, target = tiny_inputs()
    with pytest.raises(NumericGuardError, match="modules.1"):
        convnet.backward(m, img, mask, target)


# --- sgd ---

def test_sgd_zero_gradient_is_noop():
    m = FFNModel.build(**TINY)
    before = m.copy()
    convnet.sgd_step(m, GradientSet.zeros_like(m), 0.001)
    for k, v in m.parameters().items():
        assert np.array_equal(v, before.parameters()[k])


def test_sgd_arithmetic():
    m = FFNModel.build(**TINY).astype(np.float64)
    m.stem.bias[0] = 1.0
    g = GradientSet.zeros_like(m)
    g["stem.bias"][0] = 2.0
    convnet.sgd_step(m, g, 0.001)
    assert m.stem.bias[0] == pytest.approx(0.998)


def test_two_steps_equal_one_double_step():
    m1 = FFNModel.build(**TINY, seed=3).astype(np.float64)
    m2 = m1.copy()
    g = GradientSet({k: np.full_like(v, 0.25) for k, v in m1.parameters().items()})
    convnet.sgd_step(m1, g, 0.5)
    convnet.sgd_step(m1, g, 0.5)
    convnet.sgd_step(m2, g, 1.0)
    for k in m1.parameters():
        assert np.array_equal(m1.parameters()[k], m2.parameters()[k])


def test_sgd_shape_mismatch():
    m = FFNModel.build(**TINY)
    g = GradientSet.zeros_like(m)
    g.grads["stem.bias"] = np.zeros(7, np.float32)
    with pytest.raises(DimsMismatchError):
        convnet.sgd_step(m, g, 0.1)


# --- checkpoints ---

def test_checkpoint_round_trip(tmp_path):
    m = FFNModel.build(**TINY, seed=9)
    convnet.save_checkpoint(m, tmp_path / "a.ffn")
    back = convnet.load_checkpoint(tmp_path / "a.ffn")
    img, mask, _ = tiny_inputs()
    assert np.array_equal(convnet.forward(m, img, mask), convnet.forward(back, img, mask))
    convnet.save_checkpoint(back, tmp_path / "b.ffn")
    assert (tmp_path / "a.ffn").read_bytes() == (tmp_path / "b.ffn").read_bytes()


def test_checkpoint_architecture_mismatch(tmp_path):
    convnet.save_checkpoint(FFNModel.build(**TINY), tmp_path / "a.ffn")
    with pytest.raises(ArchitectureMismatchError):
        convnet.load_checkpoint(tmp_path / "a.ffn", channels=8)
    with pytest.raises(ArchitectureMismatchError):
        convnet.load_checkpoint(tmp_path / "a.ffn", fov=(17, 17, 9))
    blob = (tmp_path / "a.ffn").read_bytes()
    (tmp_path / "cut.ffn").write_bytes(blob[:-4])
    with pytest.raises(ArchitectureMismatchError):
        convnet.load_checkpoint(tmp_path / "cut.ffn")
    (tmp_path / "junk.ffn").write_bytes(b"hello")
    with pytest.raises(ArchitectureMismatchError):
        convnet.load_checkpoint(tmp_path / "junk.ffn")
