"""
Mask predictor: a stack of SAME-padded 3D convolutions with full
pre-activation residual modules, written directly in numpy.

Tensors are channels-last, ``(batch, x, y, z, channels)``. Kernels are
``(kx, ky, kz, c_in, c_out)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from ffnseg.errors import (
    ArchitectureMismatchError,
    ChannelMismatchError,
    DimsMismatchError,
    NumericGuardError,
)

PAPER_FOV = (33, 33, 17)
PROB_EPS = 1e-7
CHECKPOINT_MAGIC = "ffnseg-checkpoint 1"


@dataclass
class ConvLayer:
    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kernel.ndim != 5:
            raise ValueError(f"kernel must be 5D (kx, ky, kz, c_in, c_out), got {self.kernel.shape}")
        if any(k % 2 == 0 for k in self.kernel.shape[:3]):
            raise ValueError(f"kernel spatial dims must be odd, got {self.kernel.shape[:3]}")
        if self.bias.shape != (self.kernel.shape[4],):
            raise ValueError("bias needs one entry per output channel")

    @classmethod
    def init(cls, c_in, c_out, rng, ksize=(3, 3, 3), dtype=np.float32) -> "ConvLayer":
        shape = (*ksize, c_in, c_out)
        fan_in = int(np.prod(ksize)) * c_in
        kernel = rng.uniform(-1.0, 1.0, size=shape) / math.sqrt(fan_in)
        return cls(kernel.astype(dtype), np.zeros(c_out, dtype=dtype))

    @classmethod
    def zeros(cls, c_in, c_out, ksize=(3, 3, 3), dtype=np.float32) -> "ConvLayer":
        return cls(np.zeros((*ksize, c_in, c_out), dtype=dtype), np.zeros(c_out, dtype=dtype))

    @property
    def c_in(self) -> int:
        return self.kernel.shape[3]

    @property
    def c_out(self) -> int:
        return self.kernel.shape[4]


@dataclass
class ResidualModule:
    conv1: ConvLayer
    conv2: ConvLayer

    def __post_init__(self):
        if self.conv1.c_in != self.conv2.c_out:
            raise ValueError("residual module must map C channels back to C channels")


def required_layers(fov) -> int:
    """Minimum number of 3x3x3 layers whose receptive field spans ``fov``."""
    return max(math.ceil((f - 1) / 2) for f in fov)


def default_module_count(fov) -> int:
    """
    Residual modules for ``fov``: one layer beyond the receptive-field bound,
    stem and head included. Gives 8 modules (18 layers) for 33x33x17.
    """
    return max(1, math.ceil((required_layers(fov) + 1 - 2) / 2))


@dataclass
class FFNModel:
    fov: tuple[int, int, int]
    channels: int
    stem: ConvLayer
    modules: list[ResidualModule]
    head: ConvLayer

    def __post_init__(self):
        self.fov = tuple(int(f) for f in self.fov)
        n_layers = 2 + 2 * len(self.modules)
        if n_layers < required_layers(self.fov):
            raise ArchitectureMismatchError(
                f"{n_layers} conv layers cannot cover fov {self.fov}; "
                f"need {required_layers(self.fov)}"
            )
        if self.stem.c_in != 2 or self.head.c_out != 1:
            raise ArchitectureMismatchError("stem must take 2 channels and head emit 1")

    @classmethod
    def build(cls, fov=PAPER_FOV, channels=8, n_modules=None, seed=0, dtype=np.float32):
        fov = tuple(fov)
        if n_modules is None:
            n_modules = default_module_count(fov)
        rng = np.random.default_rng(seed)
        stem = ConvLayer.init(2, channels, rng, dtype=dtype)
        modules = [
            ResidualModule(
                ConvLayer.init(channels, channels, rng, dtype=dtype),
                ConvLayer.init(channels, channels, rng, dtype=dtype),
            )
            for _ in range(n_modules)
        ]
        head = ConvLayer.init(channels, 1, rng, dtype=dtype)
        return cls(fov, channels, stem, modules, head)

    @property
    def n_modules(self) -> int:
        return len(self.modules)

    @property
    def dtype(self):
        return self.stem.kernel.dtype

    def layers(self):
        yield "stem", self.stem
        for i, m in enumerate(self.modules):
            yield f"modules.{i}.conv1", m.conv1
            yield f"modules.{i}.conv2", m.conv2
        yield "head", self.head

    def parameters(self) -> dict[str, np.ndarray]:
        """Parameter arrays by name, in checkpoint order (views, not copies)."""
        out = {}
        for name, layer in self.layers():
            out[f"{name}.kernel"] = layer.kernel
            out[f"{name}.bias"] = layer.bias
        return out

    def astype(self, dtype) -> "FFNModel":
        def cv(layer):
            return ConvLayer(layer.kernel.astype(dtype), layer.bias.astype(dtype))

        return FFNModel(
            self.fov,
            self.channels,
            cv(self.stem),
            [ResidualModule(cv(m.conv1), cv(m.conv2)) for m in self.modules],
            cv(self.head),
        )

    def copy(self) -> "FFNModel":
        return self.astype(self.dtype)

    def descriptor(self) -> dict:
        return {
            "fov": self.fov,
            "channels": self.channels,
            "modules": self.n_modules,
            "dtype": np.dtype(self.dtype).name,
        }


@dataclass
class GradientSet:
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, model: FFNModel) -> "GradientSet":
        return cls({k: np.zeros_like(v) for k, v in model.parameters().items()})

    def __getitem__(self, key):
        return self.grads[key]

    def __iter__(self):
        return iter(self.grads)

    def items(self):
        return self.grads.items()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.grads.values())


# --- convolution kernels ---

def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise DimsMismatchError(f"expected (x, y, z, c) or (b, x, y, z, c), got shape {x.shape}")


class _Padded:
    """
    Zero-padded input flattened to ``(rows, C)`` so that every kernel tap is a
    contiguous row slice.

    Outputs are computed on the padded grid, anchored at the window corner;
    the valid ones are the leading ``(X, Y, Z)`` block of each padded sample.
    """

    def __init__(self, x: np.ndarray, ksize):
        b, nx, ny, nz, c = x.shape
        self.shape = x.shape
        self.pads = tuple(k // 2 for k in ksize)
        px, py, pz = self.pads
        self.pshape = (b, nx + 2 * px, ny + 2 * py, nz + 2 * pz)
        _, xp, yp, zp = self.pshape
        self.rows = b * xp * yp * zp
        self.offsets = [
            i * yp * zp + j * zp + k
            for i, j, k in itertools.product(range(ksize[0]), range(ksize[1]), range(ksize[2]))
        ]
        self.buf = np.zeros((self.rows + self.offsets[-1], c), dtype=x.dtype)
        self.grid(self.buf)[:, px:px + nx, py:py + ny, pz:pz + nz] = x

    def grid(self, flat: np.ndarray) -> np.ndarray:
        return flat[:self.rows].reshape(*self.pshape, flat.shape[-1])

    def valid(self, flat: np.ndarray) -> np.ndarray:
        _, nx, ny, nz, _ = self.shape
        return self.grid(flat)[:, :nx, :ny, :nz]

    def embed(self, dout: np.ndarray) -> np.ndarray:
        flat = np.zeros((self.rows, dout.shape[-1]), dtype=dout.dtype)
        _, nx, ny, nz, _ = self.shape
        self.grid(flat)[:, :nx, :ny, :nz] = dout
        return flat


def _conv_forward(x: np.ndarray, layer: ConvLayer):
    if x.shape[-1] != layer.c_in:
        raise ChannelMismatchError(f"input has {x.shape[-1]} channels, layer expects {layer.c_in}")
    padded = _Padded(x, layer.kernel.shape[:3])
    taps = layer.kernel.reshape(-1, layer.c_in, layer.c_out)
    acc = np.zeros((padded.rows, layer.c_out), dtype=x.dtype)
    for off, w in zip(padded.offsets, taps):
        acc += padded.buf[off:off + padded.rows] @ w
    out = padded.valid(acc) + layer.bias
    return out, padded


def _conv_backward(dout: np.ndarray, padded: "_Padded", layer: ConvLayer, need_input_grad=True):
    taps = layer.kernel.reshape(-1, layer.c_in, layer.c_out)
    g = padded.embed(dout)
    n = padded.rows
    dkernel = np.empty_like(taps)
    dbuf = np.zeros_like(padded.buf) if need_input_grad else None
    for t, (off, w) in enumerate(zip(padded.offsets, taps)):
        dkernel[t] = padded.buf[off:off + n].T @ g
        if need_input_grad:
            dbuf[off:off + n] += g @ w.T
    dbias = dout.reshape(-1, layer.c_out).sum(axis=0)
    dx = None
    if need_input_grad:
        _, nx, ny, nz, _ = padded.shape
        px, py, pz = padded.pads
        dx = padded.grid(dbuf)[:, px:px + nx, py:py + ny, pz:pz + nz]
    return dx, dkernel.reshape(layer.kernel.shape), dbias


def conv3d_same(x, layer: ConvLayer) -> np.ndarray:
    """
    Zero-padded cross-correlation plus bias; spatial dims are preserved.

    ``x`` is ``(x, y, z, c_in)`` or ``(batch, x, y, z, c_in)``.
    """
    xb, squeeze = _as_batch(np.asarray(x, dtype=layer.kernel.dtype))
    out, _ = _conv_forward(xb, layer)
    return out[0] if squeeze else out


def _relu(x):
    return np.maximum(x, 0)


# --- network ---

def _stack_input(model: FFNModel, image_patch, mask_patch) -> tuple[np.ndarray, bool]:
    image_patch = np.asarray(image_patch, dtype=model.dtype)
    mask_patch = np.asarray(mask_patch, dtype=model.dtype)
    if image_patch.shape != mask_patch.shape:
        raise DimsMismatchError(f"image {image_patch.shape} vs mask {mask_patch.shape}")
    squeeze = image_patch.ndim == 3
    if squeeze:
        image_patch, mask_patch = image_patch[None], mask_patch[None]
    if image_patch.ndim != 4 or image_patch.shape[1:] != model.fov:
        raise DimsMismatchError(f"patch shape {image_patch.shape} does not match fov {model.fov}")
    return np.stack([image_patch, mask_patch], axis=-1), squeeze


def _check_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NumericGuardError(f"non-finite values at layer {name}")


def _forward_cached(model: FFNModel, x: np.ndarray, check: bool):
    cache = {}
    h, cache["stem"] = _conv_forward(x, model.stem)
    if check:
        _check_finite("stem", h)
    for i, m in enumerate(model.modules):
        a1 = _relu(h)
        c1, cols1 = _conv_forward(a1, m.conv1)
        a2 = _relu(c1)
        c2, cols2 = _conv_forward(a2, m.conv2)
        cache[f"modules.{i}"] = (h, cols1, c1, cols2)
        h = h + c2
        if check:
            _check_finite(f"modules.{i}", h)
    a = _relu(h)
    logits, cache["head"] = _conv_forward(a, model.head)
    if check:
        _check_finite("head", logits)
    cache["h_final"] = h
    prob = np.clip(expit(logits[..., 0]), PROB_EPS, 1.0 - PROB_EPS).astype(model.dtype)
    return prob, cache


def forward(model: FFNModel, image_patch, mask_patch) -> np.ndarray:
    """
    Mask probabilities for one FoV (or a batch of them).

    Parameters
    ----------
    image_patch, mask_patch : ndarray
        Shape ``model.fov`` or ``(batch, *model.fov)``.

    Returns
    -------
    ndarray
        Same shape as the inputs, values in (0, 1). Values are kept
        ``1e-7`` away from 0 and 1 so the log-loss stays finite.
    """
    x, squeeze = _stack_input(model, image_patch, mask_patch)
    prob, _ = _forward_cached(model, x, check=False)
    return prob[0] if squeeze else prob


def relu_pattern(model: FFNModel, image_patch, mask_patch) -> np.ndarray:
    """
    Flat boolean vector of which ReLU inputs are positive.

    The network is smooth in its parameters only while this pattern is
    fixed, so finite-difference checks use it to spot steps that straddle
    a kink.
    """
    x, _ = _stack_input(model, image_patch, mask_patch)
    _, cache = _forward_cached(model, x, check=False)
    parts = []
    for i in range(model.n_modules):
        h_in, _, c1, _ = cache[f"modules.{i}"]
        parts += [h_in > 0, c1 > 0]
    parts.append(cache["h_final"] > 0)
    return np.concatenate([p.ravel() for p in parts])


def loss(pred, target) -> tuple[float, np.ndarray]:
    """
    Summed voxelwise log-loss and its derivative with respect to ``pred``.

    ``pred`` must lie strictly inside (0, 1); callers feeding raw logistic
    outputs go through :func:`forward`, which keeps them there.
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimsMismatchError(f"pred {pred.shape} vs target {target.shape}")
    if not np.all(np.isfinite(pred)) or np.any(pred <= 0.0) or np.any(pred >= 1.0):
        raise NumericGuardError("predictions must lie strictly inside (0, 1)")
    p = pred.astype(np.float64)
    m = target.astype(np.float64)
    value = float(np.sum(-np.log(p) * m - np.log1p(-p) * (1.0 - m)))
    grad = (-m / p + (1.0 - m) / (1.0 - p)).astype(pred.dtype)
    return value, grad


def _forward_backward(model: FFNModel, image_patch, mask_patch, target):
    x, squeeze = _stack_input(model, image_patch, mask_patch)
    target = np.asarray(target, dtype=model.dtype)
    if squeeze:
        target = target[None]
    if target.shape != x.shape[:4]:
        raise DimsMismatchError(f"target {target.shape} vs fov batch {x.shape[:4]}")
    prob, cache = _forward_cached(model, x, check=True)
    value, _ = loss(prob, target)
    # d loss / d logit collapses to (p - m); applied unconditionally so that
    # clamped voxels still receive a restoring gradient
    dlogits = (prob - target)[..., None].astype(model.dtype)

    grads = {}
    da, grads["head.kernel"], grads["head.bias"] = _conv_backward(dlogits, cache["head"], model.head)
    dh = da * (cache["h_final"] > 0)
    for i in reversed(range(model.n_modules)):
        m = model.modules[i]
        h_in, cols1, c1, cols2 = cache[f"modules.{i}"]
        da2, dk2, db2 = _conv_backward(dh, cols2, m.conv2)
        dc1 = da2 * (c1 > 0)
        da1, dk1, db1 = _conv_backward(dc1, cols1, m.conv1)
        grads[f"modules.{i}.conv2.kernel"], grads[f"modules.{i}.conv2.bias"] = dk2, db2
        grads[f"modules.{i}.conv1.kernel"], grads[f"modules.{i}.conv1.bias"] = dk1, db1
        dh = dh + da1 * (h_in > 0)
        _check_finite(f"modules.{i} (backward)", dh)
    _, grads["stem.kernel"], grads["stem.bias"] = _conv_backward(
        dh, cache["stem"], model.stem, need_input_grad=False
    )
    ordered = GradientSet({k: grads[k] for k in model.parameters()})
    if not ordered.all_finite():
        bad = next(k for k, g in ordered.items() if not np.all(np.isfinite(g)))
        raise NumericGuardError(f"non-finite gradient for {bad}")
    return value, ordered, (prob[0] if squeeze else prob)


def backward(model: FFNModel, image_patch, mask_patch, target) -> tuple[float, GradientSet]:
    """Loss of ``forward`` against ``target`` and its gradient for every parameter."""
    value, grads, _ = _forward_backward(model, image_patch, mask_patch, target)
    return value, grads


def sgd_step(model: FFNModel, grads: GradientSet, lr: float) -> None:
    params = model.parameters()
    if set(params) != set(grads.grads):
        raise DimsMismatchError("gradient set does not match model parameters")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimsMismatchError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        p -= np.asarray(lr * g, dtype=p.dtype)


# --- checkpoints ---

def save_checkpoint(model: FFNModel, path) -> Path:
    """
    Single file: text descriptor terminated by ``end_header``, then the raw
    little-endian parameters in descriptor order (C order within each array).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = model.descriptor()
    lines = [
        CHECKPOINT_MAGIC,
        f"fov = {' '.join(map(str, d['fov']))}",
        f"channels = {d['channels']}",
        f"modules = {d['modules']}",
        f"dtype = {d['dtype']}",
    ]
    params = model.parameters()
    for name, arr in params.items():
        lines.append(f"param {name} {' '.join(map(str, arr.shape))}")
    lines.append("end_header")
    dt = np.dtype(model.dtype).newbyteorder("<")
    payload = b"".join(np.ascontiguousarray(a, dtype=dt).tobytes() for a in params.values())
    path.write_bytes(("\n".join(lines) + "\n").encode() + payload)
    return path


def load_checkpoint(path, fov=None, channels=None, n_modules=None) -> FFNModel:
    """
    Read a checkpoint; any of ``fov``/``channels``/``n_modules`` given must
    match the stored descriptor.
    """
    blob = Path(path).read_bytes()
    marker = b"end_header\n"
    cut = blob.find(marker)
    if not blob.startswith(CHECKPOINT_MAGIC.encode()) or cut < 0:
        raise ArchitectureMismatchError(f"{path}: not a checkpoint file")
    header = blob[:cut].decode().splitlines()
    payload = blob[cut + len(marker):]
    meta, shapes = {}, []
    for line in header[1:]:
        if line.startswith("param "):
            _, name, *dims = line.split()
            shapes.append((name, tuple(int(s) for s in dims)))
        else:
            k, v = (s.strip() for s in line.split("=", 1))
            meta[k] = v
    stored_fov = tuple(int(s) for s in meta["fov"].split())
    stored_c, stored_m = int(meta["channels"]), int(meta["modules"])
    for want, have, what in ((fov, stored_fov, "fov"), (channels, stored_c, "channels"),
                             (n_modules, stored_m, "modules")):
        if want is not None and (tuple(want) if what == "fov" else want) != have:
            raise ArchitectureMismatchError(f"{path}: {what} is {have}, expected {want}")
    dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    skeleton = FFNModel.build(stored_fov, stored_c, stored_m, dtype=np.dtype(meta["dtype"]))
    expected = {k: v.shape for k, v in skeleton.parameters().items()}
    if dict(shapes) != expected or [n for n, _ in shapes] != list(expected):
        raise ArchitectureMismatchError(f"{path}: parameter list disagrees with descriptor")
    total = sum(int(np.prod(s)) for _, s in shapes) * dtype.itemsize
    if len(payload) != total:
        raise ArchitectureMismatchError(f"{path}: payload holds {len(payload)} bytes, expected {total}")
    offset = 0
    params = skeleton.parameters()
    for name, shape in shapes:
        n = int(np.prod(shape)) * dtype.itemsize
        params[name][...] = np.frombuffer(payload[offset:offset + n], dtype=dtype).reshape(shape)
        offset += n
    return skeleton
