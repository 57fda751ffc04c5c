"""
Volumetric containers, cropping and raw-file persistence.

Arrays are indexed ``[x, y, z]``. On disk the payload is written with x
varying fastest (Fortran order), little-endian, next to a small text header::

    kind = image
    dims = 9 7 5
    dtype = float32
    order = x-fastest
    range = unit
    payload = image.raw

"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ffnseg.errors import (
    BoundsError,
    DimsMismatchError,
    DTypeError,
    HeaderError,
    PayloadSizeError,
)

PAD_VALUE = 0.05
SEED_VALUE = 0.95

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "uint8": np.dtype("u1"),
    "uint16": np.dtype("<u2"),
    "uint32": np.dtype("<u4"),
    "int32": np.dtype("<i4"),
}
_KINDS = ("image", "segmentation", "probability")


def _as_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise DimsMismatchError(f"expected 3 dims, got {dims}")
    return dims


@dataclass(frozen=True)
class BoxRegion:
    """Axis-aligned box given by its lowest corner and its extent."""

    corner: tuple[int, int, int]
    size: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "corner", tuple(int(c) for c in self.corner))
        object.__setattr__(self, "size", _as_dims(self.size))
        if any(s <= 0 for s in self.size):
            raise ValueError(f"box size must be strictly positive, got {self.size}")

    @classmethod
    def centered(cls, center, size) -> "BoxRegion":
        size = _as_dims(size)
        corner = tuple(int(c) - s // 2 for c, s in zip(center, size))
        return cls(corner, size)

    @property
    def stop(self) -> tuple[int, int, int]:
        return tuple(c + s for c, s in zip(self.corner, self.size))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(c, c + s) for c, s in zip(self.corner, self.size))

    def inside(self, dims) -> bool:
        return all(c >= 0 and c + s <= d for c, s, d in zip(self.corner, self.size, dims))

    def shifted(self, offset) -> "BoxRegion":
        return BoxRegion(tuple(c + o for c, o in zip(self.corner, offset)), self.size)


@dataclass(frozen=True, eq=False)
class ImageVolume:
    """Intensities in [0, 1], float32, indexed ``[x, y, z]``."""

    voxels: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.float32)
        if v.ndim != 3:
            raise DimsMismatchError(f"image must be 3D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or (v.size and (v.min() < 0.0 or v.max() > 1.0)):
            raise ValueError("image intensities must be finite and within [0, 1]")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "voxels", v)

    @classmethod
    def from_uint8(cls, data) -> "ImageVolume":
        return cls(np.asarray(data, dtype=np.uint8).astype(np.float32) / np.float32(255.0))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def __eq__(self, other):
        return (
            isinstance(other, ImageVolume)
            and self.dims == other.dims
            and np.array_equal(self.voxels, other.voxels)
        )


@dataclass(frozen=True, eq=False)
class SegmentationVolume:
    """Non-negative integer object IDs, 0 = background."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise DimsMismatchError(f"segmentation must be 3D, got shape {lab.shape}")
        if lab.size and lab.dtype.kind in "if" and lab.min() < 0:
            raise ValueError("object IDs must be non-negative")
        if lab.dtype.kind == "f" and not np.array_equal(lab, np.round(lab)):
            raise ValueError("object IDs must be integers")
        lab = lab.astype(np.uint32)
        lab.flags.writeable = False
        object.__setattr__(self, "labels", lab)

    @classmethod
    def empty(cls, dims) -> "SegmentationVolume":
        return cls(np.zeros(_as_dims(dims), dtype=np.uint32))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def ids(self) -> np.ndarray:
        ids = np.unique(self.labels)
        return ids[ids != 0]

    def __eq__(self, other):
        return (
            isinstance(other, SegmentationVolume)
            and self.dims == other.dims
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(eq=False)
class ProbabilityCanvas:
    """Per-object mask probabilities plus a per-voxel count of network writes."""

    values: np.ndarray
    update_count: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.update_count is None:
            self.update_count = np.zeros(self.values.shape, dtype=np.int32)
        else:
            self.update_count = np.asarray(self.update_count, dtype=np.int32)
        if self.values.shape != self.update_count.shape:
            raise DimsMismatchError("values and update_count differ in shape")

    @classmethod
    def fresh(cls, dims, seed=None) -> "ProbabilityCanvas":
        """Canvas at 0.05 everywhere, optionally 0.95 at ``seed``."""
        values = np.full(_as_dims(dims), PAD_VALUE, dtype=np.float32)
        if seed is not None:
            values[tuple(seed)] = SEED_VALUE
        return cls(values)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape


def crop(volume, region: BoxRegion):
    """
    Extract the voxels of ``region`` from ``volume``.

    Works on ImageVolume, SegmentationVolume, ProbabilityCanvas (values only)
    and bare 3D arrays; the result has the same type as the input. Regions
    that leave the volume raise BoundsError; nothing is clamped.
    """
    if isinstance(volume, ImageVolume):
        return ImageVolume(_crop_array(volume.voxels, region))
    if isinstance(volume, SegmentationVolume):
        return SegmentationVolume(_crop_array(volume.labels, region))
    if isinstance(volume, ProbabilityCanvas):
        return ProbabilityCanvas(
            _crop_array(volume.values, region).copy(),
            _crop_array(volume.update_count, region).copy(),
        )
    return _crop_array(np.asarray(volume), region).copy()


def _crop_array(arr: np.ndarray, region: BoxRegion) -> np.ndarray:
    if not region.inside(arr.shape[:3]):
        raise BoundsError(
            f"region corner={region.corner} size={region.size} exceeds dims {arr.shape[:3]}"
        )
    return arr[region.slices()]


def apply_split_bias(v_prev, v_pred, t):
    """
    Merge-averse canvas update.

    A voxel that already received a network write (``t > 1``) and sits below
    0.5 may not increase. Broadcasts over arrays.
    """
    v_prev = np.asarray(v_prev)
    v_pred = np.asarray(v_pred)
    keep = (v_pred > v_prev) & (v_prev < 0.5) & (np.asarray(t) > 1)
    out = np.where(keep, v_prev, v_pred)
    return out if out.ndim else out.item()


def write_patch(canvas: ProbabilityCanvas, region: BoxRegion, patch, split_bias_enabled: bool):
    """Write ``patch`` into ``canvas`` at ``region``, in place."""
    patch = np.asarray(patch, dtype=np.float32)
    if patch.shape != region.size:
        raise DimsMismatchError(f"patch shape {patch.shape} != region size {region.size}")
    if not region.inside(canvas.dims):
        raise BoundsError(f"region {region} outside canvas dims {canvas.dims}")
    sl = region.slices()
    counts = canvas.update_count[sl]
    if split_bias_enabled:
        new = apply_split_bias(canvas.values[sl], patch, counts + 1)
    else:
        new = patch
    canvas.values[sl] = np.clip(new, 0.0, 1.0)
    counts += 1


# --- persistence ---

def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".hdr", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".hdr"), p.with_name(p.name + ".raw")


def save_volume(volume, path) -> Path:
    """
    Write ``volume`` as ``<path>.hdr`` + ``<path>.raw``; returns the header path.

    ProbabilityCanvas values are stored as kind ``probability``.
    """
    if isinstance(volume, ImageVolume):
        kind, data, rng = "image", volume.voxels, "unit"
    elif isinstance(volume, SegmentationVolume):
        kind, data, rng = "segmentation", volume.labels, "labels"
    elif isinstance(volume, ProbabilityCanvas):
        kind, data, rng = "probability", volume.values, "unit"
    else:
        raise TypeError(f"cannot save {type(volume).__name__}")
    dtype_name = {np.dtype("float32"): "float32", np.dtype("uint32"): "uint32"}[data.dtype]
    hdr, raw = _paths(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(np.asarray(data, dtype=_DTYPES[dtype_name]).tobytes(order="F"))
    hdr.write_text(
        f"kind = {kind}\n"
        f"dims = {' '.join(str(d) for d in data.shape)}\n"
        f"dtype = {dtype_name}\n"
        "order = x-fastest\n"
        f"range = {rng}\n"
        f"payload = {raw.name}\n"
    )
    return hdr


def read_header(path) -> dict:
    hdr, _ = _paths(path)
    try:
        text = hdr.read_text()
    except UnicodeDecodeError as exc:
        raise HeaderError(f"{hdr}: header is not text") from exc
    fields = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise HeaderError(f"{hdr}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value
    for key in ("kind", "dims", "dtype"):
        if key not in fields:
            raise HeaderError(f"{hdr}: missing key {key!r}")
    try:
        fields["dims"] = _as_dims(fields["dims"].split())
    except (ValueError, DimsMismatchError) as exc:
        raise HeaderError(f"{hdr}: bad dims {fields['dims']!r}") from exc
    if any(d <= 0 for d in fields["dims"]):
        raise HeaderError(f"{hdr}: dims must be positive")
    if fields["kind"] not in _KINDS:
        raise HeaderError(f"{hdr}: unknown kind {fields['kind']!r}")
    if fields.get("order", "x-fastest") != "x-fastest":
        raise HeaderError(f"{hdr}: unsupported voxel order {fields['order']!r}")
    if fields["dtype"] not in _DTYPES:
        raise DTypeError(f"{hdr}: unsupported element type {fields['dtype']!r}")
    return fields


def load_volume(path):
    """Inverse of :func:`save_volume`. uint8 images are scaled to [0, 1]."""
    fields = read_header(path)
    hdr, raw = _paths(path)
    if "payload" in fields:
        raw = hdr.parent / fields["payload"]
    dtype = _DTYPES[fields["dtype"]]
    blob = raw.read_bytes()
    dims = fields["dims"]
    expected = int(np.prod(dims))
    if len(blob) != expected * dtype.itemsize:
        raise PayloadSizeError(
            f"{raw}: header declares {dims} ({expected} elements) but payload holds "
            f"{len(blob) / dtype.itemsize:g}"
        )
    data = np.frombuffer(blob, dtype=dtype).reshape(dims, order="F")
    kind = fields["kind"]
    if kind == "image":
        if fields["dtype"] == "uint8":
            return ImageVolume.from_uint8(data)
        return ImageVolume(data)
    if kind == "segmentation":
        if dtype.kind not in "ui":
            raise DTypeError(f"{hdr}: segmentation needs an integer dtype")
        return SegmentationVolume(data)
    return ProbabilityCanvas(np.array(data, dtype=np.float32))


__all__ = [
    "BoxRegion",
    "ImageVolume",
    "SegmentationVolume",
    "ProbabilityCanvas",
    "crop",
    "write_patch",
    "apply_split_bias",
    "save_volume",
    "load_volume",
    "read_header",
    "PAD_VALUE",
    "SEED_VALUE",
]
