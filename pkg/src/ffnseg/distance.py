"""Exact Euclidean distance transform by separable lower envelopes of parabolas."""

from __future__ import annotations

import numpy as np

_INF = 1e20


def _envelope_1d(f: np.ndarray, spacing: float) -> np.ndarray:
    """
    Squared distance along one line: ``min_q ((p - q) * spacing)**2 + f[q]``.

    Only finite samples contribute a parabola; a line without any stays at
    ``_INF``.
    """
    n = f.shape[0]
    fl = f.tolist()
    sites = [q for q in range(n) if fl[q] < _INF]
    if not sites:
        return np.full(n, _INF)
    s2 = spacing * spacing
    v = [sites[0]]
    z = [-np.inf, np.inf]
    for q in sites[1:]:
        fq = fl[q] + s2 * q * q
        while True:
            p = v[-1]
            s = (fq - (fl[p] + s2 * p * p)) / (2 * s2 * (q - p))
            if s <= z[-2] and len(v) > 1:
                v.pop()
                z.pop()
                continue
            break
        v.append(q)
        z[-1] = s
        z.append(np.inf)
    d = np.empty(n)
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = s2 * (q - p) * (q - p) + fl[p]
    return d


def squared_edt(features: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """
    Squared Euclidean distance from every voxel to the nearest True voxel of
    ``features``. Voxels are spaced ``spacing`` apart along (x, y, z).

    If there are no feature voxels the result is ``inf`` everywhere.
    """
    features = np.asarray(features, dtype=bool)
    if not features.any():
        return np.full(features.shape, np.inf)
    dist = np.where(features, 0.0, _INF)
    for axis in range(features.ndim):
        moved = np.moveaxis(dist, axis, -1)
        flat = moved.reshape(-1, moved.shape[-1])
        out = np.empty_like(flat)
        for i, line in enumerate(flat):
            if line.min() >= _INF:
                out[i] = line
            elif line.max() == 0.0:
                out[i] = 0.0
            else:
                out[i] = _envelope_1d(line, float(spacing[axis]))
        dist = np.moveaxis(out.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(dist)


def edt(features: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Euclidean distance to the nearest True voxel of ``features``."""
    return np.sqrt(squared_edt(features, spacing))
