"""Cell grids on the continuum torus and neighborhood integrals over them.

Grid points sit at cell centers ``x_j = j*h``; cell ``j`` covers
``[x_j - h/2, x_j + h/2)``.  The neighborhood of ``x`` is the open unit
l^p ball around ``x``.  Each cell carries the fraction of its volume inside
that ball.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SUPERSAMPLE = 16


@dataclass(frozen=True)
class GridSpec:
    R: float
    cells_per_unit: int
    N: int = 1

    def __post_init__(self):
        if self.R < 3:
            raise ValueError("torus width R must be >= 3")
        if self.cells_per_unit < 1:
            raise ValueError("cells_per_unit must be >= 1")
        if self.N < 1:
            raise ValueError("dimension N must be >= 1")
        cells = self.R * self.cells_per_unit
        if abs(cells - round(cells)) > 1e-9:
            raise ValueError("R * cells_per_unit must be an integer so the periodic grid closes")

    @property
    def h(self) -> float:
        return 1.0 / self.cells_per_unit

    @property
    def side(self) -> int:
        return int(round(self.R * self.cells_per_unit))

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side,) * self.N

    @property
    def cell_volume(self) -> float:
        return self.h**self.N

    @property
    def volume(self) -> float:
        return float(self.R) ** self.N

    def coordinates(self) -> np.ndarray:
        return np.arange(self.side) * self.h


@dataclass(frozen=True, eq=False)
class ContinuumMask:
    """Per-cell volume fractions of the unit l^p ball around a cell center."""

    spec: GridSpec
    p: float
    offsets: np.ndarray
    fractions: np.ndarray
    denominator: int

    @property
    def weights(self) -> np.ndarray:
        return self.fractions * self.spec.cell_volume

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())


def _fractions_inf(n: int, N: int):
    d = np.arange(-n, n + 1)
    f1 = np.where(np.abs(d) < n, 2, 1)
    grids = np.meshgrid(*([d] * N), indexing="ij")
    offs = np.stack(grids, axis=-1).reshape(-1, N)
    num = np.ones(len(offs), dtype=np.int64)
    for k in range(N):
        num *= f1[offs[:, k] + n]
    return offs, num, 2**N


def _fractions_supersampled(n: int, N: int, p: float):
    s = SUPERSAMPLE
    sub = ((np.arange(s) + 0.5) / s - 0.5)
    d = np.arange(-n, n + 1)
    offs = np.stack(np.meshgrid(*([d] * N), indexing="ij"), axis=-1).reshape(-1, N)
    subs = np.stack(np.meshgrid(*([sub] * N), indexing="ij"), axis=-1).reshape(-1, N)
    num = np.zeros(len(offs), dtype=np.int64)
    h = 1.0 / n
    for start in range(0, len(offs), 4096):
        block = offs[start:start + 4096]
        pts = (block[:, None, :] + subs[None, :, :]) * h
        a = np.abs(pts)
        norm = a.max(axis=-1) if math.isinf(p) else (a**p).sum(axis=-1) ** (1.0 / p)
        num[start:start + 4096] = (norm < 1.0).sum(axis=1)
    keep = num > 0
    return offs[keep], num[keep], s**N


@lru_cache(maxsize=32)
def _mask_cached(R, cells_per_unit, N, p):
    spec = GridSpec(R, cells_per_unit, N)
    n = spec.cells_per_unit
    if 2 * n + 1 > spec.side:
        raise ValueError("neighborhood does not fit in the torus")
    if math.isinf(p):
        offs, num, den = _fractions_inf(n, N)
    else:
        offs, num, den = _fractions_supersampled(n, N, p)
    return ContinuumMask(spec, float(p), offs, num / den, den)


def continuum_mask(spec: GridSpec, p: float = math.inf) -> ContinuumMask:
    """Cached weight table for the unit l^p ball on ``spec``.

    For p = inf the partial volumes are exact (boundary cells are cut in
    half along each axis); otherwise they are estimated by supersampling
    each cell ``SUPERSAMPLE`` times per axis.
    """
    if not p >= 1:
        raise ValueError("p must lie in [1, inf]")
    return _mask_cached(spec.R, spec.cells_per_unit, spec.N, float(p))


def _doubled_box_axis(a: np.ndarray, n: int, axis: int) -> np.ndarray:
    """2*sum_{|d|<n} a[i+d] + a[i-n] + a[i+n], periodic along ``axis``."""
    L = a.shape[axis]
    ext = np.concatenate([np.take(a, range(L - n, L), axis=axis), a, np.take(a, range(n), axis=axis)], axis=axis)
    zshape = list(ext.shape)
    zshape[axis] = 1
    C = np.concatenate([np.zeros(zshape, dtype=ext.dtype), np.cumsum(ext, axis=axis)], axis=axis)
    idx = np.arange(L)
    # ext index of original i is i + n
    full = np.take(C, idx + 2 * n, axis=axis) - np.take(C, idx + 1, axis=axis)
    ends = np.take(ext, idx, axis=axis) + np.take(ext, idx + 2 * n, axis=axis)
    return 2 * full + ends


def neighborhood_sum(values: np.ndarray, mask: ContinuumMask) -> np.ndarray:
    """sum_k fraction_k * values[x + offset_k] over the last N axes, periodic.

    Integer input is summed exactly (the result is exact up to the final
    division by the fraction denominator).  The volume factor h^N is not
    applied.
    """
    N = mask.spec.N
    if values.shape[-N:] != mask.spec.shape:
        raise ValueError("field does not match the mask grid")
    integer = np.issubdtype(values.dtype, np.integer)
    lead = values.ndim - N
    if math.isinf(mask.p):
        out = values.astype(np.int64) if integer else values.astype(float)
        for ax in range(lead, values.ndim):
            out = _doubled_box_axis(out, mask.spec.cells_per_unit, ax)
        return out / mask.denominator
    kernel = np.zeros(mask.spec.shape)
    idx = tuple((mask.offsets % mask.spec.side).T)
    np.add.at(kernel, idx, mask.fractions * mask.denominator)
    # kernel is applied as correlation: out[x] = sum_d k[d] v[x+d]; the ball is symmetric
    axes = tuple(range(lead, values.ndim))
    spec_k = np.fft.rfftn(kernel)
    out = np.fft.irfftn(np.fft.rfftn(values.astype(float), axes=axes) * spec_k, s=mask.spec.shape, axes=axes)
    if integer:
        out = np.rint(out)
    return out / mask.denominator
