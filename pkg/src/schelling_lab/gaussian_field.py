"""Moving-average Gaussian initial fields built from cell-aggregated white noise.

``B_m(x)`` is the integral of the centered noise ``W_m - mean_j W_j`` over the
unit ball around ``x``, where the ``W_m`` are independent white noises scaled
by ``1/sqrt(M)``.  This gives

    Cov(B_m(x), B_m'(x')) = ((M-1)/M^2 if m == m' else -1/M^2) * overlap(x, x')

with ``overlap`` the volume of the intersection of the two balls.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .rng import RNG_ALGORITHM, stream
from .stencil import ContinuumMask, GridSpec, continuum_mask, neighborhood_sum


@dataclass(eq=False)
class WhiteNoiseGrid:
    spec: GridSpec
    M: int
    seed: int | None
    values: np.ndarray  # (M, *spec.shape)


@dataclass(eq=False)
class InitialField:
    spec: GridSpec
    M: int
    values: np.ndarray  # (M, *spec.shape)
    seed: int | None = None
    p: float = math.inf


def sample_white_noise(spec: GridSpec, M: int, seed: int, replicate: int = 0) -> WhiteNoiseGrid:
    """Independent N(0, h^N)/sqrt(M) draws per cell and channel."""
    if M < 2:
        raise ValueError("M must be >= 2")
    rng = stream(seed, "white_noise", replicate)
    sd = math.sqrt(spec.cell_volume / M)
    return WhiteNoiseGrid(spec, M, seed, rng.standard_normal((M,) + spec.shape) * sd)


def build_initial_field(noise: WhiteNoiseGrid, mask: ContinuumMask | None = None) -> InitialField:
    if mask is None:
        mask = continuum_mask(noise.spec)
    if mask.spec != noise.spec:
        raise ValueError("mask and noise grids differ")
    W = noise.values
    centered = W - W.mean(axis=0, keepdims=True)
    B = neighborhood_sum(centered, mask)
    return InitialField(noise.spec, noise.M, B, noise.seed, mask.p)


def sample_initial_field(spec: GridSpec, M: int, seed: int, p: float = math.inf, replicate: int = 0) -> InitialField:
    return build_initial_field(sample_white_noise(spec, M, seed, replicate), continuum_mask(spec, p))


def hat_field(initial: InitialField) -> np.ndarray:
    """B_1 - B_2 for two opinions."""
    if initial.M != 2:
        raise ValueError("the sign field is defined for M = 2 only")
    return initial.values[0] - initial.values[1]


def _torus_delta(x, xp, R):
    d = np.abs(np.asarray(x, dtype=float) - np.asarray(xp, dtype=float))
    if R is not None:
        d = np.mod(d, R)
        d = np.minimum(d, R - d)
    return d


def ball_overlap(x, xp, N: int, p: float = math.inf, R: float | None = None, resolution: int = 400) -> float:
    """Volume of the intersection of the unit l^p balls around x and x'.

    Closed form for p = inf; midpoint quadrature over the first ball otherwise.
    """
    d = np.atleast_1d(_torus_delta(x, xp, R))
    if len(d) != N:
        raise ValueError("points must have N coordinates")
    if math.isinf(p):
        return float(np.prod(np.maximum(0.0, 2.0 - d)))
    u = (np.arange(resolution) + 0.5) / resolution * 2 - 1
    pts = np.stack(np.meshgrid(*([u] * N), indexing="ij"), axis=-1).reshape(-1, N)
    inside = (np.abs(pts) ** p).sum(axis=1) < 1
    inside &= (np.abs(pts - d) ** p).sum(axis=1) < 1
    return float(inside.sum() * (2.0 / resolution) ** N)


def covariance_exact(x, xp, M: int, N: int, p: float = math.inf, R: float | None = None) -> np.ndarray:
    """M x M covariance matrix of (B(x), B(x'))."""
    ov = ball_overlap(x, xp, N, p, R)
    C = np.full((M, M), -ov / M**2)
    np.fill_diagonal(C, (M - 1) / M**2 * ov)
    return C


def field_header(field: InitialField) -> dict:
    return {
        "format": "schelling-field/1",
        "R": field.spec.R,
        "cells_per_unit": field.spec.cells_per_unit,
        "N": field.spec.N,
        "M": field.M,
        "p": "inf" if math.isinf(field.p) else field.p,
        "seed": field.seed,
        "rng": RNG_ALGORITHM,
        "dtype": "<f8",
        "order": "C",
    }


def write_field_binary(field: InitialField, path) -> None:
    """One JSON header line, then the (M, *shape) payload as little-endian doubles."""
    with open(path, "wb") as fh:
        fh.write((json.dumps(field_header(field)) + "\n").encode())
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_field_binary(path) -> InitialField:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        payload = fh.read()
    spec = GridSpec(header["R"], header["cells_per_unit"], header["N"])
    values = np.frombuffer(payload, dtype="<f8").reshape((header["M"],) + spec.shape).copy()
    p = math.inf if header["p"] == "inf" else float(header["p"])
    return InitialField(spec, header["M"], values, header["seed"], p)


def field_to_csv(field: InitialField) -> str:
    """Long-format CSV: flat cell index, coordinates, one column per channel."""
    if field.spec.side**field.spec.N > 1_000_000:
        raise ValueError("grid too large for CSV output")
    buf = io.StringIO()
    coords = [f"x{k}" for k in range(field.spec.N)]
    buf.write("cell," + ",".join(coords) + "," + ",".join(f"B{m + 1}" for m in range(field.M)) + "\n")
    idx = np.indices(field.spec.shape).reshape(field.spec.N, -1).T * field.spec.h
    vals = field.values.reshape(field.M, -1).T
    for k, (c, v) in enumerate(zip(idx, vals)):
        buf.write(f"{k}," + ",".join(repr(float(a)) for a in c) + "," + ",".join(repr(float(b)) for b in v) + "\n")
    return buf.getvalue()
