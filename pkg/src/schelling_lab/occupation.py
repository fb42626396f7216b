"""Occupation measures of Bhat - f over dyadic Lipschitz families (1D torus).

For a field ``Bhat`` sampled on a ``GridSpec`` and a perturbation ``f`` the
measure ``h * #{x : |Bhat(x) - f(x)| <= eps}`` estimates the occupation
measure of ``Bhat - f`` near level 0; divided by ``2 eps`` it estimates the
occupation density.

Perturbations come from the dyadic class L^{K,k}: values at the points of
2^-k Z are multiples of 2^-k, bounded by K 2^N + 2^-k, neighbouring values
differ by at most K 2^(N-k-1) + 2^(2-k), and f is linear in between.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .rng import stream
from .stencil import GridSpec

N_DIM = 1


class ResolutionWarning(UserWarning):
    """The requested epsilon is below the grid-scale roughness of the field."""


@dataclass(eq=False)
class LipschitzGridFunction:
    k: int
    K: float
    R: int
    units: np.ndarray  # integer values in units of 2^-k at the points j 2^-k

    @property
    def step(self) -> float:
        return 2.0**-self.k

    @property
    def values(self) -> np.ndarray:
        return self.units * self.step

    @property
    def sup_bound(self) -> float:
        return self.K * 2**N_DIM + self.step

    @property
    def increment_bound(self) -> float:
        return self.K * 2.0 ** (N_DIM - self.k - 1) + 2.0 ** (2 - self.k)

    @property
    def max_units(self) -> int:
        return int(math.floor(self.sup_bound / self.step + 1e-9))

    @property
    def max_step_units(self) -> int:
        return int(math.floor(self.increment_bound / self.step + 1e-9))

    def violations(self) -> list[str]:
        out = []
        v = self.values
        if np.abs(v).max() > self.sup_bound + 1e-12:
            out.append("sup bound")
        if np.abs(np.diff(np.append(v, v[0]))).max() > self.increment_bound + 1e-12:
            out.append("increment bound")
        return out

    def is_valid(self) -> bool:
        return not self.violations()

    def on_grid(self, spec: GridSpec) -> np.ndarray:
        """Linear interpolation onto the cell centers of ``spec`` (periodic)."""
        if spec.N != N_DIM or spec.R != self.R:
            raise ValueError("function and field live on different tori")
        xs = np.arange(len(self.units) + 1) * self.step
        return np.interp(spec.coordinates(), xs, np.append(self.values, self.values[0]))


def _n_points(R: int, k: int) -> int:
    n = R * 2**k
    if n != int(n):
        raise ValueError("R 2^k must be an integer")
    return int(n)


def constant_function(c_units: int, K: float, k: int, R: int) -> LipschitzGridFunction:
    return LipschitzGridFunction(k, K, R, np.full(_n_points(R, k), int(c_units), dtype=np.int64))


def round_to_level(g, K: float, k: int, R: int) -> LipschitzGridFunction:
    """Nearest multiples of 2^-k of a callable ``g`` at the level-k points."""
    n = _n_points(R, k)
    x = np.arange(n) * 2.0**-k
    return LipschitzGridFunction(k, K, R, np.rint(np.asarray(g(x)) / 2.0**-k).astype(np.int64))


def _random_walk(n: int, s: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    """Periodic walk with steps in [-s, s] and values in [-cap, cap]."""
    u = np.empty(n, dtype=np.int64)
    u[0] = int(rng.integers(-cap, cap + 1))
    for j in range(1, n):
        remaining = n - j  # steps left to get back to u[0]
        lo = max(-cap, u[j - 1] - s, u[0] - remaining * s)
        hi = min(cap, u[j - 1] + s, u[0] + remaining * s)
        u[j] = int(rng.integers(lo, hi + 1))
    return u


def stress_functions(K: float, k: int, R: int, levels: int = 9) -> list[LipschitzGridFunction]:
    """Constants spread over the admissible range and steepest periodic sawteeth."""
    proto = constant_function(0, K, k, R)
    cap, s, n = proto.max_units, proto.max_step_units, len(proto.units)
    out = [constant_function(int(c), K, k, R) for c in np.unique(np.linspace(-cap, cap, levels).round())]
    for half in (m for m in range(1, n // 2 + 1) if n % (2 * m) == 0):
        amp = min(half * s, 2 * cap)
        ramp = np.minimum(np.arange(half + 1) * s, amp)
        if amp != half * s:
            continue
        tooth = np.concatenate([ramp[:-1], ramp[::-1][:-1]]) - amp // 2
        out.append(LipschitzGridFunction(k, K, R, np.tile(tooth, n // (2 * half)).astype(np.int64)))
    return out


def sample_lipschitz(K: float, k: int, seed: int, count: int, R: int = 4,
                     include_stress: bool = True) -> list[LipschitzGridFunction]:
    """``count`` random members of L^{K,k} plus (optionally) the stress cases."""
    if not K > 0 or k < 0:
        raise ValueError("need K > 0 and k >= 0")
    rng = stream(seed, "lipschitz")
    proto = constant_function(0, K, k, R)
    cap, s, n = proto.max_units, proto.max_step_units, len(proto.units)
    out = [LipschitzGridFunction(k, K, R, _random_walk(n, s, cap, rng)) for _ in range(count)]
    if include_stress:
        out.extend(stress_functions(K, k, R))
    return out


@dataclass
class OccupationEstimate:
    epsilon: float
    measure: float
    resolution_limited: bool

    @property
    def density(self) -> float:
        return self.measure / (2 * self.epsilon)


def roughness(hat: np.ndarray) -> float:
    """Median absolute increment of the field between neighbouring grid points."""
    return float(np.median(np.abs(np.diff(np.append(hat, hat[0])))))


def occupation_measure(hat: np.ndarray, spec: GridSpec, f, epsilon: float, warn: bool = True) -> OccupationEstimate:
    """h^N #{x : |hat(x) - f(x)| <= eps}; ``f`` is a grid array or a LipschitzGridFunction."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if hat.shape != spec.shape:
        raise ValueError("field does not match the grid")
    fv = f.on_grid(spec) if isinstance(f, LipschitzGridFunction) else np.broadcast_to(np.asarray(f, float), hat.shape)
    limited = epsilon < 5 * roughness(hat)
    if limited and warn:
        warnings.warn(f"epsilon={epsilon:g} is below 5x the grid-scale roughness of the field; "
                      "the estimate is resolution-limited", ResolutionWarning, stacklevel=2)
    count = int((np.abs(hat - fv) <= epsilon).sum())
    return OccupationEstimate(epsilon, count * spec.cell_volume, limited)


@dataclass
class SupResult:
    epsilon: float
    measure: float
    best: LipschitzGridFunction
    improved_by_search: bool
    sweeps: int
    resolution_limited: bool

    @property
    def density(self) -> float:
        return self.measure / (2 * self.epsilon)

    @property
    def ratio(self) -> float:
        """measure / eps, the quantity that should stay bounded as eps shrinks."""
        return self.measure / self.epsilon


class _LocalSearch:
    """Greedy +-2^-k moves at single level-k points, scored incrementally."""

    def __init__(self, hat: np.ndarray, spec: GridSpec, f: LipschitzGridFunction, eps: float):
        self.hat, self.spec, self.eps = hat, spec, eps
        self.f = LipschitzGridFunction(f.k, f.K, f.R, f.units.copy())
        self.n = len(f.units)
        ratio = spec.cells_per_unit * self.f.step
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ValueError("the field grid must refine the level-k grid")
        self.r = int(round(ratio))  # field cells per level-k segment
        self.theta = np.arange(self.r) / self.r
        self.fv = self.f.on_grid(spec)
        self.hits = np.abs(hat - self.fv) <= eps

    @property
    def measure(self) -> float:
        return int(self.hits.sum()) * self.spec.cell_volume

    def _segment(self, j):
        a, b = self.f.units[j], self.f.units[(j + 1) % self.n]
        return (a * (1 - self.theta) + b * self.theta) * self.f.step

    def try_move(self, j: int, d: int) -> bool:
        u = self.f.units
        new = u[j] + d
        if abs(new) > self.f.max_units:
            return False
        s = self.f.max_step_units
        if abs(new - u[j - 1]) > s or abs(new - u[(j + 1) % self.n]) > s:
            return False
        idx = np.concatenate([np.arange((j - 1) * self.r, j * self.r), np.arange(j * self.r, (j + 1) * self.r)])
        idx %= len(self.hat)
        old_hits = self.hits[idx].sum()
        old = u[j]
        u[j] = new
        vals = np.concatenate([self._segment((j - 1) % self.n), self._segment(j)])
        hits = np.abs(self.hat[idx] - vals) <= self.eps
        if hits.sum() > old_hits:
            self.fv[idx] = vals
            self.hits[idx] = hits
            return True
        u[j] = old
        return False

    def run(self, max_sweeps: int) -> int:
        for sweep in range(1, max_sweeps + 1):
            moved = False
            for j in range(self.n):
                for d in (1, -1):
                    if self.try_move(j, d):
                        moved = True
                        break
            if not moved:
                return sweep
        return max_sweeps


def sup_over_family(hat: np.ndarray, spec: GridSpec, K: float, k: int, epsilons, sampler_size: int = 32,
                    local_sweeps: int = 50, seed: int = 0) -> list[SupResult]:
    """Approximate sup over L^{K,k} of the occupation measure, one result per eps.

    The family is f = 0, the stress cases and ``sampler_size`` random walks;
    the best of them is then refined by greedy single-point moves.  A search
    that finds no improving move is reported through ``improved_by_search``.
    """
    family = [constant_function(0, K, k, spec.R)] + sample_lipschitz(K, k, seed, sampler_size, spec.R)
    rough = roughness(hat)
    out = []
    for eps in epsilons:
        scores = [occupation_measure(hat, spec, f, eps, warn=False).measure for f in family]
        start = family[int(np.argmax(scores))]
        search = _LocalSearch(hat, spec, start, eps)
        before = search.measure
        sweeps = search.run(local_sweeps)
        out.append(SupResult(eps, search.measure, search.f, search.measure > before, sweeps, eps < 5 * rough))
    return out


def sup_table_csv(results: list[SupResult], seed: int | None = None) -> str:
    buf = io.StringIO()
    buf.write("seed,epsilon,measure,density,ratio,improved,resolution_limited\n")
    for r in results:
        buf.write(f"{'' if seed is None else seed},{r.epsilon!r},{r.measure!r},{r.density!r},{r.ratio!r},"
                  f"{int(r.improved_by_search)},{int(r.resolution_limited)}\n")
    return buf.getvalue()


def function_to_text(f: LipschitzGridFunction) -> str:
    """Level-k value list: a header line, then one integer (units of 2^-k) per point."""
    return f"# k={f.k} K={f.K!r} R={f.R}\n" + "\n".join(str(int(u)) for u in f.units) + "\n"
