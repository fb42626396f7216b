"""Discrete-to-continuum comparisons.

The normalized bias of a lattice run is

    Y^w_m(i/w, t) = w^(-N/2) * sum_{j in nbhd(i)} (1{X(j, t w^(-N/2)) = m} - 1/M)

at lattice points, extended multilinearly in between.  ``couple_and_compare``
feeds Y^w(., 0) to the continuum solver as its initial data, so both
evolutions start from the same function and E(0) = 0.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .continuum import ContinuumField, evolve
from .lattice import (
    EventLog,
    Geometry,
    OpinionGrid,
    apply_flip,
    build_neighborhood_mask,
    extract_clusters,
    grid_from_opinions,
    init_configuration,
    is_stable_configuration,
    run_dynamics,
)
from .rng import stream
from .stencil import GridSpec

HAUSDORFF_WINDOW = 5.0


def time_scale(w: int, N: int) -> float:
    """Lattice time per unit of continuum time."""
    return float(w) ** (-N / 2)


def to_lattice_time(t: float, w: int, N: int) -> float:
    return t * time_scale(w, N)


def to_continuum_time(s: float, w: int, N: int) -> float:
    return s / time_scale(w, N)


@dataclass(eq=False)
class NormalizedBiasField:
    w: int
    M: int
    N: int
    R: int
    t: float
    values: np.ndarray  # (M, *lattice shape), Y^w at x = i/w

    @property
    def amplitude(self) -> float:
        return float(self.w) ** (-self.N / 2)

    def at(self, x) -> np.ndarray:
        """Multilinear interpolation between the 2^N surrounding lattice points."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.N:
            raise ValueError("points must have N coordinates")
        side = self.values.shape[1]
        u = x * self.w
        base = np.floor(u).astype(np.int64)
        frac = u - base
        out = np.zeros(x.shape[:-1] + (self.M,))
        for corner in range(2**self.N):
            bits = [(corner >> k) & 1 for k in range(self.N)]
            wt = np.ones(x.shape[:-1])
            idx = []
            for k, b in enumerate(bits):
                wt = wt * (frac[..., k] if b else 1 - frac[..., k])
                idx.append((base[..., k] + b) % side)
            out += wt[..., None] * np.moveaxis(self.values[(slice(None),) + tuple(idx)], 0, -1)
        return out


def bias_values(grid: OpinionGrid) -> np.ndarray:
    """Y^w_m at every lattice point for the grid's current opinions."""
    w = grid.mask.w
    N = grid.geometry.dimension
    centered = grid.counts - grid.mask.size / grid.M
    return (centered.T * float(w) ** (-N / 2)).reshape((grid.M,) + grid.geometry.shape)


def _check_torus(grid: OpinionGrid) -> int:
    g = grid.geometry
    if g.kind != "torus":
        raise ValueError("normalized bias is defined on the torus")
    w = grid.mask.w
    if g.side_nodes % w:
        raise ValueError("torus side is not a multiple of w")
    return g.side_nodes // w


def normalized_bias(initial: OpinionGrid, log: EventLog, times, R: int | None = None,
                    check_increments: bool = False) -> list[NormalizedBiasField]:
    """Y^w at the given continuum times, by replaying ``log`` on a copy of ``initial``.

    With ``check_increments`` (M = 2) every flip is checked to move
    Y^w_1 - Y^w_2 by exactly +-2 w^(-N/2) at each node that sees it, and by
    nothing elsewhere.
    """
    width = _check_torus(initial)
    if R is not None and R != width:
        raise ValueError(f"torus width {width} does not match R = {R}")
    w = initial.mask.w
    N = initial.geometry.dimension
    grid = initial.copy()
    flips = np.flatnonzero(log.was_flip)
    out = []
    k = 0
    amp = float(w) ** (-N / 2)
    for t in sorted(float(s) for s in times):
        s = to_lattice_time(t, w, N)
        while k < len(flips) and log.times[flips[k]] <= s:
            e = flips[k]
            if check_increments:
                if grid.M != 2:
                    raise ValueError("increment check needs M = 2")
                before = (grid.counts[:, 0] - grid.counts[:, 1]).astype(np.int64)
            aff = apply_flip(grid, int(log.nodes[e]), int(log.new[e]))
            if check_increments:
                after = (grid.counts[:, 0] - grid.counts[:, 1]).astype(np.int64)
                step = 2 if log.new[e] == 1 else -2
                diff = (after - before) * amp
                expected = np.zeros_like(diff)
                expected[aff] = step * amp
                if not np.array_equal(diff, expected):
                    raise AssertionError(f"flip at event {e} moved the hat field by an unexpected amount")
            k += 1
        out.append(NormalizedBiasField(w, grid.M, N, width, t, bias_values(grid)))
    return out


@dataclass
class ErrorRow:
    w: int
    seed: int
    T: float
    times: np.ndarray
    errors: np.ndarray
    bounds: np.ndarray
    outcome: str

    @property
    def E0(self) -> float:
        return float(self.errors[0])

    @property
    def E_T(self) -> float:
        return float(self.errors[-1])

    @property
    def within_bound(self) -> bool:
        return bool((self.errors <= self.bounds).all())


def speed_bound(t, w: int, N: int) -> np.ndarray:
    """Allowed growth of E(t) when both sides start from the same data.

    The drift part 2 * |nbhd| / w^N * t bounds both evolutions' speeds; the
    second term covers Poisson fluctuations of the lattice jumps, which
    dominate for small t at desk-scale w.
    """
    t = np.asarray(t, dtype=float)
    nbhd = (2 * w + 1) ** N / float(w) ** N
    return 2 * nbhd * t + 6 * np.sqrt(nbhd * t) * float(w) ** (-N / 4)


def couple_and_compare(seed: int, w: int, T: float = 1.0, R: int = 14, N: int = 1, M: int = 2,
                       n_samples: int = 11, dt: float | None = None) -> ErrorRow:
    """Sup-norm gap between the lattice bias and the continuum solution started from it."""
    if not T > 0:
        raise ValueError("T must be positive")
    geometry = Geometry.torus(N, R, w)
    mask = build_neighborhood_mask(N, w)
    initial = init_configuration(geometry, M, mask, seed)
    grid = initial.copy()
    times = np.linspace(0.0, T, n_samples)
    log = run_dynamics(grid, to_lattice_time(T, w, N), seed)
    discrete = normalized_bias(initial, log, times, R=R)
    spec = GridSpec(R, w, N)
    B = discrete[0].values.copy()
    f = ContinuumField(spec, M, B, np.zeros_like(B), "single_site", math.inf, 0.0, dt)
    traj = evolve(f, T, snapshot_times=times, audit=False)
    errors = np.array([float(np.abs(d.values - c).max()) for d, c in zip(discrete, traj.snapshots)])
    return ErrorRow(w, seed, T, times, errors, speed_bound(times, w, N), log.outcome)


def error_table_csv(rows: list[ErrorRow]) -> str:
    buf = io.StringIO()
    buf.write("w,seed,T,t,E\n")
    for r in rows:
        for t, e in zip(r.times, r.errors):
            buf.write(f"{r.w},{r.seed},{r.T!r},{float(t)!r},{float(e)!r}\n")
    return buf.getvalue()


# ---- final configurations --------------------------------------------------

def nested_initial_opinions(seed: int, ws, R: int) -> dict[int, np.ndarray]:
    """Coupled 1D, M = 2 initial configurations for every w in ``ws``.

    The finest configuration is i.i.d. uniform; a coarser node takes the
    majority of the ``w_max / w`` fine nodes it covers.  The ratio must be
    odd, so the majority of fair coins is again a fair coin and coarse nodes
    stay i.i.d. uniform.
    """
    ws = sorted(ws)
    top = ws[-1]
    for w in ws:
        if top % w or (top // w) % 2 == 0:
            raise ValueError("every w must divide max(w) with an odd quotient")
    fine = stream(seed, "init").integers(1, 3, size=R * top)
    out = {}
    for w in ws:
        r = top // w
        ones = (fine.reshape(-1, r) == 1).sum(axis=1)
        out[w] = np.where(2 * ones > r, 1, 2).astype(np.int16)
    return out


@dataclass
class FinalConfig:
    w: int
    seed: int
    opinions: np.ndarray
    run_lengths: np.ndarray
    run_opinions: np.ndarray
    boundaries: np.ndarray  # rescaled, in (-R/2, R/2]
    origin_length: float  # rescaled length of the run containing node 0
    stable: bool
    stabilized_at: float | None
    n_events: int


@dataclass
class FinalConfigStats:
    R: int
    configs: list[FinalConfig]
    excluded: list = field(default_factory=list)  # (w, seed) pairs that did not stabilize
    hausdorff: list = field(default_factory=list)  # (seed, w_a, w_b, distance)

    def run_length_histogram(self, w: int) -> dict[int, int]:
        vals, counts = np.unique(np.concatenate([c.run_lengths for c in self.configs if c.w == w]),
                                 return_counts=True)
        return dict(zip(vals.tolist(), counts.tolist()))

    def origin_lengths(self, w: int | None = None) -> np.ndarray:
        return np.array([c.origin_length for c in self.configs if w is None or c.w == w])


def _wrap_centered(x: np.ndarray, R: float) -> np.ndarray:
    return (x + R / 2) % R - R / 2


def final_config(w: int, seed: int, R: int, opinions=None, max_events_per_node: int = 1000) -> FinalConfig:
    """Run a 1D, M = 2 torus to stabilization and summarize the final runs."""
    geometry = Geometry.torus(1, R, w)
    mask = build_neighborhood_mask(1, w)
    if opinions is None:
        grid = init_configuration(geometry, 2, mask, seed)
    else:
        grid = grid_from_opinions(opinions, 2, geometry, mask, seed=seed)
    log = run_dynamics(grid, math.inf, seed, max_events=max_events_per_node * geometry.n_nodes,
                       record_events=False)
    clusters = extract_clusters(grid)
    n = geometry.n_nodes
    starts = np.asarray(clusters.starts)
    if clusters.n_clusters > 1:
        boundaries = _wrap_centered((starts - 0.5) / w, R)
    else:
        boundaries = np.empty(0)
    origin = int(clusters.labels[0])
    origin_len = clusters.sizes[origin] / w
    return FinalConfig(
        w=w, seed=seed, opinions=grid.opinions.copy(), run_lengths=np.asarray(clusters.sizes),
        run_opinions=np.asarray(clusters.opinions), boundaries=np.sort(boundaries),
        origin_length=float(origin_len if clusters.n_clusters > 1 else n / w),
        stable=is_stable_configuration(grid), stabilized_at=log.stabilized_at, n_events=log.n_events,
    )


def hausdorff_distance(a: np.ndarray, b: np.ndarray, window: float = HAUSDORFF_WINDOW) -> float:
    """Hausdorff distance between two point sets restricted to [-window, window]."""
    a = np.asarray(a)[np.abs(a) <= window]
    b = np.asarray(b)[np.abs(b) <= window]
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return math.inf
    d = np.abs(a[:, None] - b[None, :])
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def final_config_analysis(ws, seeds, R: int = 15, coupled: bool = False,
                          max_events_per_node: int = 1000) -> FinalConfigStats:
    """Final 1D, M = 2 configurations for every (w, seed).

    With ``coupled`` the initial data at different w come from one fine
    configuration (see ``nested_initial_opinions``) and Hausdorff distances
    between rescaled boundary sets at consecutive w are reported.
    """
    ws = sorted(ws)
    out = FinalConfigStats(R, [])
    for seed in seeds:
        inits = nested_initial_opinions(seed, ws, R) if coupled else {}
        by_w = {}
        for w in ws:
            cfg = final_config(w, seed, R, inits.get(w), max_events_per_node)
            if cfg.stabilized_at is None:
                out.excluded.append((w, seed))
                continue
            out.configs.append(cfg)
            by_w[w] = cfg
        if coupled:
            for wa, wb in zip(ws, ws[1:]):
                if wa in by_w and wb in by_w:
                    out.hausdorff.append((seed, wa, wb, hausdorff_distance(by_w[wa].boundaries,
                                                                           by_w[wb].boundaries)))
    return out


@dataclass
class DecayFit:
    slope: float
    slope_upper95: float
    intercept: float
    thresholds: np.ndarray
    log_survival: np.ndarray

    @property
    def decays(self) -> bool:
        return self.slope_upper95 < 0


def survival_decay_fit(lengths, min_tail: int = 3) -> DecayFit:
    """Least-squares fit of log P[L > l] against l at the sample values of l."""
    L = np.sort(np.asarray(lengths, dtype=float))
    n = len(L)
    thresholds = np.unique(L)[:-1]
    surv = np.array([(L > x).sum() / n for x in thresholds])
    keep = surv * n >= min_tail
    x, y = thresholds[keep], np.log(surv[keep])
    if len(x) < 3:
        raise ValueError("too few distinct lengths to fit a decay rate")
    fit = stats.linregress(x, y)
    q = stats.t.ppf(0.975, len(x) - 2)
    return DecayFit(fit.slope, fit.slope + q * fit.stderr, fit.intercept, x, y)


def final_configs_csv(s: FinalConfigStats) -> str:
    buf = io.StringIO()
    buf.write("w,seed,run,opinion,length\n")
    for c in s.configs:
        for j, (m, L) in enumerate(zip(c.run_opinions, c.run_lengths)):
            buf.write(f"{c.w},{c.seed},{j},{int(m)},{int(L)}\n")
    return buf.getvalue()


def run_length_table(cfg: FinalConfig) -> str:
    """One-line rendering of a final configuration as opinion x length runs."""
    return " ".join(f"{int(m)}x{int(L)}" for m, L in zip(cfg.run_opinions, cfg.run_lengths))
