"""Grid solvers for the continuum Schelling equations on the torus.

Three right-hand sides are available:

* ``single_site``: dY_m/dt(x) = int_{N(x)} (1 - 1/M) 1{p(Y)=m} - (1/M) 1{p(Y)!=m}
* ``sign`` (M = 2): dYhat/dt(x) = int_{N(x)} sign(Yhat)
* ``pair_swap``: the conserved variant with rates weighted by the global
  plurality volumes Lambda_m.

Neighborhood integrals of the plurality indicators use one of two rules.
``cell`` treats the plurality as constant on each cell and sums the
integer indicator fields exactly (prefix sums for p = inf, rounded FFT
otherwise).  ``segment`` (1D only, the default there) interpolates the
channels linearly between grid points and integrates the resulting
piecewise-constant plurality exactly; it places zero crossings to second
order, which the cell rule cannot, and that matters when the field decays
towards zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gaussian_field import InitialField, hat_field
from .stencil import ContinuumMask, GridSpec, continuum_mask, neighborhood_sum

FORMS = ("single_site", "sign", "pair_swap")


class PicardDivergence(RuntimeError):
    """Picard iterates failed to contract on a window."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def plurality(Y) -> np.ndarray | int:
    """Strict argmax (1-based) along the first axis, 0 where the maximum is shared."""
    Y = np.asarray(Y, dtype=float)
    top = Y.max(axis=0)
    ties = (Y == top).sum(axis=0) > 1
    out = np.where(ties, 0, Y.argmax(axis=0) + 1)
    return int(out) if out.ndim == 0 else out


def sign_plurality(Yhat: np.ndarray) -> np.ndarray:
    return np.where(Yhat > 0, 1, np.where(Yhat < 0, 2, 0))


def _check_mask(values: np.ndarray, mask: ContinuumMask):
    if values.shape[1:] != mask.spec.shape:
        raise ValueError("field does not match the mask grid")


def _resolve_quadrature(quadrature: str, spec: GridSpec) -> str:
    if quadrature == "auto":
        return "segment" if spec.N == 1 else "cell"
    if quadrature not in ("cell", "segment"):
        raise ValueError(f"unknown quadrature {quadrature!r}")
    if quadrature == "segment" and spec.N != 1:
        raise ValueError("segment quadrature is one-dimensional")
    return quadrature


def segment_fractions(Y: np.ndarray) -> np.ndarray:
    """Fraction of each grid segment [x_j, x_{j+1}] in each plurality class.

    The channels are interpolated linearly along the segment; the result has
    shape (M+1, n) with class 0 the tie set.  One-dimensional, periodic.
    """
    M, n = Y.shape
    if M == 2:
        return _segment_fractions_two(Y[0] - Y[1])
    Y1 = np.roll(Y, -1, axis=1)
    bps = [np.zeros(n), np.ones(n)]
    for a in range(M):
        for b in range(a + 1, M):
            d0 = Y[a] - Y[b]
            d1 = Y1[a] - Y1[b]
            cross = d0 * d1 < 0
            theta = np.ones(n)
            theta[cross] = d0[cross] / (d0[cross] - d1[cross])
            bps.append(theta)
    bp = np.sort(np.stack(bps, axis=1), axis=1)
    lengths = np.diff(bp, axis=1)
    mid = 0.5 * (bp[:, 1:] + bp[:, :-1])
    vals = Y[:, :, None] * (1 - mid)[None] + Y1[:, :, None] * mid[None]
    cls = plurality(vals)
    out = np.zeros((M + 1, n))
    for m in range(M + 1):
        out[m] = (lengths * (cls == m)).sum(axis=1)
    return out


def _segment_fractions_two(d: np.ndarray) -> np.ndarray:
    d0, d1 = d, np.roll(d, -1)
    s0, s1 = np.sign(d0), np.sign(d1)
    cross = s0 * s1 < 0
    theta = np.where(cross, d0 / np.where(cross, d0 - d1, 1.0), 0.0)
    # fraction of the segment carrying the left end point's sign when it crosses
    pos = np.where(cross, np.where(s0 > 0, theta, 1 - theta), 0.0)
    same = ~cross
    pos = np.where(same & ((s0 > 0) | ((s0 == 0) & (s1 > 0))), 1.0, pos)
    neg = np.where(cross, 1 - pos, 0.0)
    neg = np.where(same & ((s0 < 0) | ((s0 == 0) & (s1 < 0))), 1.0, neg)
    tie = 1.0 - pos - neg
    return np.stack([tie, pos, neg])


def _segment_signed(d: np.ndarray) -> np.ndarray:
    """Integral of sign(d) over each segment, in units of the segment length."""
    d1 = np.roll(d, -1)
    s0, s1 = np.sign(d), np.sign(d1)
    cross = s0 * s1 < 0
    theta = d / np.where(cross, d - d1, 1.0)
    return np.where(cross, s0 * (2 * theta - 1), np.where(s0 != 0, s0, s1))


def _segment_window_sum(a: np.ndarray, n_unit: int) -> np.ndarray:
    """sum_{j=i-n}^{i+n-1} a_j, periodic, along the last axis."""
    L = a.shape[-1]
    ext = np.concatenate([a[..., L - n_unit:], a, a[..., :n_unit]], axis=-1)
    C = np.concatenate([np.zeros(a.shape[:-1] + (1,)), np.cumsum(ext, axis=-1)], axis=-1)
    idx = np.arange(L)
    return C[..., idx + 2 * n_unit] - C[..., idx]


def plurality_integrals(Y: np.ndarray, mask: ContinuumMask, quadrature: str = "auto"):
    """Neighborhood measure of each plurality class and the global class volumes.

    Returns ``(c, lam, window)`` where ``c[m](x)`` is the measure of
    {x' in N(x): p(Y(x')) = m} for m = 0..M, ``lam[m]`` the measure of
    {p = m} on the torus, and ``window`` the measure of N(x) itself.
    """
    _check_mask(Y, mask)
    spec = mask.spec
    M = Y.shape[0]
    quad = _resolve_quadrature(quadrature, spec)
    if quad == "segment":
        frac = segment_fractions(Y)
        c = spec.h * _segment_window_sum(frac, spec.cells_per_unit)
        lam = spec.h * frac.sum(axis=1)
        return c, lam, 2.0
    P = plurality(Y)
    hv = spec.cell_volume
    c = np.empty((M + 1,) + spec.shape)
    for m in range(M + 1):
        c[m] = hv * neighborhood_sum((P == m).astype(np.int64), mask)
    lam = np.array([(P == m).sum() for m in range(M + 1)]) * hv
    return c, lam, mask.total_weight


def rhs_single_site(Y: np.ndarray, mask: ContinuumMask, quadrature: str = "auto") -> np.ndarray:
    """Right-hand side of the single-site equation for all channels, shape (M, ...)."""
    M = Y.shape[0]
    c, _, window = plurality_integrals(Y, mask, quadrature)
    return c[1:] - window / M


def rhs_sign_form(Yhat: np.ndarray, mask: ContinuumMask, quadrature: str = "auto") -> np.ndarray:
    """int over N(x) of sign(Yhat); ``Yhat`` has the grid shape."""
    if Yhat.shape != mask.spec.shape:
        raise ValueError("field does not match the mask grid")
    if _resolve_quadrature(quadrature, mask.spec) == "segment":
        spec = mask.spec
        return spec.h * _segment_window_sum(_segment_signed(Yhat), spec.cells_per_unit)
    return mask.spec.cell_volume * neighborhood_sum(np.sign(Yhat).astype(np.int64), mask)


def plurality_volumes(Y: np.ndarray, mask: ContinuumMask, quadrature: str = "auto") -> np.ndarray:
    """Lambda_m = measure of {p(Y) = m}, m = 1..M."""
    return plurality_integrals(Y, mask, quadrature)[1][1:]


def rhs_pair_swap(Y: np.ndarray, mask: ContinuumMask, quadrature: str = "auto") -> np.ndarray:
    c, lam, window = plurality_integrals(Y, mask, quadrature)
    V = mask.spec.volume
    lam = lam[1:, None] if Y.ndim == 2 else lam[1:].reshape((-1,) + (1,) * (Y.ndim - 1))
    return (V - lam) * c[1:] - lam * (window - c[1:])


@dataclass(eq=False)
class ContinuumField:
    """State ``Y = B + y`` of one of the continuum equations.

    For the ``sign`` form the arrays hold one channel (Yhat); otherwise M.
    """

    spec: GridSpec
    M: int
    B: np.ndarray
    y: np.ndarray
    form: str = "single_site"
    p: float = math.inf
    t: float = 0.0
    dt: float | None = None
    quadrature: str = "auto"

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"unknown form {self.form!r}")
        if self.form == "sign" and self.M != 2:
            raise ValueError("the sign form needs M = 2")
        if self.B.shape != self.y.shape:
            raise ValueError("B and y shapes differ")
        if self.dt is None:
            self.dt = self.spec.h / 4
        self.quadrature = _resolve_quadrature(self.quadrature, self.spec)

    @property
    def Y(self) -> np.ndarray:
        return self.B + self.y

    @property
    def mask(self) -> ContinuumMask:
        return continuum_mask(self.spec, self.p)

    @property
    def lipschitz_budget(self) -> float:
        scale = 2.0 if self.form == "sign" else 1.0
        return scale * 2 ** (self.spec.N - 1) * self.t

    def plurality(self) -> np.ndarray:
        if self.form == "sign":
            return sign_plurality(self.Y[0])
        return plurality(self.Y)

    def rhs(self, y: np.ndarray | None = None) -> np.ndarray:
        Y = self.B + (self.y if y is None else y)
        if self.form == "sign":
            return rhs_sign_form(Y[0], self.mask, self.quadrature)[None]
        if self.form == "pair_swap":
            return rhs_pair_swap(Y, self.mask, self.quadrature)
        return rhs_single_site(Y, self.mask, self.quadrature)

    def copy(self) -> "ContinuumField":
        return ContinuumField(self.spec, self.M, self.B.copy(), self.y.copy(), self.form, self.p, self.t,
                              self.dt, self.quadrature)


def field_from_initial(initial: InitialField, form: str = "single_site", dt: float | None = None,
                       quadrature: str = "auto") -> ContinuumField:
    if form == "sign":
        B = hat_field(initial)[None]
    else:
        B = initial.values.copy()
    return ContinuumField(initial.spec, initial.M, B, np.zeros_like(B), form, initial.p, 0.0, dt, quadrature)


def field_from_values(spec: GridSpec, values, form: str = "single_site", M: int | None = None,
                      p: float = math.inf, dt: float | None = None, quadrature: str = "auto") -> ContinuumField:
    B = np.asarray(values, dtype=float)
    if B.shape == spec.shape:
        B = B[None]
    if M is None:
        M = 2 if form == "sign" else B.shape[0]
    return ContinuumField(spec, M, B.copy(), np.zeros_like(B), form, p, 0.0, dt, quadrature)


@dataclass
class DominationStat:
    """Per-cell time spent in each plurality class (index 0 is the tie set)."""

    occupation: np.ndarray  # (M+1, *shape)
    t: float = 0.0

    def r(self, m: int, cells=None) -> float:
        """Space-time fraction of J x [0, t] with plurality m; J given as a cell index or mask."""
        if self.t == 0:
            return float("nan")
        occ = self.occupation[m]
        sel = occ if cells is None else occ[cells]
        return float(np.mean(sel) / self.t)

    def r_all(self, cells=None) -> np.ndarray:
        return np.array([self.r(m, cells) for m in range(self.occupation.shape[0])])


@dataclass
class Trajectory:
    times: list
    snapshots: list
    stat: DominationStat
    final: ContinuumField
    tie_measure: np.ndarray
    step_times: np.ndarray
    last_change: np.ndarray
    occupation_snapshots: list
    frozen_violations: int = 0
    max_sup_y_excess: float = 0.0
    max_lipschitz_ratio: float = 0.0
    picard: list = field(default_factory=list)
    scheme: str = "euler"


def _discrete_lipschitz(y: np.ndarray, h: float) -> float:
    lip = 0.0
    for ax in range(1, y.ndim):
        lip = max(lip, float(np.abs(np.roll(y, -1, axis=ax) - y).max()) / h)
    return lip


def _locked_cells_1d(P: np.ndarray, L: int) -> np.ndarray:
    """Cells inside a periodic run of >= L equal nonzero pluralities."""
    n = len(P)
    if (P == P[0]).all():
        return np.full(n, P[0] != 0)
    if L > n:
        return np.zeros(n, dtype=bool)
    if L == 1:
        return P != 0
    same = ((P == np.roll(P, -1)) & (P != 0)).astype(np.int64)
    ext = np.concatenate([same, same[:L]])
    c = np.concatenate([[0], np.cumsum(ext)])
    idx = np.arange(n)
    start_ok = (c[idx + L - 1] - c[idx]) == L - 1
    return _dilate(start_ok, L)


def _dilate(start_ok: np.ndarray, L: int) -> np.ndarray:
    n = len(start_ok)
    s = start_ok.astype(np.int64)
    ext = np.concatenate([s[n - L + 1:], s]) if L > 1 else s
    c = np.concatenate([[0], np.cumsum(ext)])
    idx = np.arange(n)
    # window of starts s in [i-L+1, i] -> ext indices [i, i+L-1]
    return (c[idx + L] - c[idx]) > 0


def evolve(
    field_: ContinuumField,
    T: float,
    scheme: str = "euler",
    snapshot_times=(),
    track_frozen: bool = False,
    picard_window: float | None = None,
    picard_tol: float = 1e-10,
    picard_max_iter: int = 50,
    raise_on_divergence: bool = False,
    audit: bool = True,
    skip_constant: bool = True,
) -> Trajectory:
    """Advance ``field_`` (in place) to time ``T``.

    ``euler``: y <- y + dt * phi(B + y).  ``picard``: on windows of length
    ``picard_window`` iterate y_{n+1}(t) = y(t0) + int_{t0}^t phi(y_n(s)) ds
    with trapezoidal quadrature at step dt until successive iterates differ
    by less than ``picard_tol`` in sup norm.

    With ``skip_constant`` and cell quadrature the Euler loop takes several
    steps at once while no pairwise channel ordering can change: the
    right-hand side is then constant and the jump equals the step-by-step
    result up to rounding.  (Segment quadrature depends on where crossings
    sit inside a segment, so it never qualifies.)
    """
    if scheme not in ("euler", "picard"):
        raise ValueError(f"unknown scheme {scheme!r}")
    dt = field_.dt
    if not dt > 0:
        raise ValueError("dt must be positive")
    n_steps = int(round((T - field_.t) / dt))
    if n_steps < 0 or abs(field_.t + n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("T - t must be a multiple of dt")
    spec = field_.spec
    M = field_.M
    snaps = sorted(float(s) for s in snapshot_times)
    times, snapshots, occ_snaps = [], [], []
    occ = np.zeros((M + 1,) + spec.shape)
    stat = DominationStat(occ, 0.0)
    tie = np.empty(n_steps + 1)
    step_times = field_.t + dt * np.arange(n_steps + 1)
    P = field_.plurality()
    last_change = np.zeros(spec.shape)
    tie[0] = (P == 0).sum() * spec.cell_volume
    # a run of L equal grid pluralities spans a unit interval of constant sign
    n_unit = spec.cells_per_unit + (1 if field_.quadrature == "segment" else 0)
    locked = None
    locked_op = None
    violations = 0
    if track_frozen:
        if spec.N != 1:
            raise ValueError("frozen-interval tracking is 1D only")
        locked = _locked_cells_1d(P, n_unit)
        locked_op = np.where(locked, P, 0)
    worst_excess = 0.0
    worst_lip = 0.0
    picard_log = []
    t0 = field_.t

    def record(k):
        while snaps and snaps[0] <= step_times[k] + 1e-12:
            s = snaps.pop(0)
            times.append(s)
            snapshots.append(field_.Y.copy())
            occ_snaps.append((s, stat.occupation.copy(), stat.t))

    record(0)

    def advance(k, y_new, steps=1):
        nonlocal P, violations, worst_excess, worst_lip, locked, locked_op
        # plurality class of [t_k, t_{k+1}) is the one at the left end point
        for m in range(M + 1):
            occ[m] += steps * dt * (P == m)
        stat.t += steps * dt
        field_.y = y_new
        field_.t = t0 + (k + steps) * dt
        Pn = field_.plurality()
        changed = Pn != P
        last_change[changed] = field_.t
        P = Pn
        tie[k + 1:k + steps + 1] = (P == 0).sum() * spec.cell_volume
        if track_frozen and changed.any():
            violations += int((locked & (P != locked_op)).sum())
            new_locked = _locked_cells_1d(P, n_unit) & ~locked
            locked |= new_locked
            locked_op = np.where(new_locked, P, locked_op)
        if audit:
            worst_excess = max(worst_excess, float(np.abs(field_.y).max()) - _speed(field_) * field_.t)
            if field_.t > 0:
                lip_bound = field_.lipschitz_budget * (1 + 10 * dt)
                worst_lip = max(worst_lip, _discrete_lipschitz(field_.y, spec.h) / lip_bound)
        record(k + steps)

    if scheme == "euler":
        k = 0
        while k < n_steps:
            r = field_.rhs()
            steps = 1
            if skip_constant and field_.quadrature == "cell":
                limit = n_steps - k
                if snaps:
                    limit = min(limit, max(1, math.ceil((snaps[0] - step_times[k]) / dt - 1e-9)))
                steps = max(1, min(limit, _safe_steps(field_.Y, r, dt)))
            advance(k, field_.y + (steps * dt) * r if steps > 1 else field_.y + dt * r, steps)
            k += steps
    else:
        window = picard_window or 8 * dt
        K = max(1, int(round(window / dt)))
        k = 0
        while k < n_steps:
            steps = min(K, n_steps - k)
            y0 = field_.y.copy()
            path = np.repeat(y0[None], steps + 1, axis=0)
            converged = False
            diffs = []
            for it in range(picard_max_iter):
                f = np.array([field_.rhs(path[j]) for j in range(steps + 1)])
                incr = 0.5 * dt * (f[:-1] + f[1:])
                new = np.concatenate([y0[None], y0[None] + np.cumsum(incr, axis=0)])
                diff = float(np.abs(new - path).max())
                diffs.append(diff)
                path = new
                if diff < picard_tol:
                    converged = True
                    break
            entry = {"t0": field_.t, "steps": steps, "iterations": len(diffs), "converged": converged,
                     "last_diff": diffs[-1]}
            picard_log.append(entry)
            if not converged and raise_on_divergence:
                raise PicardDivergence(
                    f"Picard iterates did not contract on window starting at t={field_.t:.6g}", entry)
            for j in range(steps):
                advance(k + j, path[j + 1])
            k += steps
    return Trajectory(
        times=times, snapshots=snapshots, stat=stat, final=field_, tie_measure=tie,
        step_times=step_times, last_change=last_change, occupation_snapshots=occ_snaps,
        frozen_violations=violations, max_sup_y_excess=worst_excess,
        max_lipschitz_ratio=worst_lip, picard=picard_log, scheme=scheme,
    )


def _safe_steps(Y: np.ndarray, r: np.ndarray, dt: float) -> int:
    """Steps of size dt along r before any pairwise channel ordering could change."""
    if Y.shape[0] == 1:
        pairs = [(Y[0], r[0])]
    else:
        pairs = [(Y[a] - Y[b], r[a] - r[b]) for a in range(Y.shape[0]) for b in range(a + 1, Y.shape[0])]
    best = math.inf
    for d, rate in pairs:
        if np.any((d == 0) & (rate != 0)):
            return 1
        closing = d * rate < 0
        if closing.any():
            best = min(best, float(np.min(np.abs(d[closing]) / (dt * np.abs(rate[closing])))))
    if math.isinf(best):
        return 2**62
    # one step of slack guards against rounding at the crossing
    return max(1, int(best) - 1)


def _speed(f: ContinuumField) -> float:
    """Upper bound on |dy/dt| for the field's equation."""
    lam = continuum_mask(f.spec, f.p).total_weight
    if f.form == "sign":
        return lam
    if f.form == "pair_swap":
        return f.spec.volume * lam
    return lam


@dataclass
class LimitClassification:
    status: str
    changed_fraction: float
    starts: np.ndarray
    lengths: np.ndarray
    opinions: np.ndarray
    boundaries: np.ndarray
    r_final: np.ndarray
    r_curves: list

    @property
    def frozen(self) -> bool:
        return self.status == "frozen"


def classify_limit(traj: Trajectory, threshold: float = 0.01) -> LimitClassification:
    """Interval decomposition of the final sign pattern (1D, M = 2).

    A cell counts as changed when its plurality moved during the trailing
    half of the run; more than ``threshold`` changed cells means the pattern
    is reported as not yet frozen.
    """
    f = traj.final
    if f.spec.N != 1 or f.M != 2:
        raise ValueError("limit classification needs N = 1 and M = 2")
    T = traj.step_times[-1]
    t_half = traj.step_times[0] + 0.5 * (T - traj.step_times[0])
    changed = traj.last_change > t_half
    frac = float(changed.mean())
    status = "frozen" if frac <= threshold else "not_yet_frozen"
    P = f.plurality()
    n = len(P)
    h = f.spec.h
    if (P == P[0]).all():
        starts, lengths = np.array([0]), np.array([n])
    else:
        brk = np.flatnonzero(P != np.roll(P, 1))
        starts = brk
        lengths = np.diff(np.concatenate([brk, [brk[0] + n]]))
    ops = P[starts]
    # boundary point between cell s-1 and cell s sits at the shared cell edge
    boundaries = (starts * h - h / 2) % f.spec.R if len(starts) > 1 else np.array([])
    r_final = []
    cells_list = []
    for s, L in zip(starts, lengths):
        cells = (s + np.arange(L)) % n
        cells_list.append(cells)
        r_final.append(traj.stat.r_all(cells))
    curves = []
    for t, occ, tt in traj.occupation_snapshots:
        if tt == 0:
            continue
        curves.append((t, [occ[:, c].mean(axis=1) / tt for c in cells_list]))
    return LimitClassification(status, frac, starts, lengths * h, ops, boundaries, np.array(r_final), curves)


def sawtooth_initial(spec: GridSpec) -> np.ndarray:
    """Periodic sawtooth with period 4/3 and slopes +-3 (requires 3R/4 integer)."""
    if spec.N != 1:
        raise ValueError("sawtooth data is one-dimensional")
    if abs(3 * spec.R / 4 - round(3 * spec.R / 4)) > 1e-12:
        raise ValueError("sawtooth data needs 3R/4 to be an integer")
    x = spec.coordinates()
    u = np.mod(x, 4 / 3)
    return np.where(u < 2 / 3, -1 + 3 * u, 1 - 3 * (u - 2 / 3))


def trajectory_csv(traj: Trajectory) -> str:
    """Long-format snapshot table: time, cell, channel, value."""
    lines = ["time,cell,channel,value"]
    for t, Y in zip(traj.times, traj.snapshots):
        flat = Y.reshape(Y.shape[0], -1)
        for c in range(flat.shape[0]):
            for i, v in enumerate(flat[c]):
                lines.append(f"{t!r},{i},{c + 1},{float(v)!r}")
    return "\n".join(lines) + "\n"


def domination_csv(traj: Trajectory, classification: LimitClassification | None = None) -> str:
    """r(m, J, t) per snapshot time; J is the whole torus unless a classification is given."""
    lines = ["time,interval,m,r"]
    if classification is None:
        for t, occ, tt in traj.occupation_snapshots:
            if tt == 0:
                continue
            for m in range(occ.shape[0]):
                lines.append(f"{t!r},all,{m},{float(occ[m].mean() / tt)!r}")
    else:
        for t, rs in classification.r_curves:
            for j, r in enumerate(rs):
                for m, v in enumerate(r):
                    lines.append(f"{t!r},{j},{m},{float(v)!r}")
    return "\n".join(lines) + "\n"
