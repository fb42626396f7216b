"""Event-driven discrete Schelling dynamics on tori and finite windows of Z^N.

Opinions are stored as a flat row-major ``int16`` array with values in
``1..M``.  Bias counts are kept incrementally: ``counts[i, m-1]`` is the number
of nodes of opinion ``m`` in the neighborhood of ``i`` (the node itself
included).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .rng import RNG_ALGORITHM, stream

_EVENT_BLOCK = 4096


@dataclass(frozen=True)
class Geometry:
    dimension: int
    kind: str
    side_nodes: int
    boundary_policy: str = "frozen_initial"

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.kind not in ("torus", "z_window"):
            raise ValueError(f"unknown geometry kind {self.kind!r}")
        if self.side_nodes < 1:
            raise ValueError("side_nodes must be >= 1")
        if self.boundary_policy != "frozen_initial":
            raise ValueError("only the frozen_initial boundary policy is supported")

    @classmethod
    def torus(cls, dimension: int, R: int, w: int) -> "Geometry":
        """Torus (Z / RwZ)^N."""
        if R < 3:
            raise ValueError("torus width R must be >= 3")
        return cls(dimension, "torus", R * w)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side_nodes,) * self.dimension

    @property
    def n_nodes(self) -> int:
        return self.side_nodes**self.dimension


@dataclass(frozen=True, eq=False)
class NeighborhoodMask:
    offsets: np.ndarray
    w: int
    p: float
    closure: str

    @property
    def size(self) -> int:
        return len(self.offsets)

    @property
    def dimension(self) -> int:
        return self.offsets.shape[1]


def _lp_inside(vectors: np.ndarray, w: int, p: float, closure: str) -> np.ndarray:
    a = np.abs(vectors)
    if math.isinf(p):
        norm = a.max(axis=1)
        return norm <= w if closure == "closed" else norm < w
    if float(p).is_integer():
        # exact integer arithmetic
        lhs = (a.astype(object) ** int(p)).sum(axis=1)
        rhs = w ** int(p)
        return np.array([x <= rhs if closure == "closed" else x < rhs for x in lhs], dtype=bool)
    lhs = (a.astype(float) ** p).sum(axis=1)
    rhs = float(w) ** p
    tol = 1e-12 * rhs
    return lhs <= rhs + tol if closure == "closed" else lhs < rhs - tol


def build_neighborhood_mask(N: int, w: int, p: float = math.inf, closure: str = "closed") -> NeighborhoodMask:
    """Offsets j in Z^N with ||j||_p <= w (closed) or < w (open)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if w < 1:
        raise ValueError("window size w must be >= 1")
    if not (p >= 1):
        raise ValueError("p must lie in [1, inf]")
    if closure not in ("open", "closed"):
        raise ValueError(f"unknown closure {closure!r}")
    axis = np.arange(-w, w + 1)
    grid = np.stack(np.meshgrid(*([axis] * N), indexing="ij"), axis=-1).reshape(-1, N)
    offsets = grid[_lp_inside(grid, w, p, closure)].astype(np.int64)
    return NeighborhoodMask(offsets=offsets, w=w, p=float(p), closure=closure)


@dataclass(eq=False)
class OpinionGrid:
    geometry: Geometry
    M: int
    mask: NeighborhoodMask
    opinions: np.ndarray
    counts: np.ndarray
    frozen: np.ndarray
    satisfied: np.ndarray
    unsatisfied_count: int
    seed: int | None = None

    @property
    def n_nodes(self) -> int:
        return self.geometry.n_nodes

    def copy(self) -> "OpinionGrid":
        return OpinionGrid(
            self.geometry, self.M, self.mask, self.opinions.copy(), self.counts.copy(),
            self.frozen.copy(), self.satisfied.copy(), self.unsatisfied_count, self.seed,
        )

    def coords(self, i: int) -> np.ndarray:
        return np.array(np.unravel_index(i, self.geometry.shape))

    def neighbors(self, i: int) -> np.ndarray:
        """Flat indices of the neighborhood of node ``i`` (in-window only)."""
        return _neighbors(self.geometry, self.mask, i)


def _neighbors(geometry: Geometry, mask: NeighborhoodMask, i: int) -> np.ndarray:
    side = geometry.side_nodes
    c = np.array(np.unravel_index(i, geometry.shape))
    pts = c + mask.offsets
    if geometry.kind == "torus":
        pts %= side
    else:
        pts = pts[((pts >= 0) & (pts < side)).all(axis=1)]
    return np.ravel_multi_index(pts.T, geometry.shape)


def _check_geometry(geometry: Geometry, mask: NeighborhoodMask):
    if mask.dimension != geometry.dimension:
        raise ValueError("mask and geometry dimensions differ")
    if geometry.kind == "torus" and geometry.side_nodes < 3 * mask.w:
        raise ValueError("torus side must be at least 3*w nodes")


def neighborhood_counts(opinions: np.ndarray, M: int, geometry: Geometry, mask: NeighborhoodMask) -> np.ndarray:
    """Bias counts for every node, shape (n_nodes, M)."""
    X = opinions.reshape(geometry.shape)
    onehot = np.stack([(X == m).astype(np.int32) for m in range(1, M + 1)])
    out = np.zeros_like(onehot)
    axes = tuple(range(1, geometry.dimension + 1))
    if geometry.kind == "torus":
        for off in mask.offsets:
            out += np.roll(onehot, tuple(-off), axis=axes)
    else:
        w = mask.w
        pad = [(0, 0)] + [(w, w)] * geometry.dimension
        padded = np.pad(onehot, pad)
        side = geometry.side_nodes
        for off in mask.offsets:
            sl = (slice(None),) + tuple(slice(w + o, w + o + side) for o in off)
            out += padded[sl]
    return out.reshape(M, -1).T.copy()


def _frozen_layer(geometry: Geometry, w: int) -> np.ndarray:
    if geometry.kind == "torus":
        return np.zeros(geometry.n_nodes, dtype=bool)
    idx = np.indices(geometry.shape).reshape(geometry.dimension, -1)
    side = geometry.side_nodes
    return ((idx < w) | (idx >= side - w)).any(axis=0)


def _satisfied(counts: np.ndarray, opinions: np.ndarray) -> np.ndarray:
    own = np.take_along_axis(counts, (opinions.astype(np.int64) - 1)[:, None], axis=1)[:, 0]
    return own >= counts.max(axis=1)


def grid_from_opinions(opinions, M: int, geometry: Geometry, mask: NeighborhoodMask, seed=None) -> OpinionGrid:
    """Build a consistent ``OpinionGrid`` around a given opinion array."""
    _check_geometry(geometry, mask)
    if M < 2:
        raise ValueError("M must be >= 2")
    ops = np.asarray(opinions, dtype=np.int16).reshape(-1).copy()
    if ops.size != geometry.n_nodes:
        raise ValueError("opinion array does not match geometry")
    if ops.min() < 1 or ops.max() > M:
        raise ValueError("opinions must lie in 1..M")
    counts = neighborhood_counts(ops, M, geometry, mask)
    frozen = _frozen_layer(geometry, mask.w)
    sat = _satisfied(counts, ops)
    return OpinionGrid(geometry, M, mask, ops, counts, frozen, sat, int((~sat & ~frozen).sum()), seed)


def init_configuration(geometry: Geometry, M: int, mask: NeighborhoodMask, seed: int) -> OpinionGrid:
    """I.i.d. uniform opinions from the ``init`` stream of ``seed``."""
    if M < 2:
        raise ValueError("M must be >= 2")
    rng = stream(seed, "init")
    ops = rng.integers(1, M + 1, size=geometry.n_nodes)
    return grid_from_opinions(ops, M, geometry, mask, seed=seed)


def plurality_choice(counts, current: int, rng: np.random.Generator | None) -> int:
    """Opinion adopted by a node with bias ``counts`` and opinion ``current``."""
    counts = np.asarray(counts)
    top = counts.max()
    if counts[current - 1] == top:
        return current
    winners = np.flatnonzero(counts == top)
    if len(winners) == 1:
        return int(winners[0]) + 1
    return int(winners[rng.integers(len(winners))]) + 1


def update_opinion(grid: OpinionGrid, i: int, rng: np.random.Generator | None = None) -> int:
    """New opinion of node ``i`` if its clock rang now; the grid is not mutated."""
    return plurality_choice(grid.counts[i], int(grid.opinions[i]), rng)


def apply_flip(grid: OpinionGrid, i: int, new: int) -> np.ndarray:
    """Set node ``i`` to ``new`` and update counts of every node that sees ``i``."""
    old = int(grid.opinions[i])
    if old == new:
        return np.empty(0, dtype=np.int64)
    grid.opinions[i] = new
    aff = _neighbors(grid.geometry, grid.mask, i)
    grid.counts[aff, old - 1] -= 1
    grid.counts[aff, new - 1] += 1
    before = grid.satisfied[aff] | grid.frozen[aff]
    sat = _satisfied(grid.counts[aff], grid.opinions[aff])
    grid.satisfied[aff] = sat
    after = sat | grid.frozen[aff]
    grid.unsatisfied_count += int(before.sum()) - int(after.sum())
    return aff


def is_stable_configuration(grid: OpinionGrid) -> bool:
    """Every updatable node agrees with its neighborhood plurality."""
    sat = _satisfied(grid.counts, grid.opinions)
    return bool((sat | grid.frozen).all())


@dataclass
class EventLog:
    times: np.ndarray
    nodes: np.ndarray
    old: np.ndarray
    new: np.ndarray
    horizon: float
    stabilized_at: float | None
    outcome: str
    seed: int
    rng_algorithm: str = RNG_ALGORITHM
    snapshots: dict = field(default_factory=dict)
    total_events: int | None = None  # set when events were counted but not recorded

    @property
    def was_flip(self) -> np.ndarray:
        return self.old != self.new

    @property
    def n_events(self) -> int:
        return len(self.times) if self.total_events is None else self.total_events

    @property
    def n_flips(self) -> int:
        return int(self.was_flip.sum())


def run_dynamics(
    grid: OpinionGrid,
    horizon: float,
    seed: int,
    stop_when_stable: bool = True,
    max_events: int | None = None,
    snapshot_times=(),
    record_events: bool = True,
) -> EventLog:
    """Simulate the continuous-time chain in place on ``grid``.

    Events come from the superposition of unit-rate clocks: exponential
    inter-event times of rate ``n_nodes`` and a uniform node per event.  The
    run ends at ``horizon`` (time), after ``max_events`` events, or at
    stabilization when ``stop_when_stable``.  ``outcome`` is ``"stabilized"``
    or ``"horizon_exceeded"``; the latter is not an error.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    n = grid.n_nodes
    clock = stream(seed, "clock")
    ties = stream(seed, "tiebreak")
    snaps = sorted(float(s) for s in snapshot_times)
    snapshots = {}
    times, nodes, olds, news = [], [], [], []
    t = 0.0
    stabilized_at = 0.0 if grid.unsatisfied_count == 0 else None
    n_events = 0
    done = stop_when_stable and stabilized_at is not None
    limit = math.inf if max_events is None else max_events
    while not done:
        gaps = clock.exponential(1.0 / n, size=_EVENT_BLOCK)
        picks = clock.integers(0, n, size=_EVENT_BLOCK)
        for gap, i in zip(gaps.tolist(), picks.tolist()):
            t_next = t + gap
            while snaps and snaps[0] < t_next:
                snapshots[snaps.pop(0)] = grid.opinions.copy()
            if t_next > horizon or n_events >= limit:
                done = True
                break
            t = t_next
            n_events += 1
            old = int(grid.opinions[i])
            new = old
            if not grid.frozen[i] and not grid.satisfied[i]:
                new = update_opinion(grid, i, ties)
                apply_flip(grid, i, new)
                if grid.unsatisfied_count == 0:
                    stabilized_at = t
                else:
                    stabilized_at = None
            if record_events:
                times.append(t)
                nodes.append(i)
                olds.append(old)
                news.append(new)
            if stop_when_stable and stabilized_at is not None:
                done = True
                break
    if stabilized_at is not None:
        # frozen from here on
        for s in snaps:
            if s <= horizon:
                snapshots[s] = grid.opinions.copy()
    outcome = "stabilized" if stabilized_at is not None else "horizon_exceeded"
    return EventLog(
        times=np.asarray(times, dtype=float),
        nodes=np.asarray(nodes, dtype=np.int64),
        old=np.asarray(olds, dtype=np.int16),
        new=np.asarray(news, dtype=np.int16),
        horizon=float(horizon),
        stabilized_at=stabilized_at,
        outcome=outcome,
        seed=seed,
        snapshots=snapshots,
        total_events=None if record_events else n_events,
    )


def edge_weights(grid: OpinionGrid, spread: float = 0.0, seed: int = 0) -> np.ndarray:
    """Symmetric positive edge weights, shape (n_nodes, mask.size).

    ``W[i, k]`` weighs the edge from ``i`` to ``i + offsets[k]``.  With
    ``spread = 0`` the weights are uniform; otherwise they lie in
    ``[1, 1 + spread)`` and must respect the ratio bound
    ``((2w+1)^N + 1) / ((2w+1)^N - 1)``.
    """
    n, K = grid.n_nodes, grid.mask.size
    if spread == 0:
        return np.ones((n, K))
    D = (2 * grid.mask.w + 1) ** grid.geometry.dimension
    if 1 + spread >= (D + 1) / (D - 1):
        raise ValueError("spread violates the edge-weight ratio bound")
    raw = 1 + spread * stream(seed, "generic").random((n, K))
    offs = grid.mask.offsets
    partner = np.array([np.flatnonzero((offs == -o).all(axis=1))[0] for o in offs])
    idx = np.indices(grid.geometry.shape).reshape(grid.geometry.dimension, -1).T
    W = np.empty_like(raw)
    for k, o in enumerate(offs):
        j = np.ravel_multi_index(((idx + o) % grid.geometry.side_nodes).T, grid.geometry.shape)
        # edge (i, i+o) seen from j=i+o is (j, j-o); average the two draws
        W[:, k] = 0.5 * (raw[:, k] + raw[j, partner[k]])
    return W


def disagreement_sum(grid: OpinionGrid, weights: np.ndarray | None = None) -> float:
    """Weighted count of disagreeing neighbor pairs, each undirected edge once."""
    if grid.geometry.kind != "torus":
        raise ValueError("disagreement sum is defined here for tori")
    X = grid.opinions.reshape(grid.geometry.shape)
    total = 0.0
    for k, o in enumerate(grid.mask.offsets):
        if not o.any():
            continue
        diff = (np.roll(X, tuple(-o), axis=tuple(range(X.ndim))) != X).reshape(-1)
        total += diff.sum() if weights is None else weights[diff, k].sum()
    return 0.5 * float(total)


def lyapunov_trace(initial: OpinionGrid, log: EventLog, weights: np.ndarray | None = None) -> np.ndarray:
    """Disagreement sum after every flip event, replayed from ``initial``."""
    g = initial.copy()
    offs = g.mask.offsets
    W = np.ones((g.n_nodes, len(offs))) if weights is None else weights.copy()
    W[:, ~offs.any(axis=1)] = 0.0
    L = disagreement_sum(g, W)
    trace = [L]
    for i, a, b in zip(log.nodes[log.was_flip], log.old[log.was_flip], log.new[log.was_flip]):
        nb = _neighbors(g.geometry, g.mask, int(i))
        xj = g.opinions[nb]
        L += float((W[i] * ((xj != b).astype(float) - (xj != a))).sum())
        g.opinions[i] = b
        trace.append(L)
    return np.asarray(trace)


@dataclass
class ClusterDecomposition:
    labels: np.ndarray
    opinions: np.ndarray
    sizes: np.ndarray
    diameters: np.ndarray
    starts: np.ndarray | None = None

    @property
    def n_clusters(self) -> int:
        return len(self.sizes)


def _runs_1d(x: np.ndarray, periodic: bool):
    n = len(x)
    change = np.flatnonzero(x[1:] != x[:-1]) + 1
    if len(change) == 0:
        return np.array([0]), np.array([n])
    if periodic:
        if x[0] == x[-1]:
            starts = change
        else:
            starts = np.concatenate(([0], change))
        lengths = np.diff(np.concatenate((starts, [starts[0] + n])))
        return starts, lengths
    starts = np.concatenate(([0], change))
    return starts, np.diff(np.concatenate((starts, [n])))


def _circular_extent(coords: np.ndarray, side: int) -> int:
    occ = np.zeros(side, dtype=bool)
    occ[np.unique(coords)] = True
    if occ.all():
        return side - 1
    # largest empty circular gap
    empty = ~occ
    starts, lengths = _runs_1d(empty.astype(np.int8), True)
    gap = max((L for s, L in zip(starts, lengths) if empty[s]), default=0)
    return side - gap - 1


def extract_clusters(grid: OpinionGrid) -> ClusterDecomposition:
    """Monochromatic runs (1D) or ||.||_1-connected components (N >= 2)."""
    geo = grid.geometry
    periodic = geo.kind == "torus"
    X = grid.opinions.reshape(geo.shape)
    if geo.dimension == 1:
        starts, lengths = _runs_1d(grid.opinions, periodic)
        labels = np.empty(geo.n_nodes, dtype=np.int64)
        for k, (s, L) in enumerate(zip(starts, lengths)):
            labels[(s + np.arange(L)) % geo.n_nodes] = k
        ops = grid.opinions[starts].astype(np.int64)
        return ClusterDecomposition(labels, ops, lengths, lengths - 1, starts)
    labels = np.full(geo.shape, -1, dtype=np.int64)
    next_label = 0
    for m in range(1, grid.M + 1):
        lab, k = ndimage.label(X == m)
        sel = lab > 0
        labels[sel] = lab[sel] - 1 + next_label
        next_label += k
    if periodic and next_label:
        parent = np.arange(next_label)

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for ax in range(geo.dimension):
            lo = np.take(labels, 0, axis=ax)
            hi = np.take(labels, -1, axis=ax)
            same = np.take(X, 0, axis=ax) == np.take(X, -1, axis=ax)
            for a, b in zip(lo[same].ravel(), hi[same].ravel()):
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
        roots = np.array([find(a) for a in range(next_label)])
        _, labels_flat = np.unique(roots[labels.ravel()], return_inverse=True)
        labels = labels_flat.reshape(geo.shape)
    flat = labels.ravel()
    nlab = int(flat.max()) + 1
    sizes = np.bincount(flat, minlength=nlab)
    first = np.full(nlab, -1)
    first[flat[::-1]] = np.arange(len(flat))[::-1]
    ops = grid.opinions[first].astype(np.int64)
    idx = np.indices(geo.shape).reshape(geo.dimension, -1)
    diam = np.zeros(nlab, dtype=np.int64)
    order = np.argsort(flat, kind="stable")
    bounds = np.concatenate(([0], np.cumsum(sizes)))
    for k in range(nlab):
        members = order[bounds[k]:bounds[k + 1]]
        ext = 0
        for ax in range(geo.dimension):
            c = idx[ax, members]
            ext = max(ext, _circular_extent(c, geo.side_nodes) if periodic else int(c.max() - c.min()))
        diam[k] = ext
    return ClusterDecomposition(flat, ops, sizes, diam)
