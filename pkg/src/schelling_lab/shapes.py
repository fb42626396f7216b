"""Stable shapes: finite sets A of Z^N holding opinion 1 in a sea of opinion 2.

A node with opinion 1 is satisfied when at least half of its neighborhood
(itself included) lies in A; a node with opinion 2 when at most half does.
Ties keep the current opinion, so both inequalities are non-strict.
"""

from __future__ import annotations

import heapq
import io
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .lattice import build_neighborhood_mask
from .rng import stream

# Exhaustive result for N = 2, w = 1, p = inf, closed neighborhoods.
MIN_DIAMETER_N2_W1_PINF = 3


def _offsets(w: int, N: int, p: float, closure: str) -> np.ndarray:
    return build_neighborhood_mask(N, w, p, closure).offsets


def _as_array(nodes, N: int) -> np.ndarray:
    arr = np.asarray(list(nodes), dtype=np.int64).reshape(-1, N)
    return np.unique(arr, axis=0) if len(arr) else arr


def _inside_counts(arr: np.ndarray, offsets: np.ndarray, pad: int):
    """Dense count of A-members in every neighborhood over the box around ``arr``."""
    lo = arr.min(axis=0) - pad
    shape = tuple(arr.max(axis=0) - lo + 1 + pad)
    ind = np.zeros(shape, dtype=np.int32)
    ind[tuple((arr - lo).T)] = 1
    counts = np.zeros(shape, dtype=np.int32)
    w = int(np.abs(offsets).max())
    padded = np.pad(ind, w)
    for off in offsets:
        sl = tuple(slice(w + o, w + o + shape[k]) for k, o in enumerate(off))
        counts += padded[sl]
    return ind, counts


def is_stable(nodes, w: int, N: int = 1, p: float = math.inf, closure: str = "closed") -> bool:
    """Stability of A = ``nodes`` (opinion 1) against opinion 2 everywhere else.

    Only nodes within distance w of A can see A; everything farther has no
    A-neighbor and is trivially satisfied.
    """
    arr = _as_array(nodes, N)
    if len(arr) == 0:
        return True
    offsets = _offsets(w, N, p, closure)
    size = len(offsets)
    ind, counts = _inside_counts(arr, offsets, w)
    inside = ind == 1
    ok_in = 2 * counts[inside] >= size
    ok_out = 2 * counts[~inside] <= size
    return bool(ok_in.all() and ok_out.all())


def is_stable_brute(nodes, w: int, N: int = 1, p: float = math.inf, closure: str = "closed") -> bool:
    """Direct check of every node in the bounding box padded by 2w."""
    arr = _as_array(nodes, N)
    if len(arr) == 0:
        return True
    offsets = _offsets(w, N, p, closure)
    members = set(map(tuple, arr.tolist()))
    lo = arr.min(axis=0) - 2 * w
    hi = arr.max(axis=0) + 2 * w
    for node in itertools.product(*[range(a, b + 1) for a, b in zip(lo, hi)]):
        c = sum(tuple(np.add(node, o)) in members for o in offsets.tolist())
        mine = node in members
        if mine and 2 * c < len(offsets):
            return False
        if not mine and 2 * c > len(offsets):
            return False
    return True


def diameter(nodes, N: int) -> int:
    """sup ||a - b||_inf over members (0 for a single node, -1 for the empty set)."""
    arr = _as_array(nodes, N)
    if len(arr) == 0:
        return -1
    return int((arr.max(axis=0) - arr.min(axis=0)).max())


def is_connected(nodes, N: int) -> bool:
    arr = _as_array(nodes, N)
    if len(arr) <= 1:
        return True
    lo = arr.min(axis=0)
    ind = np.zeros(tuple(arr.max(axis=0) - lo + 1), dtype=bool)
    ind[tuple((arr - lo).T)] = True
    _, k = ndimage.label(ind)
    return k == 1


@dataclass
class StableShape:
    nodes: np.ndarray  # (n, N) integer coordinates
    w: int
    p: float
    N: int
    closure: str = "closed"

    @property
    def diameter(self) -> int:
        return diameter(self.nodes, self.N)

    @property
    def certificate(self) -> bool:
        return len(self.nodes) > 0 and is_stable(self.nodes, self.w, self.N, self.p, self.closure)

    @property
    def connected(self) -> bool:
        return is_connected(self.nodes, self.N)

    def ascii(self) -> str:
        """Rows of '#' (member) and '.' for N <= 2."""
        if self.N > 2:
            raise ValueError("ASCII rendering is for N <= 2")
        arr = self.nodes if self.N == 2 else np.column_stack([np.zeros(len(self.nodes), int), self.nodes])
        if len(arr) == 0:
            return ""
        lo = arr.min(axis=0)
        grid = np.full(tuple(arr.max(axis=0) - lo + 1), ".")
        grid[tuple((arr - lo).T)] = "#"
        return "\n".join("".join(row) for row in grid)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(f"x{k}" for k in range(self.N)) + "\n")
        for row in self.nodes.tolist():
            buf.write(",".join(str(v) for v in row) + "\n")
        return buf.getvalue()


@dataclass
class ErosionTrace:
    edge_counts: list  # |E_n| before each flip and after the last
    flipped: list  # flattened coordinates in flip order
    r: int
    rule: str


def _edge_count(ind: np.ndarray, counts: np.ndarray, size: int) -> int:
    """|E| = #{(i, j): i in A, j not in A, j in nbhd(i)} for a symmetric mask."""
    return int((size - counts[ind == 1]).sum())


def erode_to_stable(r: int, w: int, N: int = 2, p: float = math.inf, rule: str = "lex",
                    seed: int = 0, closure: str = "closed") -> tuple[StableShape, ErosionTrace]:
    """Greedy erosion of the box {||i||_inf <= r}.

    While some member of A is unsatisfied, move one of them to opinion 2:
    the lexicographically smallest (``rule="lex"``) or a uniformly random one
    (``rule="random"``, seeded).  Each move lowers |E| by at least 2.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    if rule not in ("lex", "random"):
        raise ValueError(f"unknown selection rule {rule!r}")
    offsets = _offsets(w, N, p, closure)
    size = len(offsets)
    box = np.array(list(itertools.product(range(-r, r + 1), repeat=N)), dtype=np.int64)
    ind, counts = _inside_counts(box, offsets, w)
    shape = ind.shape
    origin = np.full(N, -r - w)
    strides = np.array([int(np.prod(shape[k + 1:])) for k in range(N)], dtype=np.int64)
    flat_offsets = offsets @ strides
    ind_f = ind.reshape(-1)
    counts_f = counts.reshape(-1)
    E = _edge_count(ind, counts, size)
    trace = ErosionTrace([E], [], r, rule)

    def unsatisfied(i):
        return ind_f[i] == 1 and 2 * counts_f[i] < size

    cand = np.flatnonzero((ind_f == 1) & (2 * counts_f < size)).tolist()
    rng = stream(seed, "erosion") if rule == "random" else None
    if rule == "lex":
        heapq.heapify(cand)
    pool = cand
    in_pool = set(cand)
    while pool:
        if rule == "lex":
            i = heapq.heappop(pool)
        else:
            k = int(rng.integers(len(pool)))
            pool[k], pool[-1] = pool[-1], pool[k]
            i = pool.pop()
        in_pool.discard(i)
        if not unsatisfied(i):
            continue
        E += 2 * int(counts_f[i]) - size - 1
        ind_f[i] = 0
        nb = i + flat_offsets
        counts_f[nb] -= 1
        trace.edge_counts.append(E)
        trace.flipped.append(i)
        for j in nb.tolist():
            if j not in in_pool and unsatisfied(j):
                in_pool.add(j)
                if rule == "lex":
                    heapq.heappush(pool, j)
                else:
                    pool.append(j)
    coords = np.argwhere(ind_f.reshape(shape) == 1) + origin
    return StableShape(coords, w, p, N, closure), trace


# ---- minimal stable shapes ---------------------------------------------------

@dataclass
class MinShapeResult:
    w: int
    N: int
    p: float
    diameter: int
    exact: bool
    witnesses: list = field(default_factory=list)  # StableShape objects, one per symmetry class
    explored: int = 0
    budget_exceeded: bool = False


def _canonical_2d(cells: np.ndarray) -> tuple:
    """Smallest normalized coordinate tuple over the dihedral group of the square."""
    best = None
    x, y = cells[:, 0], cells[:, 1]
    for a, b in ((x, y), (y, x)):
        for sa, sb in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            pts = np.column_stack([sa * a, sb * b])
            pts = pts - pts.min(axis=0)
            key = tuple(sorted(map(tuple, pts.tolist())))
            if best is None or key < best:
                best = key
    return best


def _min_diameter_1d(w: int, p: float, closure: str) -> MinShapeResult:
    # connected subsets of Z are intervals
    explored = 0
    for L in range(1, 4 * w + 3):
        explored += 1
        nodes = np.arange(L)[:, None]
        if is_stable(nodes, w, 1, p, closure):
            return MinShapeResult(w, 1, p, L - 1, True, [StableShape(nodes, w, p, 1, closure)], explored)
    raise RuntimeError("no stable interval found")  # the interval of length 2w+1 is always stable


def _search_2d(d: int, w: int, p: float, closure: str, budget: int, state: dict) -> list:
    """All stable connected sets whose bounding box is (d+1) x (d+1) or thinner with extent d.

    Rows of the box are chosen top to bottom as bit masks; once row r + w is
    fixed the whole neighborhood of row r is known, so row r is checked then.
    """
    offsets = _offsets(w, 2, p, closure)
    size = len(offsets)
    width = d + 1
    rows = [np.array([(m >> c) & 1 for c in range(width)], dtype=np.int32) for m in range(1 << width)]
    found = {}
    W = width + 2 * w

    def row_ok(grid_rows, r):
        # grid_rows: list of padded rows (length W) for rows 0..len-1 of the box
        c = np.zeros(W, dtype=np.int32)
        for dr, dc in offsets.tolist():
            rr = r + dr
            if 0 <= rr < len(grid_rows):
                c[max(0, -dc):W - max(0, dc)] += grid_rows[rr][max(0, dc):W - max(0, -dc)]
        mine = grid_rows[r] == 1
        return bool((2 * c[mine] >= size).all() and (2 * c[~mine] <= size).all())

    def pad(row):
        return np.concatenate([np.zeros(w, np.int32), row, np.zeros(w, np.int32)])

    def rec(chosen):
        state["explored"] += 1
        if state["explored"] > budget:
            raise _BudgetExceeded
        k = len(chosen)
        if k == width:
            # rows beyond the box are empty; check the trailing rows and the outside ring
            full = [np.zeros(W, np.int32)] * w + chosen + [np.zeros(W, np.int32)] * w
            for r in range(k, k + 2 * w):
                if not row_ok(full, r):
                    return
            cells = np.array([(r, c - w) for r, row in enumerate(chosen) for c in np.flatnonzero(row)])
            if len(cells) == 0:
                return
            if not (cells[:, 1].min() == 0 and (cells[:, 0].max() == d or cells[:, 1].max() == d)):
                return
            if not is_connected(cells, 2):
                return
            key = _canonical_2d(cells)
            found.setdefault(key, cells)
            return
        for m in range(1 << width):
            if k == 0 and m == 0:
                continue  # the top row touches the set
            nxt = chosen + [pad(rows[m])]
            full = [np.zeros(W, np.int32)] * w + nxt
            # box row k - w (padded index k) now has its whole neighborhood fixed
            if not row_ok(full, k):
                continue
            rec(nxt)

    rec([])
    return list(found.values())


class _BudgetExceeded(Exception):
    pass


def min_stable_diameter(w: int, N: int = 1, p: float = math.inf, budget: int = 5_000_000,
                        closure: str = "closed", r_max: int | None = None) -> MinShapeResult:
    """Minimal diameter of a connected stable shape.

    Exhaustive for N = 1 and for N = 2 with w = 1; otherwise an upper bound
    from erosion of boxes of half-side 1..r_max.  A search that runs out of
    ``budget`` nodes falls back to the erosion bound and is flagged.
    """
    if N == 1:
        return _min_diameter_1d(w, p, closure)
    if N == 2 and w == 1:
        state = {"explored": 0}
        try:
            for d in range(0, 16):
                hits = _search_2d(d, w, p, closure, budget, state)
                if hits:
                    shapes = [StableShape(c, w, p, 2, closure) for c in hits]
                    return MinShapeResult(w, 2, p, d, True, shapes, state["explored"])
        except _BudgetExceeded:
            res = erosion_upper_bound(w, N, p, closure, r_max)
            res.budget_exceeded = True
            res.explored = state["explored"]
            return res
    return erosion_upper_bound(w, N, p, closure, r_max)


def erosion_upper_bound(w: int, N: int, p: float = math.inf, closure: str = "closed",
                        r_max: int | None = None) -> MinShapeResult:
    """Diameter of the first connected erosion terminal set as r grows from 1.

    Small boxes erode away completely; the first r that survives gives the
    tightest bound this construction offers.  ``r_max`` defaults to
    2^(2N) w^(N+1), where survival is guaranteed.
    """
    r_max = r_max or 2 ** (2 * N) * w ** (N + 1)
    for r in range(1, r_max + 1):
        best = None
        for rule in ("lex", "random"):
            shape, _ = erode_to_stable(r, w, N, p, rule, seed=r, closure=closure)
            if len(shape.nodes) and shape.connected and shape.certificate:
                if best is None or shape.diameter < best.diameter:
                    best = shape
        if best is not None:
            return MinShapeResult(w, N, p, best.diameter, False, [best])
    raise RuntimeError("no erosion produced a connected stable set; raise r_max")
