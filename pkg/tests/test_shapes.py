import math

import numpy as np
import pytest

from schelling_lab.shapes import (
    MIN_DIAMETER_N2_W1_PINF,
    StableShape,
    erode_to_stable,
    erosion_upper_bound,
    is_connected,
    is_stable,
    is_stable_brute,
    min_stable_diameter,
)


def interval(a, b):
    return np.arange(a, b)[:, None]


def test_is_stable_examples():
    assert is_stable(interval(0, 3), 2)
    assert not is_stable(interval(0, 2), 2)
    assert is_stable([], 3, N=2)


def test_interval_of_length_w_plus_one_is_stable_up_to_50():
    for w in range(1, 51):
        assert is_stable(interval(0, w + 1), w)
        assert not is_stable(interval(0, w), w)


@pytest.mark.parametrize("N,w,p", [(1, 2, math.inf), (2, 1, math.inf), (2, 2, math.inf), (2, 2, 1.0),
                                   (2, 1, 2.0)])
def test_is_stable_agrees_with_wide_window(N, w, p):
    rng = np.random.default_rng(N * 10 + w)
    for _ in range(100 if N == 1 else 60):
        side = int(rng.integers(2, 7))
        box = np.array(np.unravel_index(np.arange(side**N), (side,) * N)).T
        keep = rng.random(len(box)) < rng.uniform(0.3, 0.95)
        nodes = box[keep]
        fast = is_stable(nodes, w, N, p)
        assert fast == is_stable_brute(nodes, w, N, p)
    # the random family also contains stable sets (e.g. full boxes)
    full = np.array(np.unravel_index(np.arange(5**N), (5,) * N)).T
    assert is_stable(full, w, N, p) == is_stable_brute(full, w, N, p)


def test_single_node_is_unstable():
    assert not is_stable([[0, 0]], 1, N=2)
    assert not is_stable([[0]], 1)


@pytest.mark.parametrize("w", [1, 2, 3])
def test_erosion_at_proof_radius(w):
    N = 2
    r = 2 ** (2 * N) * w ** (N + 1)
    shape, trace = erode_to_stable(r, w, N)
    assert len(shape.nodes) > 0
    assert shape.certificate
    assert np.all(np.diff(trace.edge_counts) < 0)


@pytest.mark.parametrize("rule", ["lex", "random"])
def test_erosion_terminal_sets_are_stable(rule):
    for w, r in [(1, 3), (2, 7), (2, 10)]:
        shape, trace = erode_to_stable(r, w, 2, rule=rule, seed=4)
        assert np.all(np.diff(trace.edge_counts) < 0)
        if len(shape.nodes):
            assert is_stable(shape.nodes, w, 2)


def test_erosion_edge_count_matches_direct_count():
    w = 2
    shape, trace = erode_to_stable(7, w, 2)
    members = set(map(tuple, shape.nodes.tolist()))
    offs = [(a, b) for a in range(-w, w + 1) for b in range(-w, w + 1) if (a, b) != (0, 0)]
    direct = sum((x + a, y + b) not in members for x, y in members for a, b in offs)
    assert trace.edge_counts[-1] == direct


def test_erosion_random_rule_is_seeded():
    a, _ = erode_to_stable(9, 2, 2, rule="random", seed=1)
    b, _ = erode_to_stable(9, 2, 2, rule="random", seed=1)
    assert np.array_equal(a.nodes, b.nodes)


@pytest.mark.parametrize("w", [1, 2, 5, 9])
def test_erosion_1d_gives_long_interval(w):
    for r in (w + 1, 2 * w, 3 * w + 2):
        shape, _ = erode_to_stable(r, w, 1)
        x = np.sort(shape.nodes[:, 0])
        assert np.array_equal(x, np.arange(x[0], x[0] + len(x)))
        assert len(x) >= w + 1


def test_min_diameter_1d_is_w():
    for w in range(1, 11):
        res = min_stable_diameter(w, 1)
        assert res.exact and res.diameter == w
        assert len(res.witnesses[0].nodes) == w + 1


def test_min_diameter_2d_w1_regression():
    res = min_stable_diameter(1, 2)
    assert res.exact
    assert res.diameter == MIN_DIAMETER_N2_W1_PINF
    for s in res.witnesses:
        assert s.connected and s.certificate and s.diameter == res.diameter
        assert is_stable_brute(s.nodes, 1, 2)


def test_min_diameter_2d_w1_has_no_smaller_shape():
    """Independent brute force over every subset of a 3 x 3 box."""
    cells = [(a, b) for a in range(3) for b in range(3)]
    for bits in range(1, 1 << 9):
        nodes = [c for k, c in enumerate(cells) if bits >> k & 1]
        if is_connected(nodes, 2):
            assert not is_stable_brute(nodes, 1, 2)


def test_budget_fallback_is_flagged():
    res = min_stable_diameter(1, 2, budget=5)
    assert res.budget_exceeded and not res.exact
    assert res.diameter >= MIN_DIAMETER_N2_W1_PINF


def test_diameter_sandwich():
    ds = {w: min_stable_diameter(w, 2).diameter for w in (1, 2, 3)}
    c1 = min(d / w**2 for w, d in ds.items())
    c2 = max(d / w**3 for w, d in ds.items())
    assert c1 > 0 and c2 < math.inf
    for w, d in ds.items():
        assert c1 * w**2 <= d <= c2 * w**3
    assert ds[1] < ds[2] < ds[3]


def test_upper_bound_dominates_exact():
    assert erosion_upper_bound(1, 2).diameter >= MIN_DIAMETER_N2_W1_PINF


def test_shape_rendering():
    s = StableShape(np.array([[0, 1], [0, 2], [1, 0]]), 1, math.inf, 2)
    assert s.ascii() == ".##\n#.."
    assert s.to_csv().splitlines() == ["x0,x1", "0,1", "0,2", "1,0"]
