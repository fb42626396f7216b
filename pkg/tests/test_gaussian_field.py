import math

import numpy as np
import pytest
from scipy import stats

from schelling_lab.gaussian_field import (
    InitialField,
    ball_overlap,
    build_initial_field,
    covariance_exact,
    field_to_csv,
    hat_field,
    read_field_binary,
    sample_initial_field,
    sample_white_noise,
    write_field_binary,
)
from schelling_lab.stencil import GridSpec, continuum_mask, neighborhood_sum

REPS = 10_000


def quad_overlap(d, N, p, n=600):
    """Independent midpoint-rule overlap of two unit l^p balls at offset d."""
    lo = np.minimum(0, d) - 1
    hi = np.maximum(0, d) + 1
    axes = [lo[k] + (np.arange(n) + 0.5) * (hi[k] - lo[k]) / n for k in range(N)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, N)
    norm = (lambda v: np.abs(v).max(axis=1)) if math.isinf(p) else (lambda v: (np.abs(v) ** p).sum(axis=1) ** (1 / p))
    inside = (norm(pts) < 1) & (norm(pts - d) < 1)
    return inside.sum() * np.prod((hi - lo) / n)


@pytest.fixture(scope="module")
def samples_m2():
    spec = GridSpec(4, 32, 1)
    return np.array([sample_initial_field(spec, 2, s).values[:, :40] for s in range(REPS)])


def test_gridspec_rejects_non_closing():
    with pytest.raises(ValueError):
        GridSpec(3.3, 4, 1)
    with pytest.raises(ValueError):
        GridSpec(2, 4, 1)


def test_white_noise_additivity_and_independence():
    spec = GridSpec(3, 8, 1)
    a, b = [], []
    for s in range(2000):
        W = sample_white_noise(spec, 2, s).values[0]
        x1, x2 = W[:5].sum(), W[5:12].sum()
        assert W[:12].sum() == pytest.approx(x1 + x2, abs=1e-14)
        a.append(x1)
        b.append(x2)
    assert abs(np.corrcoef(a, b)[0, 1]) <= 3 / math.sqrt(2000)


def test_white_noise_unit_box_variance():
    spec = GridSpec(3, 8, 2)
    M = 3
    sums = np.array([sample_white_noise(spec, M, s).values[1, :8, :8].sum() for s in range(REPS)])
    se = (1 / M) * math.sqrt(2 / (REPS - 1))
    assert abs(sums.var(ddof=1) - 1 / M) <= 3 * se


def test_white_noise_deterministic():
    spec = GridSpec(3, 4, 1)
    assert np.array_equal(sample_white_noise(spec, 3, 5).values, sample_white_noise(spec, 3, 5).values)


def test_channels_sum_to_zero():
    for M, N in [(2, 1), (3, 1), (4, 2)]:
        f = sample_initial_field(GridSpec(3, 8, N), M, 1)
        assert np.abs(f.values.sum(axis=0)).max() <= 1e-10 * np.abs(f.values).max()


def test_variance_and_cross_covariance_m2(samples_m2):
    v = samples_m2[:, 0, 5]
    c = np.cov(samples_m2[:, 0, 5], samples_m2[:, 1, 5])[0, 1]
    se = 0.5 * math.sqrt(2 / (REPS - 1))
    assert abs(v.var(ddof=1) - 0.5) <= 3 * se
    assert abs(c + 0.5) <= 3 * se


def test_hat_field_variance_and_lag_one(samples_m2):
    hat = samples_m2[:, 0] - samples_m2[:, 1]
    var = hat[:, 3].var(ddof=1)
    assert abs(var - 2) <= 3 * 2 * math.sqrt(2 / (REPS - 1))
    lag = np.cov(hat[:, 3], hat[:, 3 + 32])[0, 1]
    # SE of a covariance estimate: sqrt((s_xx s_yy + s_xy^2) / n)
    se = math.sqrt((4 + 1) / REPS)
    assert abs(lag - 1) <= 3 * se


def test_marginal_normality(samples_m2):
    assert stats.normaltest(samples_m2[:, 0, 7]).pvalue > 1e-3


def test_hat_field_rejects_m3():
    with pytest.raises(ValueError):
        hat_field(sample_initial_field(GridSpec(3, 4, 1), 3, 0))


def test_translation_equivariance():
    spec = GridSpec(3, 8, 2)
    noise = sample_white_noise(spec, 3, 4)
    B = build_initial_field(noise).values
    noise.values = np.roll(noise.values, (3, -5), axis=(1, 2))
    B2 = build_initial_field(noise).values
    assert np.allclose(np.roll(B, (3, -5), axis=(1, 2)), B2, atol=1e-12, rtol=0)


def test_mismatched_mask_rejected():
    noise = sample_white_noise(GridSpec(3, 4, 1), 2, 0)
    with pytest.raises(ValueError):
        build_initial_field(noise, continuum_mask(GridSpec(3, 8, 1)))


# ---- covariance formula ----------------------------------------------------

def test_cov_disjoint_is_zero():
    assert np.all(covariance_exact([0.0, 0.0], [2.5, 0.3], 3, 2) == 0)


def test_cov_1d_distance_one():
    C = covariance_exact([0.0], [1.0], 2, 1)
    assert C[0, 0] == pytest.approx(0.25) and C[0, 1] == pytest.approx(-0.25)


def test_cov_2d_m3_against_quadrature():
    d = np.array([0.5, 1.0])
    ov = quad_overlap(d, 2, math.inf)
    assert ov == pytest.approx(1.5, abs=1e-2)
    C = covariance_exact([0, 0], d, 3, 2)
    assert C[0, 0] == pytest.approx(2 / 9 * 1.5)
    assert C[0, 0] == pytest.approx(2 / 9 * ov, abs=5e-3)


@pytest.mark.parametrize("d,p", [([0.3, 0.4], 2.0), ([0.7, 0.0], 1.0), ([1.1, 0.2], 3.0)])
def test_overlap_general_p_against_quadrature(d, p):
    d = np.array(d)
    assert ball_overlap([0, 0], d, 2, p) == pytest.approx(quad_overlap(d, 2, p), abs=2e-2)


def test_overlap_uses_torus_distance():
    assert ball_overlap([0.2], [3.9], 1, R=4) == pytest.approx(1.7)


# ---- stencil ---------------------------------------------------------------

def test_mask_total_weight():
    assert continuum_mask(GridSpec(3, 16, 1)).total_weight == pytest.approx(2.0, abs=1e-12)
    assert continuum_mask(GridSpec(3, 8, 3)).total_weight == pytest.approx(8.0, abs=1e-12)
    assert continuum_mask(GridSpec(3, 32, 2), 2.0).total_weight == pytest.approx(math.pi, abs=0.01)
    w = continuum_mask(GridSpec(3, 8, 2), 1.5).weights
    assert (w >= 0).all() and (w <= GridSpec(3, 8, 2).cell_volume + 1e-15).all()


@pytest.mark.parametrize("N,p", [(1, math.inf), (2, math.inf), (2, 2.0)])
def test_neighborhood_sum_matches_direct(N, p):
    spec = GridSpec(3, 4, N)
    mask = continuum_mask(spec, p)
    rng = np.random.default_rng(0)
    ints = rng.integers(-3, 4, size=spec.shape)
    floats = rng.standard_normal(spec.shape)
    for v in (ints, floats):
        direct = np.zeros(spec.shape)
        for off, f in zip(mask.offsets, mask.fractions):
            direct += f * np.roll(v, tuple(-off), axis=tuple(range(N)))
        got = neighborhood_sum(v, mask)
        if v is ints:
            assert np.array_equal(got * mask.denominator, np.rint(direct * mask.denominator))
        else:
            assert np.allclose(got, direct, atol=1e-12)


# ---- serialization ---------------------------------------------------------

def test_binary_roundtrip(tmp_path):
    f = sample_initial_field(GridSpec(3, 4, 2), 3, 8)
    write_field_binary(f, tmp_path / "b.bin")
    g = read_field_binary(tmp_path / "b.bin")
    assert isinstance(g, InitialField)
    assert np.array_equal(f.values, g.values) and g.spec == f.spec and g.seed == 8


def test_csv_small_grid():
    f = sample_initial_field(GridSpec(3, 2, 1), 2, 1)
    lines = field_to_csv(f).strip().splitlines()
    assert lines[0] == "cell,x0,B1,B2"
    assert len(lines) == 7
    assert float(lines[2].split(",")[2]) == f.values[0, 1]
