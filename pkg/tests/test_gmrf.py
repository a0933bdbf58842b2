import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from ggdelta import gmrf
from ggdelta._special import matern1_unit
from ggdelta.errors import DomainError, NumericalError


def bessel_corr(d, rng_):
    """Direct oracle: kappa*h*K1(kappa*h) from scipy.special.k1."""
    x = np.sqrt(8.0) / rng_ * np.asarray(d, float)
    with np.errstate(invalid="ignore"):
        out = x * special.k1(x)
    return np.where(x == 0, 1.0, out)


def test_corr_at_zero_is_one():
    assert gmrf.matern_corr(0.0, 0.5) == 1.0


def test_corr_at_range_near_013():
    c = float(gmrf.matern_corr(0.5, 0.5))
    assert 0.12 <= c <= 0.15
    assert c == pytest.approx(np.sqrt(8) * special.k1(np.sqrt(8)), rel=1e-14)


def test_corr_decreasing():
    h = np.linspace(0, 3, 301)
    c = gmrf.matern_corr(h, 0.7)
    assert np.all(np.diff(c) < 0)
    assert gmrf.matern_corr(1.0, 0.5) < gmrf.matern_corr(0.5, 0.5)


def test_corr_rejects_negative_distance():
    with pytest.raises(DomainError):
        gmrf.matern_corr(-0.1, 0.5)


def test_tabulated_corr_matches_bessel():
    x = np.concatenate([np.linspace(0, 0.05, 50), np.geomspace(0.05, 45, 4000)])
    c, dc = matern1_unit(x)
    np.testing.assert_allclose(c, bessel_corr(x, np.sqrt(8.0)), atol=2e-12)
    # d corr / d log(range) = x^2 K0(x)
    with np.errstate(invalid="ignore"):
        ref = np.where(x == 0, 0.0, x * x * special.k0(x))
    np.testing.assert_allclose(dc, ref, atol=2e-11)


def test_covariance_two_nearby_points():
    cov = gmrf.build_covariance(np.array([[0.3, 0.3], [0.3, 0.3 + 1e-9]]), gmrf.MaternParams(0.5, 2.0))
    assert cov[0, 1] == pytest.approx(4.0, rel=1e-6)


def test_covariance_single_point():
    cov = gmrf.build_covariance(np.array([[0.1, 0.2]]), gmrf.MaternParams(0.5, 1.5))
    np.testing.assert_array_equal(cov, [[2.25]])


def test_covariance_factor_round_trip():
    pts = np.random.default_rng(1).random((100, 2))
    cov = gmrf.build_covariance(pts, gmrf.MaternParams(0.5, 1.0))
    assert np.allclose(cov, cov.T)
    np.testing.assert_allclose(np.diag(cov), 1.0)
    chol, jitter = gmrf.cholesky_jittered(cov)
    assert np.max(np.abs(chol @ chol.T - cov)) < 1e-8


def test_covariance_matches_oracle():
    pts = np.random.default_rng(2).random((30, 2))
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    cov = gmrf.build_covariance(pts, gmrf.MaternParams(0.4, 1.3))
    np.testing.assert_allclose(cov, 1.69 * bessel_corr(d, 0.4), atol=1e-12)


def test_dense_limit():
    with pytest.raises(DomainError, match="dense limit"):
        gmrf.build_covariance(np.zeros((11, 2)), gmrf.MaternParams(0.5, 1.0), dense_limit=10)


def test_jitter_failure_raises_numerical_error():
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NumericalError):
        gmrf.cholesky_jittered(bad)


def test_degenerate_field_is_zero():
    pts = np.random.default_rng(3).random((20, 2))
    x = gmrf.sample_field(np.random.default_rng(0), pts, gmrf.MaternParams(0.5, 1e-8))
    assert np.max(np.abs(x)) < 1e-6


def test_empirical_covariance():
    rng = np.random.default_rng(4)
    pts = rng.random((25, 2))
    params = gmrf.MaternParams(0.5, 1.0)
    cov = gmrf.build_covariance(pts, params)
    chol, _ = gmrf.cholesky_jittered(cov)
    draws = (chol @ rng.standard_normal((25, 2000))).T
    emp = np.cov(draws, rowvar=False)
    # entries are near 1 for close points; 3 Monte Carlo SEs of a covariance entry
    se = np.sqrt((cov ** 2 + np.outer(np.diag(cov), np.diag(cov))) / 2000)
    assert np.all(np.abs(emp - cov) < 4 * se)
    assert np.all(np.abs(emp - cov) < 0.1 + 0.1 * np.abs(cov))


def test_sample_reproducible():
    pts = np.random.default_rng(5).random((10, 2))
    p = gmrf.MaternParams(0.5, 1.0)
    a = gmrf.sample_field(np.random.default_rng(9), pts, p)
    b = gmrf.sample_field(np.random.default_rng(9), pts, p)
    assert a.tobytes() == b.tobytes()


def test_permutation_equivariance():
    rng = np.random.default_rng(6)
    pts = rng.random((15, 2))
    z = rng.standard_normal(15)
    perm = rng.permutation(15)
    p = gmrf.MaternParams(0.5, 1.0)
    a = gmrf.field_from_normals(gmrf.build_covariance(pts, p), z, "eigh")
    b = gmrf.field_from_normals(gmrf.build_covariance(pts[perm], p), z[perm], "eigh")
    np.testing.assert_allclose(b, a[perm], atol=1e-10)


def test_continuity_of_nearby_values():
    pts = np.array([[0.5, 0.5], [0.5, 0.5 + 1e-4], [0.9, 0.1]])
    x = gmrf.sample_field(np.random.default_rng(7), pts, gmrf.MaternParams(0.5, 1.0))
    assert abs(x[0] - x[1]) < 1e-2


def test_duplicates_are_perturbed():
    pts = np.array([[0.2, 0.2], [0.2, 0.2], [0.7, 0.1]])
    out = gmrf.perturb_duplicates(pts)
    assert np.all(out[0] == pts[0])
    assert 0 < np.linalg.norm(out[1] - out[0]) < 1e-8
    np.testing.assert_array_equal(out[2], pts[2])


def test_pointset_roles():
    ps = gmrf.PointSet(np.zeros((3, 2)), np.array(["observation", "prediction", "prediction"]))
    assert len(ps.subset("prediction")) == 2
    with pytest.raises(DomainError):
        gmrf.PointSet(np.array([[np.nan, 0.0]]))


@settings(max_examples=30, deadline=None)
@given(h=st.floats(0.0, 5.0), r=st.floats(0.05, 3.0))
def test_corr_bounded_property(h, r):
    c = float(gmrf.matern_corr(h, r))
    assert 0.0 <= c <= 1.0


def test_corr_at_subnormal_distance():
    h = np.array([0.0, 5e-324, 1e-310, 1e-200, 1e-20])
    for exact in (False, True):
        c, dc = matern1_unit(h, exact=exact)
        assert np.all(np.isfinite(c)) and np.all(np.isfinite(dc))
        np.testing.assert_allclose(c, 1.0, atol=1e-30)
        assert np.all(dc >= 0) and np.all(dc < 1e-30)
