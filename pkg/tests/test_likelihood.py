"""Likelihood and covariance-estimator tests with independent oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesinvert.core import Dataset, ImproperFlatPrior, UniformBoxPrior, spd_from_matrix
from bayesinvert.likelihood import (
    GAUSSIAN,
    NoConvergenceError,
    NoiseFamily,
    fixedpoint_scale,
    gaussian_loglik,
    gaussian_loglik_batch,
    log_posterior_cond,
    ml_covariance,
    student_t,
    student_t_eta,
    student_t_loglik,
    student_t_loglik_batch,
)
from bayesinvert.models import LocalizationModel


def spd(m):
    return spd_from_matrix(np.asarray(m, dtype=float))


# ---------------------------------------------------------------------------
# Gaussian log-likelihood
# ---------------------------------------------------------------------------


def test_gaussian_standard_normal_at_mode():
    assert gaussian_loglik(np.zeros((1, 1)), spd([[1.0]])) == pytest.approx(
        -0.918939, abs=1e-6
    )


def test_gaussian_k2_unit_residual():
    res = np.array([[1.0], [1.0]])
    assert gaussian_loglik(res, spd(np.eye(2))) == pytest.approx(
        -np.log(2 * np.pi) - 1.0, abs=1e-12
    )
    assert gaussian_loglik(res, spd(np.eye(2))) == pytest.approx(-2.837877, abs=1e-6)


def test_gaussian_two_columns_scaled_identity():
    res = np.zeros((2, 2))
    val = gaussian_loglik(res, spd(np.diag([2.0, 2.0])))
    assert val == pytest.approx(-2 * np.log(2 * np.pi) - 2 * np.log(2.0), abs=1e-12)
    assert val == pytest.approx(-5.06205, abs=1e-4)


def test_gaussian_batch_matches_scalar():
    rng = np.random.default_rng(0)
    res = rng.standard_normal((5, 3, 4))
    sigma = spd(random_cov(rng, 3))
    batch = gaussian_loglik_batch(res, sigma)
    singles = [gaussian_loglik(res[i], sigma) for i in range(5)]
    np.testing.assert_allclose(batch, singles, rtol=1e-12)


def random_cov(rng, k):
    a = rng.standard_normal((k, k))
    return a @ a.T + k * np.eye(k)


@settings(deadline=None, max_examples=25)
@given(st.integers(min_value=0, max_value=5000), st.sampled_from([0.5, 2.0, 10.0]))
def test_gaussian_scaling_identity(seed, c):
    # loglik(e, c*Sigma) = -(RK/2) ln c + loglik(e / sqrt(c), Sigma)
    rng = np.random.default_rng(seed)
    k, r = 3, 4
    res = rng.standard_normal((k, r))
    base = random_cov(rng, k)
    lhs = gaussian_loglik(res, spd(c * base))
    rhs = -(r * k / 2.0) * np.log(c) + gaussian_loglik(res / np.sqrt(c), spd(base))
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_gaussian_dimension_mismatch():
    with pytest.raises(ValueError):
        gaussian_loglik(np.zeros((3, 2)), spd(np.eye(2)))


# ---------------------------------------------------------------------------
# Student-t log-likelihood
# ---------------------------------------------------------------------------


def test_student_t_cauchy_at_zero():
    val = student_t_loglik(np.zeros((1, 1)), spd([[1.0]]), 1.0)
    assert val == pytest.approx(np.log(1.0 / np.pi), abs=1e-10)
    assert val == pytest.approx(-1.14473, abs=1e-5)


def test_student_t_cauchy_at_one():
    val = student_t_loglik(np.ones((1, 1)), spd([[1.0]]), 1.0)
    assert val == pytest.approx(np.log(1.0 / (2.0 * np.pi)), abs=1e-10)
    assert val == pytest.approx(-1.83788, abs=1e-5)


def test_student_t_large_nu_approaches_gaussian():
    rng = np.random.default_rng(3)
    res = 0.3 * rng.standard_normal((2, 5))
    sigma = spd(random_cov(rng, 2))
    t_val = student_t_loglik(res, sigma, 1e6)
    g_val = gaussian_loglik(res, sigma)
    assert t_val == pytest.approx(g_val, abs=1e-3)


def test_student_t_monotone_in_residual_norm():
    sigma = spd([[1.0]])
    vals = [student_t_loglik(np.array([[e]]), sigma, 3.0) for e in np.linspace(0, 5, 21)]
    assert np.all(np.diff(vals) < 0)


def test_student_t_batch_matches_scalar():
    rng = np.random.default_rng(1)
    res = rng.standard_normal((4, 2, 6))
    sigma = spd(random_cov(rng, 2))
    batch = student_t_loglik_batch(res, sigma, 7.0)
    singles = [student_t_loglik(res[i], sigma, 7.0) for i in range(4)]
    np.testing.assert_allclose(batch, singles, rtol=1e-12)


def test_student_t_rejects_bad_nu():
    with pytest.raises(ValueError):
        student_t_loglik(np.zeros((1, 1)), spd([[1.0]]), 0.0)
    with pytest.raises(ValueError):
        NoiseFamily("student_t", -1.0)


# ---------------------------------------------------------------------------
# ML covariance
# ---------------------------------------------------------------------------


def test_ml_covariance_rank_one_pair():
    res = np.array([[1.0, -1.0], [-1.0, 1.0]])
    np.testing.assert_allclose(ml_covariance(res), [[1.0, -1.0], [-1.0, 1.0]])


def test_ml_covariance_zero_residuals():
    np.testing.assert_allclose(ml_covariance(np.zeros((3, 5))), np.zeros((3, 3)))


def test_ml_covariance_single_column():
    res = np.array([[2.0], [0.0]])
    np.testing.assert_allclose(ml_covariance(res), [[4.0, 0.0], [0.0, 0.0]])


@settings(deadline=None, max_examples=30)
@given(st.integers(min_value=0, max_value=5000))
def test_ml_covariance_psd(seed):
    rng = np.random.default_rng(seed)
    res = rng.standard_normal((4, 6))
    eigs = np.linalg.eigvalsh(ml_covariance(res))
    assert eigs.min() >= -1e-10


# ---------------------------------------------------------------------------
# Fixed-point scale estimator
# ---------------------------------------------------------------------------


def test_fixedpoint_gaussian_weight_equals_ml_covariance():
    rng = np.random.default_rng(4)
    res = rng.standard_normal((2, 9))
    out = fixedpoint_scale(res, lambda s: np.ones_like(s), spd(np.eye(2)))
    np.testing.assert_array_equal(out.matrix, ml_covariance(res))


def test_fixedpoint_recovers_student_t_scale():
    # Monte Carlo oracle: large-R draws from a t(10) with known scale.
    rng = np.random.default_rng(11)
    scale = np.array([[1.0, 0.5], [0.5, 2.0]])
    chol = np.linalg.cholesky(scale)
    r = 10_000
    z = chol @ rng.standard_normal((2, r))
    u = rng.chisquare(10.0, size=r)
    res = z * np.sqrt(10.0 / u)
    eta = student_t_eta(10.0, 2)
    est = fixedpoint_scale(res, eta, spd(np.eye(2)))
    assert np.max(np.abs(est.matrix - scale)) < 0.1


def test_fixedpoint_rank_deficient_jitters():
    res = np.array([[1.0], [0.0]])
    out = fixedpoint_scale(res, lambda s: np.ones_like(s), spd(np.eye(2)))
    assert out.jitter > 0.0
    np.testing.assert_allclose(out.matrix, [[1.0, 0.0], [0.0, 0.0]], atol=1e-6)


def test_fixedpoint_no_convergence():
    rng = np.random.default_rng(5)
    res = rng.standard_normal((2, 8))
    eta = student_t_eta(5.0, 2)
    with pytest.raises(NoConvergenceError) as err:
        fixedpoint_scale(res, eta, spd(np.eye(2)), tol=0.0, max_iter=3)
    assert err.value.last_iterate.shape == (2, 2)


# ---------------------------------------------------------------------------
# Conditional log posterior
# ---------------------------------------------------------------------------


def test_log_posterior_flat_prior_equals_loglik():
    model = LocalizationModel()
    rng = np.random.default_rng(6)
    theta = np.array([2.5, 2.0])
    stub = Dataset(observations=np.zeros((3, 4)))
    clean = model.predict(theta, stub)
    data = Dataset(observations=clean + 0.1 * rng.standard_normal((3, 4)))
    sigma = spd(np.eye(3))
    val = log_posterior_cond(model, theta, data, sigma, ImproperFlatPrior())
    from bayesinvert.core import residuals

    assert val == pytest.approx(gaussian_loglik(residuals(model, theta, data), sigma))


def test_log_posterior_outside_box_support():
    model = LocalizationModel()
    data = Dataset(observations=np.zeros((3, 2)))
    prior = UniformBoxPrior([0.0, 0.0], [1.0, 1.0])
    sigma = spd(np.eye(3))
    before = model.eval_count
    val = log_posterior_cond(model, np.array([5.0, 5.0]), data, sigma, prior)
    assert val == -np.inf
    assert model.eval_count == before  # support check precedes model work
