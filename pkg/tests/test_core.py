"""Domain-type tests: SPD factorization, residual computation, RNG streams."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesinvert.core import (
    Dataset,
    ImproperFlatPrior,
    GaussianPrior,
    NotPositiveDefiniteError,
    NotSymmetricError,
    RngStream,
    UniformBoxPrior,
    residuals,
    spd_from_matrix,
)
from bayesinvert.models import LocalizationModel, MultiOutputModel


def random_spd(rng, k):
    a = rng.standard_normal((k, k))
    return a @ a.T + k * np.eye(k)


# ---------------------------------------------------------------------------
# spd_from_matrix
# ---------------------------------------------------------------------------


def test_spd_identity_logdet_zero():
    spd = spd_from_matrix(np.eye(3), jitter_policy="reject")
    assert spd.log_det == pytest.approx(0.0)
    assert spd.jitter == 0.0


def test_spd_singular_rejected():
    with pytest.raises(NotPositiveDefiniteError):
        spd_from_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]), jitter_policy="reject")


def test_spd_logdet_2x2():
    # det [[2,1],[1,2]] = 2*2 - 1*1 = 3 by cofactor expansion
    spd = spd_from_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert spd.log_det == pytest.approx(np.log(3.0), abs=1e-12)


def test_spd_rejects_asymmetric():
    with pytest.raises(NotSymmetricError):
        spd_from_matrix(np.array([[1.0, 0.5], [0.1, 1.0]]))


def test_spd_escalate_jitters_singular_matrix():
    spd = spd_from_matrix(np.zeros((2, 2)), jitter_policy="escalate")
    assert 0 < spd.jitter <= 1e-6
    assert np.allclose(spd.matrix, spd.jitter * np.eye(2))


def test_spd_escalate_leaves_pd_matrix_alone():
    m = np.array([[2.0, 0.3], [0.3, 1.0]])
    spd = spd_from_matrix(m, jitter_policy="escalate")
    assert spd.jitter == 0.0
    assert np.allclose(spd.matrix, m)


@settings(deadline=None, max_examples=40)
@given(st.integers(min_value=1, max_value=10), st.integers(min_value=0, max_value=10_000))
def test_spd_solve_roundtrip(k, seed):
    rng = np.random.default_rng(seed)
    a = random_spd(rng, k)
    b = rng.standard_normal(k)
    spd = spd_from_matrix(a)
    x = spd.solve(b)
    assert np.linalg.norm(a @ x - b) / np.linalg.norm(b) < 1e-8


@settings(deadline=None, max_examples=40)
@given(st.integers(min_value=1, max_value=10), st.integers(min_value=0, max_value=10_000))
def test_spd_logdet_matches_eigenvalues(k, seed):
    rng = np.random.default_rng(seed)
    a = random_spd(rng, k)
    spd = spd_from_matrix(a)
    assert spd.log_det == pytest.approx(np.sum(np.log(np.linalg.eigvalsh(a))), abs=1e-8)


def test_spd_quad_forms():
    a = np.diag([2.0, 4.0])
    spd = spd_from_matrix(a)
    vecs = np.array([[1.0, 0.0], [0.0, 2.0]]).T  # columns (1,0) and (0,2)
    np.testing.assert_allclose(spd.quad_forms(vecs), [0.5, 1.0])


def test_spd_scaled():
    a = np.array([[2.0, 1.0], [1.0, 2.0]])
    spd = spd_from_matrix(a).scaled(3.0)
    assert np.allclose(spd.matrix, 3.0 * a)
    assert spd.log_det == pytest.approx(np.log(3.0**2 * 3.0))


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(observations=np.array([[np.inf, 0.0]]))
    with pytest.raises(ValueError):
        Dataset(observations=np.ones((2, 3)), aux_inputs=np.ones(2))
    ds = Dataset(observations=np.ones((2, 3)), aux_inputs=np.arange(3.0))
    assert ds.k == 2 and ds.r == 3
    with pytest.raises(ValueError):
        ds.observations[0, 0] = 5.0  # immutable after construction


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


def test_residuals_exact_fit_is_zero():
    model = MultiOutputModel()
    tau = np.linspace(0.1, 5.0, 7)
    theta = np.array([0.2, 0.1])
    stub = Dataset(observations=np.zeros((4, 7)), aux_inputs=tau)
    clean = model.predict(theta, stub)
    data = Dataset(observations=clean, aux_inputs=tau)
    np.testing.assert_allclose(residuals(model, theta, data), 0.0, atol=1e-14)


def test_residuals_localization_component():
    # f_3(theta) at theta=[2.5, 2], sensor s3=[2, 3]: -10 ln(0.5^2 + 1) = -10 ln 1.25
    model = LocalizationModel()
    y = np.zeros((3, 1))
    data = Dataset(observations=y)
    res = residuals(model, np.array([2.5, 2.0]), data)
    assert res[2, 0] == pytest.approx(10.0 * np.log(1.25), abs=1e-5)
    assert res[2, 0] == pytest.approx(2.23144, abs=1e-5)


def test_residuals_multioutput_column():
    # f(theta=[0.2, 0.1], tau=pi/2) = [0.2*pi/2, 0, 0, 0.1*(pi/2)^2]
    model = MultiOutputModel()
    tau = np.array([np.pi / 2.0])
    y = np.ones((4, 1))
    data = Dataset(observations=y, aux_inputs=tau)
    res = residuals(model, np.array([0.2, 0.1]), data)
    expected_f = np.array([0.31416, 0.0, 0.0, 0.24674])
    np.testing.assert_allclose(res[:, 0], 1.0 - expected_f, atol=1e-5)


def test_residuals_dimension_check():
    model = LocalizationModel()
    data = Dataset(observations=np.zeros((3, 2)))
    with pytest.raises(ValueError):
        residuals(model, np.array([1.0, 2.0, 3.0]), data)


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------


def test_flat_prior():
    prior = ImproperFlatPrior()
    assert prior(np.array([1e6, -1e6])) == 0.0


def test_box_prior_support_and_normalization():
    prior = UniformBoxPrior([0.0, 0.0], [5.0, 2.0])
    assert prior(np.array([1.0, 1.0])) == pytest.approx(-np.log(10.0))
    assert prior(np.array([6.0, 1.0])) == -np.inf
    vals = prior.batch(np.array([[1.0, 1.0], [-0.1, 1.0]]))
    assert np.isfinite(vals[0]) and vals[1] == -np.inf


def test_gaussian_prior_matches_scipy():
    from scipy.stats import multivariate_normal

    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    prior = GaussianPrior([1.0, -1.0], cov)
    theta = np.array([0.3, 0.7])
    expected = multivariate_normal([1.0, -1.0], cov).logpdf(theta)
    assert prior(theta) == pytest.approx(expected, abs=1e-10)
    assert prior.batch(theta[None, :])[0] == pytest.approx(expected, abs=1e-10)


# ---------------------------------------------------------------------------
# RngStream
# ---------------------------------------------------------------------------


def test_rng_determinism():
    a = RngStream(42).child("x", 3).generator().standard_normal(5)
    b = RngStream(42).child("x", 3).generator().standard_normal(5)
    np.testing.assert_array_equal(a, b)


def test_rng_children_differ():
    a = RngStream(42).child("x", 3).generator().standard_normal(5)
    b = RngStream(42).child("x", 4).generator().standard_normal(5)
    c = RngStream(43).child("x", 3).generator().standard_normal(5)
    assert not np.allclose(a, b)
    assert not np.allclose(a, c)


def test_rng_string_and_large_int_keys():
    s = RngStream(7).child("role", 2**40)
    t = RngStream(7).child("role", 2**40)
    np.testing.assert_array_equal(
        s.generator().standard_normal(3), t.generator().standard_normal(3)
    )
