"""Log-likelihoods for Gaussian and elliptical (Student-t) noise, the
closed-form ML covariance, and the fixed-point scale-matrix estimator.

All likelihoods carry their full normalizing constants: estimating the
marginal likelihood later requires them, even though they cancel in
theta-inference.  Quadratic forms always go through factorization solves,
never through explicit inverses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import gammaln

from .core import Dataset, ForwardModel, LogPrior, SPDMatrix, residuals, spd_from_matrix

__all__ = [
    "NoiseFamily",
    "GAUSSIAN",
    "student_t",
    "gaussian_loglik",
    "gaussian_loglik_batch",
    "student_t_loglik",
    "student_t_loglik_batch",
    "loglik",
    "loglik_batch",
    "ml_covariance",
    "student_t_eta",
    "fixedpoint_scale",
    "estimate_scale",
    "log_posterior_cond",
    "NoConvergenceError",
]

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class NoiseFamily:
    """Noise-distribution tag: Gaussian, or multivariate Student-t with
    ``nu_t`` degrees of freedom (named to avoid a clash with the Wishart nu)."""

    kind: str
    nu_t: float | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "student_t"):
            raise ValueError(f"unknown noise family: {self.kind!r}")
        if self.kind == "student_t":
            if self.nu_t is None or self.nu_t <= 0:
                raise ValueError("student_t requires nu_t > 0")

    @property
    def is_gaussian(self) -> bool:
        return self.kind == "gaussian"


GAUSSIAN = NoiseFamily("gaussian")


def student_t(nu_t: float) -> NoiseFamily:
    return NoiseFamily("student_t", float(nu_t))


class NoConvergenceError(RuntimeError):
    """Fixed-point iteration exhausted max_iter; carries the last iterate."""

    def __init__(self, message: str, last_iterate: np.ndarray):
        super().__init__(message)
        self.last_iterate = last_iterate


def _check_residuals(res: np.ndarray, sigma: SPDMatrix) -> np.ndarray:
    res = np.asarray(res, dtype=float)
    if res.ndim != 2:
        raise ValueError("residuals must be a K x R matrix")
    if res.shape[0] != sigma.k:
        raise ValueError("residual row count must match covariance dimension")
    return res


# ---------------------------------------------------------------------------
# Gaussian likelihood
# ---------------------------------------------------------------------------


def gaussian_loglik(res: np.ndarray, sigma: SPDMatrix) -> float:
    """Full Gaussian log-likelihood of a K x R residual matrix.

    Returns -(R K / 2) ln(2 pi) - (R / 2) ln|Sigma| - (1/2) sum_r e_r^T Sigma^{-1} e_r.
    """
    res = _check_residuals(res, sigma)
    k, r = res.shape
    quad = float(np.sum(sigma.quad_forms(res)))
    return -0.5 * (r * k * _LOG_2PI + r * sigma.log_det + quad)


def gaussian_loglik_batch(res: np.ndarray, sigma: SPDMatrix) -> np.ndarray:
    """Vectorized :func:`gaussian_loglik` over a (S, K, R) residual tensor."""
    res = np.asarray(res, dtype=float)
    s, k, r = res.shape
    quad = sigma.quad_forms_tensor(res)
    return -0.5 * (r * k * _LOG_2PI + r * sigma.log_det + quad)


# ---------------------------------------------------------------------------
# Multivariate Student-t likelihood
# ---------------------------------------------------------------------------


def _t_const(nu_t: float, k: int) -> float:
    return (
        gammaln(0.5 * (nu_t + k))
        - gammaln(0.5 * nu_t)
        - 0.5 * k * np.log(nu_t * np.pi)
    )


def student_t_loglik(res: np.ndarray, sigma: SPDMatrix, nu_t: float) -> float:
    """Sum over columns of the full multivariate-t log-density with scale Sigma."""
    if nu_t <= 0:
        raise ValueError("nu_t must be positive")
    res = _check_residuals(res, sigma)
    k, r = res.shape
    quads = sigma.quad_forms(res)
    return float(
        r * (_t_const(nu_t, k) - 0.5 * sigma.log_det)
        - 0.5 * (nu_t + k) * np.sum(np.log1p(quads / nu_t))
    )


def student_t_loglik_batch(res: np.ndarray, sigma: SPDMatrix, nu_t: float) -> np.ndarray:
    if nu_t <= 0:
        raise ValueError("nu_t must be positive")
    res = np.asarray(res, dtype=float)
    s, k, r = res.shape
    quads = sigma.quad_forms_tensor(res, per_column=True)
    return r * (_t_const(nu_t, k) - 0.5 * sigma.log_det) - 0.5 * (nu_t + k) * np.sum(
        np.log1p(quads / nu_t), axis=1
    )


def loglik(res: np.ndarray, sigma: SPDMatrix, family: NoiseFamily) -> float:
    if family.is_gaussian:
        return gaussian_loglik(res, sigma)
    return student_t_loglik(res, sigma, family.nu_t)


def loglik_batch(res: np.ndarray, sigma: SPDMatrix, family: NoiseFamily) -> np.ndarray:
    if family.is_gaussian:
        return gaussian_loglik_batch(res, sigma)
    return student_t_loglik_batch(res, sigma, family.nu_t)


# ---------------------------------------------------------------------------
# Scale / covariance estimators
# ---------------------------------------------------------------------------


def ml_covariance(res: np.ndarray) -> np.ndarray:
    """Closed-form Gaussian ML covariance (1/R) sum_r e_r e_r^T (symmetric PSD).

    The caller converts the result through :func:`~bayesinvert.core.spd_from_matrix`;
    rank-deficient residuals (small R, exact fits) may need the escalate policy.
    """
    res = np.asarray(res, dtype=float)
    if res.ndim != 2 or res.shape[1] < 1:
        raise ValueError("residuals must be a K x R matrix with R >= 1")
    cov = res @ res.T / res.shape[1]
    return 0.5 * (cov + cov.T)


def student_t_eta(nu_t: float, k: int) -> Callable[[np.ndarray], np.ndarray]:
    """Weight function eta(s) = (nu_t + K) / (nu_t + s) for the t scale fixed point.

    Derived analytically from h(s) = (1 + s/nu_t)^{-(nu_t+K)/2} via
    eta(s) = -2 h'(s) / h(s).
    """
    if nu_t <= 0:
        raise ValueError("nu_t must be positive")

    def eta(s: np.ndarray) -> np.ndarray:
        return (nu_t + k) / (nu_t + s)

    return eta


def fixedpoint_scale(
    res: np.ndarray,
    eta: Callable[[np.ndarray], np.ndarray],
    sigma0: SPDMatrix,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> SPDMatrix:
    """Fixed-point scale-matrix estimator for elliptically contoured noise.

    Iterates Sigma_k = (1/R) sum_r eta(e_r^T Sigma_{k-1}^{-1} e_r) e_r e_r^T
    until the relative Frobenius change drops below ``tol``.  With eta == 1
    this reproduces the Gaussian ML covariance exactly.  Raises
    :class:`NoConvergenceError` (last iterate attached) if ``max_iter`` is hit.
    """
    res = _check_residuals(res, sigma0)
    k, r = res.shape
    current = sigma0
    prev = sigma0.matrix
    for _ in range(max_iter):
        weights = np.asarray(eta(current.quad_forms(res)), dtype=float)
        if np.any(weights <= 0):
            raise ValueError("eta must be positive on [0, inf)")
        nxt = (res * weights) @ res.T / r
        nxt = 0.5 * (nxt + nxt.T)
        denom = np.linalg.norm(prev, "fro")
        if denom > 0 and np.linalg.norm(nxt - prev, "fro") / denom < tol:
            return spd_from_matrix(nxt, jitter_policy="escalate")
        prev = nxt
        current = spd_from_matrix(nxt, jitter_policy="escalate")
    raise NoConvergenceError(f"no convergence after {max_iter} iterations", prev)


def estimate_scale(res: np.ndarray, family: NoiseFamily, sigma0: SPDMatrix) -> np.ndarray:
    """ML covariance (Gaussian) or fixed-point scale (Student-t) for residuals.

    Returns a raw symmetric matrix; samplers convert via spd_from_matrix.
    """
    if family.is_gaussian:
        return ml_covariance(res)
    eta = student_t_eta(family.nu_t, res.shape[0])
    return fixedpoint_scale(res, eta, sigma0).matrix


# ---------------------------------------------------------------------------
# Conditional posterior
# ---------------------------------------------------------------------------


def log_posterior_cond(
    model: ForwardModel,
    theta: np.ndarray,
    data: Dataset,
    sigma: SPDMatrix,
    prior: LogPrior,
    family: NoiseFamily = GAUSSIAN,
) -> float:
    """Unnormalized log conditional posterior log l(Y | Sigma, theta) + log g(theta).

    Returns -inf outside the prior support without evaluating the model.
    """
    lp = prior(theta)
    if lp == -np.inf:
        return -np.inf
    return loglik(residuals(model, theta, data), sigma, family) + lp
