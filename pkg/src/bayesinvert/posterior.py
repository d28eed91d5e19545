"""Second inference stage: Wishart prior/proposal over the covariance, and
recycling of the stored samples into conditional, joint and marginal posterior
approximations, the marginal likelihood, credible intervals, and empirical-Bayes
selection of the Wishart degrees of freedom.

Nothing in this module evaluates the forward model: every likelihood value is
rebuilt from the stored residual blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, multigammaln

from .core import RngStream, SampleStore, SPDMatrix, spd_from_matrix
from .likelihood import GAUSSIAN, NoiseFamily, loglik_batch

__all__ = [
    "WishartParams",
    "wishart_logpdf",
    "sample_wishart",
    "choose_phi",
    "conditional_reweight",
    "JointApproximation",
    "joint_weights",
    "marginal_likelihood",
    "credible_interval",
    "select_nu",
]

_LOG_2 = np.log(2.0)


@dataclass(frozen=True)
class WishartParams:
    """Wishart degrees of freedom and K x K reference matrix.

    Requires nu >= K so that draws are non-singular with probability 1;
    the mean of the distribution is nu * phi.
    """

    nu: float
    phi: SPDMatrix

    def __post_init__(self):
        if self.nu < self.phi.k:
            raise ValueError("need nu >= K for non-singular Wishart draws")


def wishart_logpdf(sigma: SPDMatrix | np.ndarray, params: WishartParams) -> float:
    """Fully normalized Wishart log-density at ``sigma``."""
    if isinstance(sigma, SPDMatrix):
        log_det = sigma.log_det
        mat = sigma.matrix
    else:
        mat = np.asarray(sigma, dtype=float)
        sign, log_det = np.linalg.slogdet(mat)
        if sign <= 0:
            return -np.inf
    k = params.phi.k
    if mat.shape != (k, k):
        raise ValueError("dimension mismatch between sigma and phi")
    nu = params.nu
    trace_term = float(np.trace(params.phi.solve(mat)))
    log_norm = -0.5 * nu * k * _LOG_2 - 0.5 * nu * params.phi.log_det - multigammaln(0.5 * nu, k)
    return 0.5 * (nu - k - 1) * log_det - 0.5 * trace_term + log_norm


def sample_wishart(params: WishartParams, rng: RngStream | np.random.Generator) -> SPDMatrix:
    """Draw one matrix as the sum of nu outer products of N(0, phi) vectors.

    This is the integer-nu construction; non-integer nu is rejected here
    (the log-density accepts any nu >= K).
    """
    nu = params.nu
    if nu != int(nu):
        raise ValueError("the outer-product sampler requires integer nu")
    k = params.phi.k
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    z = gen.standard_normal((k, int(nu)))
    s = params.phi.chol @ z
    return spd_from_matrix(s @ s.T, jitter_policy="escalate")


def choose_phi(sigma_ml_final: SPDMatrix, nu: float) -> SPDMatrix:
    """Empirical-Bayes reference matrix phi = sigma_ml / nu (prior mean = sigma_ml)."""
    if nu < sigma_ml_final.k:
        raise ValueError("need nu >= K")
    return sigma_ml_final.scaled(1.0 / nu)


# ---------------------------------------------------------------------------
# Recycled particle approximations
# ---------------------------------------------------------------------------


def _log_rho_column(store: SampleStore, sigma: SPDMatrix, family: NoiseFamily) -> np.ndarray:
    """Unnormalized log rho for every stored sample against one covariance."""
    parts = []
    for rec in store.iterations:
        if rec.thetas.shape[0] == 0:
            continue
        ll = loglik_batch(rec.residual_blocks, sigma, family)
        parts.append(ll + rec.log_prior - rec.log_q)
    if not parts:
        raise ValueError("sample store holds no retained samples")
    return np.concatenate(parts)


def conditional_reweight(
    store: SampleStore,
    sigma: SPDMatrix,
    family: NoiseFamily = GAUSSIAN,
) -> np.ndarray:
    """Normalized weights of the stored cloud against p(theta | Y, Sigma).

    Likelihoods are rebuilt from the stored residual quadratic forms; the
    result sums to one over all retained (t, n) pairs.
    """
    log_rho = _log_rho_column(store, sigma, family)
    return np.exp(log_rho - logsumexp(log_rho))


@dataclass
class JointApproximation:
    """Factored weight table for the joint posterior over (theta, Sigma).

    ``log_rho`` is (S, J) over retained samples x covariance draws and
    ``log_gamma`` is the length-J prior/proposal correction, so the joint
    log-beta is their broadcast sum; marginals are exact sums of the
    normalized table.
    """

    iteration_index: np.ndarray
    thetas: np.ndarray
    sigma_samples: list[SPDMatrix]
    log_rho: np.ndarray
    log_gamma: np.ndarray
    alpha_bar: np.ndarray
    lambda_bar: np.ndarray
    log_marginal_likelihood: float
    n_total: int

    @property
    def j(self) -> int:
        return len(self.sigma_samples)

    def beta_bar(self) -> np.ndarray:
        """Dense normalized joint weights (S, J); prefer the marginals for large J."""
        log_beta = self.log_rho + self.log_gamma[None, :]
        return np.exp(log_beta - logsumexp(log_beta))


def joint_weights(
    store: SampleStore,
    sigma_samples: list[SPDMatrix],
    wishart_prior: WishartParams,
    wishart_proposal: WishartParams,
    family: NoiseFamily = GAUSSIAN,
    n_total: int | None = None,
) -> JointApproximation:
    """Joint, theta-marginal and Sigma-marginal weights from recycled samples.

    ``n_total`` is the nominal number of drawn theta samples (N*T*H); samples
    discarded by the retention rule are treated as carrying zero weight, which
    is what dividing the evidence by the full count assumes.
    """
    if len(sigma_samples) == 0:
        raise ValueError("need at least one covariance draw")
    stacked = store.stacked()
    log_rho = np.stack(
        [_log_rho_column(store, sig, family) for sig in sigma_samples], axis=1
    )
    log_gamma = np.array(
        [wishart_logpdf(sig, wishart_prior) - wishart_logpdf(sig, wishart_proposal)
         for sig in sigma_samples]
    )
    log_beta = log_rho + log_gamma[None, :]
    log_total = logsumexp(log_beta)
    alpha_bar = np.exp(logsumexp(log_beta, axis=1) - log_total)
    lambda_bar = np.exp(logsumexp(log_beta, axis=0) - log_total)
    if n_total is None:
        n_total = sum(rec.n_drawn for rec in store.iterations)
    log_ml = log_total - np.log(len(sigma_samples)) - np.log(n_total)
    return JointApproximation(
        iteration_index=stacked["iteration"],
        thetas=stacked["thetas"],
        sigma_samples=list(sigma_samples),
        log_rho=log_rho,
        log_gamma=log_gamma,
        alpha_bar=alpha_bar,
        lambda_bar=lambda_bar,
        log_marginal_likelihood=float(log_ml),
        n_total=int(n_total),
    )


def marginal_likelihood(joint: JointApproximation, n: int, t: int, j: int) -> float:
    """Log of the evidence estimate: log-sum of all beta minus ln(J N T)."""
    log_beta = joint.log_rho + joint.log_gamma[None, :]
    total = logsumexp(log_beta)
    if not np.isfinite(total):
        raise ValueError("all joint weights are zero")
    return float(total - np.log(j) - np.log(n) - np.log(t))


def credible_interval(
    sigma_samples: list[SPDMatrix],
    lambda_bar: np.ndarray,
    level: float = 0.95,
    n_resample: int | None = None,
    rng: RngStream | np.random.Generator | None = None,
) -> np.ndarray:
    """Entrywise credible intervals for the covariance, shape (K, K, 2).

    Resamples the covariance draws by their normalized weights, then takes
    empirical percentiles (linear interpolation) at (1-level)/2 and
    1-(1-level)/2 for every matrix entry.
    """
    if not (0.0 < level < 1.0):
        raise ValueError("level must be in (0, 1)")
    lam = np.asarray(lambda_bar, dtype=float)
    total = lam.sum()
    if total <= 0:
        raise ValueError("degenerate all-zero weights")
    lam = lam / total
    j = len(sigma_samples)
    if n_resample is None:
        n_resample = j
    if rng is None:
        rng = RngStream(0)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    counts = gen.multinomial(n_resample, lam)
    stacked = np.concatenate(
        [np.repeat(sig.matrix[None, :, :], c, axis=0) for sig, c in zip(sigma_samples, counts) if c]
    )
    lo = 100.0 * (1.0 - level) / 2.0
    hi = 100.0 - lo
    bounds = np.percentile(stacked, [lo, hi], axis=0)
    return np.stack([bounds[0], bounds[1]], axis=-1)


def select_nu(
    store: SampleStore,
    nu_grid: list[int],
    j_per_nu: int,
    rng: RngStream,
    family: NoiseFamily = GAUSSIAN,
    n_total: int | None = None,
) -> int:
    """Empirical-Bayes choice of the Wishart degrees of freedom.

    For each nu in the grid, sets phi = sigma_ml_final / nu, draws ``j_per_nu``
    matrices with proposal = prior (gamma = 1), and returns the nu that
    maximizes the estimated log-evidence (ties break to the smallest nu).
    Uses only stored residuals; the forward model is never touched.
    """
    if len(nu_grid) == 0:
        raise ValueError("nu grid is empty")
    sigma_final = store.sigma_ml_history[-1]
    best_nu, best_log_ml = None, -np.inf
    for nu in sorted(int(v) for v in nu_grid):
        if nu < sigma_final.k:
            raise ValueError("every grid nu must be >= K")
        params = WishartParams(nu, choose_phi(sigma_final, nu))
        gen = rng.child("select_nu", nu).generator()
        draws = [sample_wishart(params, gen) for _ in range(j_per_nu)]
        joint = joint_weights(store, draws, params, params, family, n_total=n_total)
        if joint.log_marginal_likelihood > best_log_ml:
            best_nu, best_log_ml = nu, joint.log_marginal_likelihood
    return int(best_nu)
