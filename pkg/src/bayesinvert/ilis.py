"""Inverted layered importance sampling: covariance draws in the upper layer,
MCMC chains on the implied conditional posteriors below, and per-matrix
weights built from normalizing-constant estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import chi2

from .core import Dataset, ForwardModel, LogPrior, RngStream, SPDMatrix
from .likelihood import GAUSSIAN, NoiseFamily, loglik
from .mcmc import ChainRecord, mh_conditional
from .posterior import WishartParams, sample_wishart, wishart_logpdf

__all__ = ["DegenerateChainError", "IlisOutput", "estimate_log_z", "run_ilis"]

_LOG_2PI = np.log(2.0 * np.pi)


class DegenerateChainError(ValueError):
    """Chain states are too degenerate to fit the instrumental density."""


def estimate_log_z(states: np.ndarray, log_target_values: np.ndarray) -> float:
    """Reciprocal-importance (Gelfand-Dey) estimate of the log normalizing constant.

    Fits a moment-matched Gaussian to the chain (covariance inflated by a
    1e-6 diagonal floor), truncates it to its 99% ellipsoid, and returns
    ``-log mean exp(log phi - log pi)`` over the states, with states outside
    the ellipsoid contributing zero.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    values = np.asarray(log_target_values, dtype=float)
    s, m = states.shape
    if s < 2 * m:
        raise ValueError("need at least 2*M chain states")
    if np.all(np.ptp(states, axis=0) == 0.0):
        raise DegenerateChainError("all chain states are identical")
    mean = states.mean(axis=0)
    cov = np.cov(states.T, bias=True).reshape(m, m) + 1e-6 * np.eye(m)
    chol = np.linalg.cholesky(cov)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    centered = states - mean
    white = np.linalg.solve(chol, centered.T)
    quads = np.sum(white * white, axis=0)
    radius2 = chi2.ppf(0.99, df=m)
    inside = quads <= radius2
    if not np.any(inside):
        raise DegenerateChainError("no chain state falls inside the 99% ellipsoid")
    log_phi = -0.5 * (m * _LOG_2PI + log_det + quads[inside]) - np.log(0.99)
    terms = log_phi - values[inside]
    # States outside the ellipsoid contribute exp(-inf) = 0 but still count in S.
    log_recip = logsumexp(terms) - np.log(s)
    return float(-log_recip)


@dataclass
class IlisOutput:
    """Per-draw covariance matrices, chains, and their normalized weights."""

    sigma_samples: list[SPDMatrix]
    chains: list[ChainRecord]
    log_z: np.ndarray
    log_gamma: np.ndarray
    gamma_bar: np.ndarray
    burn_in: int
    n_evaluations: float

    def theta_mean(self) -> np.ndarray:
        """gamma-weighted average of the per-chain posterior means."""
        means = np.stack([c.thetas.mean(axis=0) for c in self.chains])
        return self.gamma_bar @ means

    def sigma_mean(self) -> np.ndarray:
        mats = np.stack([s.matrix for s in self.sigma_samples])
        return np.einsum("j,jkl->kl", self.gamma_bar, mats)

    def theta_map_estimate(self, sigma_log_prior=None) -> np.ndarray:
        """State maximizing the joint unnormalized log-density over all chains."""
        best, best_val = None, -np.inf
        for j, chain in enumerate(self.chains):
            extra = 0.0 if sigma_log_prior is None else sigma_log_prior(self.sigma_samples[j])
            i = int(np.argmax(chain.log_targets))
            val = chain.log_targets[i] + extra
            if val > best_val:
                best, best_val = chain.thetas[i], val
        return np.asarray(best)


def run_ilis(
    j: int,
    chain_length: int,
    burn_in: int,
    wishart_proposal: WishartParams,
    wishart_prior: WishartParams,
    mh_proposal_cov: np.ndarray,
    model: ForwardModel,
    data: Dataset,
    prior: LogPrior,
    family: NoiseFamily = GAUSSIAN,
    rng: RngStream | None = None,
    init_theta: np.ndarray | None = None,
) -> IlisOutput:
    """Draw J covariance matrices, run one conditional chain per draw, and
    weight every chain by its estimated constant times prior/proposal ratio.

    Chains run ``burn_in + chain_length`` steps; the burn-in prefix is
    discarded before both the constant estimate and the output.
    """
    if rng is None:
        rng = RngStream(0)
    if init_theta is None:
        init_theta = np.zeros(model.m)
    eval_start = model.eval_count
    sigma_samples: list[SPDMatrix] = []
    chains: list[ChainRecord] = []
    log_z = np.empty(j)
    log_gamma = np.empty(j)
    for jj in range(j):
        sigma = sample_wishart(wishart_proposal, rng.child("ilis", jj, "sigma").generator())

        def log_target(theta, _sigma=sigma):
            lp = prior(theta)
            if lp == -np.inf:
                return -np.inf
            from .core import residuals as _residuals

            res = _residuals(model, theta, data)
            if not np.all(np.isfinite(res)):
                return -np.inf
            return loglik(res, _sigma, family) + lp

        try:
            chain = mh_conditional(
                log_target,
                init_theta,
                mh_proposal_cov,
                burn_in + chain_length,
                rng.child("ilis", jj, "chain"),
            )
        except Exception as exc:
            raise RuntimeError(f"chain {jj} failed: {exc}") from exc
        kept = ChainRecord(
            thetas=chain.thetas[burn_in:],
            log_targets=chain.log_targets[burn_in:],
            accepts=chain.accepts,
            proposals=chain.proposals,
        )
        log_z[jj] = estimate_log_z(kept.thetas, kept.log_targets)
        log_gamma[jj] = (
            log_z[jj]
            + wishart_logpdf(sigma, wishart_prior)
            - wishart_logpdf(sigma, wishart_proposal)
        )
        sigma_samples.append(sigma)
        chains.append(kept)
    gamma_bar = np.exp(log_gamma - logsumexp(log_gamma))
    return IlisOutput(
        sigma_samples=sigma_samples,
        chains=chains,
        log_z=log_z,
        log_gamma=log_gamma,
        gamma_bar=gamma_bar,
        burn_in=burn_in,
        n_evaluations=model.eval_count - eval_start,
    )
