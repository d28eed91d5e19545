"""Random-walk MCMC baselines for the comparison study: a conditional-space
chain with fixed covariance, joint chains over (theta, Sigma) with Wishart
random-walk covariance moves, an adaptive variant, and MH-within-Gibbs.

The acceptance step and the Wishart proposal-density correction are factored
into small helpers so their correctness can be pinned on a two-state toy
kernel independently of the full samplers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (
    Dataset,
    ForwardModel,
    LogPrior,
    RngStream,
    SPDMatrix,
    residuals,
    spd_from_matrix,
)
from .likelihood import GAUSSIAN, NoiseFamily, loglik
from .posterior import WishartParams, sample_wishart, wishart_logpdf

__all__ = [
    "ChainRecord",
    "mh_accept",
    "wishart_rw_log_q",
    "flat_spd_log_prior",
    "mh_conditional",
    "mh_joint",
    "adaptive_mh",
    "mh_within_gibbs",
]


@dataclass
class ChainRecord:
    """States, log-target values and acceptance bookkeeping for one chain."""

    thetas: np.ndarray
    log_targets: np.ndarray
    sigmas: np.ndarray | None = None
    accepts: dict = field(default_factory=dict)
    proposals: dict = field(default_factory=dict)
    spd_rejections: int = 0

    def acceptance_rate(self, block: str = "theta") -> float:
        return self.accepts.get(block, 0) / max(1, self.proposals.get(block, 0))


def mh_accept(log_alpha: float, gen: np.random.Generator) -> bool:
    """Metropolis-Hastings accept/reject in the log domain."""
    if log_alpha >= 0.0:
        return True
    if log_alpha == -np.inf:
        return False
    return np.log(gen.random()) < log_alpha


def wishart_rw_log_q(to: SPDMatrix, frm: SPDMatrix, nu: float) -> float:
    """Log density of the random-walk move q(to | frm) = Wishart(to; nu, frm/nu)."""
    return wishart_logpdf(to, WishartParams(nu, frm.scaled(1.0 / nu)))


def flat_spd_log_prior(sigma: SPDMatrix) -> float:
    """Improper flat prior over SPD matrices (support enforced by the proposals)."""
    return 0.0


# ---------------------------------------------------------------------------
# Conditional-space chain
# ---------------------------------------------------------------------------


def mh_conditional(
    log_target: Callable[[np.ndarray], float],
    init: np.ndarray,
    proposal_cov: np.ndarray,
    t: int,
    rng: RngStream | np.random.Generator,
) -> ChainRecord:
    """Random-walk Gaussian MH targeting log pi(theta) with Sigma held fixed."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    theta = np.asarray(init, dtype=float).copy()
    current = float(log_target(theta))
    if current == -np.inf:
        raise ValueError("initial state is outside the target support")
    chol = np.linalg.cholesky(np.asarray(proposal_cov, dtype=float))
    thetas = np.empty((t, theta.shape[0]))
    logs = np.empty(t)
    accepts = 0
    for i in range(t):
        prop = theta + chol @ gen.standard_normal(theta.shape[0])
        cand = float(log_target(prop))
        if mh_accept(cand - current, gen):
            theta, current = prop, cand
            accepts += 1
        thetas[i] = theta
        logs[i] = current
    return ChainRecord(
        thetas=thetas,
        log_targets=logs,
        accepts={"theta": accepts},
        proposals={"theta": t},
    )


# ---------------------------------------------------------------------------
# Joint-space chains
# ---------------------------------------------------------------------------


def _safe_loglik(res, sigma, family) -> float:
    if res is None or not np.all(np.isfinite(res)):
        return -np.inf
    return loglik(res, sigma, family)


def _joint_log_target(res, sigma, theta, prior, sigma_prior, family):
    return _safe_loglik(res, sigma, family) + prior(theta) + sigma_prior(sigma)


def mh_joint(
    model: ForwardModel,
    data: Dataset,
    prior: LogPrior,
    theta_scale_a: float,
    wishart_rw_dof: float,
    t: int,
    rng: RngStream,
    init_theta: np.ndarray,
    init_sigma: SPDMatrix,
    sigma_prior: Callable[[SPDMatrix], float] = flat_spd_log_prior,
    family: NoiseFamily = GAUSSIAN,
) -> ChainRecord:
    """Joint random-walk chain: theta' ~ N(theta, a I), Sigma' ~ Wishart(nu, Sigma/nu).

    The acceptance ratio includes the asymmetric Wishart proposal-density
    correction q(Sigma | Sigma') / q(Sigma' | Sigma); the Gaussian theta move
    is symmetric and cancels.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    k, m = data.k, model.m
    theta = np.asarray(init_theta, dtype=float).copy()
    sigma = init_sigma
    res = residuals(model, theta, data)
    current = _joint_log_target(res, sigma, theta, prior, sigma_prior, family)
    step = np.sqrt(theta_scale_a)
    thetas = np.empty((t, m))
    sigmas = np.empty((t, k, k))
    logs = np.empty(t)
    accepts = 0
    for i in range(t):
        theta_p = theta + step * gen.standard_normal(m)
        sigma_p = sample_wishart(WishartParams(wishart_rw_dof, sigma.scaled(1.0 / wishart_rw_dof)), gen)
        lp = prior(theta_p)
        if lp == -np.inf:
            log_alpha = -np.inf
            res_p = None
        else:
            res_p = residuals(model, theta_p, data)
            cand = _safe_loglik(res_p, sigma_p, family) + lp + sigma_prior(sigma_p)
            correction = wishart_rw_log_q(sigma, sigma_p, wishart_rw_dof) - wishart_rw_log_q(
                sigma_p, sigma, wishart_rw_dof
            )
            log_alpha = cand - current + correction
        if mh_accept(log_alpha, gen):
            theta, sigma, res, current = theta_p, sigma_p, res_p, cand
            accepts += 1
        thetas[i] = theta
        sigmas[i] = sigma.matrix
        logs[i] = current
    return ChainRecord(
        thetas=thetas,
        log_targets=logs,
        sigmas=sigmas,
        accepts={"joint": accepts},
        proposals={"joint": t},
    )


def adaptive_mh(
    model: ForwardModel,
    data: Dataset,
    prior: LogPrior,
    wishart_rw_dof: float,
    t: int,
    rng: RngStream,
    init_theta: np.ndarray,
    init_sigma: SPDMatrix,
    sigma_prior: Callable[[SPDMatrix], float] = flat_spd_log_prior,
    family: NoiseFamily = GAUSSIAN,
    update_every: int = 100,
    cov_floor: float = 1e-6,
) -> ChainRecord:
    """Joint chain whose theta proposal covariance tracks the chain history.

    The covariance is frozen between refreshes (every ``update_every`` steps,
    from the empirical covariance of all past theta states plus a small
    diagonal floor); the Sigma move matches :func:`mh_joint`.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    k, m = data.k, model.m
    theta = np.asarray(init_theta, dtype=float).copy()
    sigma = init_sigma
    res = residuals(model, theta, data)
    current = _joint_log_target(res, sigma, theta, prior, sigma_prior, family)
    chol = np.eye(m)
    thetas = np.empty((t, m))
    sigmas = np.empty((t, k, k))
    logs = np.empty(t)
    accepts = 0
    for i in range(t):
        if i > 0 and i % update_every == 0:
            hist = thetas[:i]
            cov = np.cov(hist.T, bias=True).reshape(m, m) + cov_floor * np.eye(m)
            chol = np.linalg.cholesky(cov)
        theta_p = theta + chol @ gen.standard_normal(m)
        sigma_p = sample_wishart(WishartParams(wishart_rw_dof, sigma.scaled(1.0 / wishart_rw_dof)), gen)
        lp = prior(theta_p)
        if lp == -np.inf:
            log_alpha = -np.inf
        else:
            res_p = residuals(model, theta_p, data)
            cand = _safe_loglik(res_p, sigma_p, family) + lp + sigma_prior(sigma_p)
            correction = wishart_rw_log_q(sigma, sigma_p, wishart_rw_dof) - wishart_rw_log_q(
                sigma_p, sigma, wishart_rw_dof
            )
            log_alpha = cand - current + correction
        if mh_accept(log_alpha, gen):
            theta, sigma, res, current = theta_p, sigma_p, res_p, cand
            accepts += 1
        thetas[i] = theta
        sigmas[i] = sigma.matrix
        logs[i] = current
    return ChainRecord(
        thetas=thetas,
        log_targets=logs,
        sigmas=sigmas,
        accepts={"joint": accepts},
        proposals={"joint": t},
    )


def mh_within_gibbs(
    model: ForwardModel,
    data: Dataset,
    prior: LogPrior,
    inner_steps: int,
    t: int,
    rng: RngStream,
    init_theta: np.ndarray,
    init_sigma: SPDMatrix,
    sigma_prior: Callable[[SPDMatrix], float] = flat_spd_log_prior,
    family: NoiseFamily = GAUSSIAN,
    theta_step_sd: float = 1.0,
    sigma_step_sd: float = 0.1,
) -> ChainRecord:
    """Blockwise sampler: per outer step, ``inner_steps`` random-walk MH moves
    on theta (unit-variance Gaussian proposal), then ``inner_steps`` symmetric
    entrywise perturbations of the covariance upper triangle (mirrored to stay
    symmetric), rejecting non-positive-definite proposals outright.

    The Sigma block reuses the residuals at the current theta, so only the
    theta block consumes forward-model evaluations.
    """
    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    k, m = data.k, model.m
    theta = np.asarray(init_theta, dtype=float).copy()
    sigma = init_sigma
    res = residuals(model, theta, data)
    current = _joint_log_target(res, sigma, theta, prior, sigma_prior, family)
    thetas = np.empty((t, m))
    sigmas = np.empty((t, k, k))
    logs = np.empty(t)
    accepts = {"theta": 0, "sigma": 0}
    proposals = {"theta": 0, "sigma": 0}
    spd_rejections = 0
    iu = np.triu_indices(k)
    for i in range(t):
        for _ in range(inner_steps):
            proposals["theta"] += 1
            theta_p = theta + theta_step_sd * gen.standard_normal(m)
            lp = prior(theta_p)
            if lp == -np.inf:
                continue
            res_p = residuals(model, theta_p, data)
            cand = _safe_loglik(res_p, sigma, family) + lp + sigma_prior(sigma)
            if mh_accept(cand - current, gen):
                theta, res, current = theta_p, res_p, cand
                accepts["theta"] += 1
        for _ in range(inner_steps):
            proposals["sigma"] += 1
            pert = np.zeros((k, k))
            pert[iu] = sigma_step_sd * gen.standard_normal(len(iu[0]))
            pert = pert + np.triu(pert, 1).T
            try:
                sigma_p = spd_from_matrix(sigma.matrix + pert, jitter_policy="reject")
            except Exception:
                spd_rejections += 1
                continue
            cand = _safe_loglik(res, sigma_p, family) + prior(theta) + sigma_prior(sigma_p)
            if mh_accept(cand - current, gen):
                sigma, current = sigma_p, cand
                accepts["sigma"] += 1
        thetas[i] = theta
        sigmas[i] = sigma.matrix
        logs[i] = current
    return ChainRecord(
        thetas=thetas,
        log_targets=logs,
        sigmas=sigmas,
        accepts=accepts,
        proposals=proposals,
        spd_rejections=spd_rejections,
    )
