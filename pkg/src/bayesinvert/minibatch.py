"""Mini-batch variants of the adaptive sampler.

Strategy 1 runs the standard loop against per-batch sub-posteriors and
re-scores the candidate sequence on the full posterior at the end.
Strategy 2 never evaluates the full posterior: each batch contributes a local
Gaussian approximation (argmax, weighted covariance with the exploration
floor pinned at its minimum), fused by precision-weighted products into the
running MAP estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .atais import (
    AtaisConfig,
    AtaisOutput,
    adapt_delta,
    adapt_proposal,
    ess,
    proposal_logpdf,
    retain_relevant,
    run_atais,
    sample_proposal,
    _normalize,
)
from .core import (
    Dataset,
    ForwardModel,
    IterationRecord,
    LogPrior,
    RngStream,
    SampleStore,
    SPDMatrix,
    residuals,
    spd_from_matrix,
    spd_identity,
)
from .likelihood import GAUSSIAN, gaussian_loglik, gaussian_loglik_batch, ml_covariance

__all__ = [
    "BatchPlan",
    "make_batch_plan",
    "subposterior_logpdf",
    "gaussian_product",
    "run_atais_minibatch",
]


@dataclass(frozen=True)
class BatchPlan:
    """Disjoint equal-size partition of the observation columns."""

    l: int
    partition: tuple
    mode: str

    def __post_init__(self):
        if self.mode not in ("strategy1", "strategy2"):
            raise ValueError("mode must be 'strategy1' or 'strategy2'")
        seen = np.concatenate([np.asarray(p) for p in self.partition])
        r = seen.size
        if r % self.l != 0 or len(self.partition) != r // self.l:
            raise ValueError("R must be divisible by L with R/L batches")
        if any(len(p) != self.l for p in self.partition):
            raise ValueError("every batch must have exactly L columns")
        if len(np.unique(seen)) != r or seen.min() != 0 or seen.max() != r - 1:
            raise ValueError("batches must partition {0..R-1}")

    @property
    def n_batches(self) -> int:
        return len(self.partition)


def make_batch_plan(r: int, l: int, mode: str, rng: RngStream) -> BatchPlan:
    """Randomly permute the columns and cut them into contiguous blocks of L."""
    if r % l != 0:
        raise ValueError("R must be divisible by L")
    perm = rng.child("batch_plan").generator().permutation(r)
    parts = tuple(np.sort(perm[i * l:(i + 1) * l]) for i in range(r // l))
    return BatchPlan(l=l, partition=parts, mode=mode)


def subposterior_logpdf(
    theta: np.ndarray,
    batch_indices: np.ndarray,
    sigma: SPDMatrix,
    model: ForwardModel,
    data: Dataset,
    prior: LogPrior,
    prior_power: float = 1.0,
) -> float:
    """Log sub-posterior over the given columns with a tempered prior.

    With all columns and power one this equals the full conditional
    log-posterior; with disjoint batches and powers 1/T the batch values add
    up to the full one.
    """
    batch_indices = np.asarray(batch_indices)
    if batch_indices.size == 0:
        raise ValueError("batch is empty")
    lp = prior(theta)
    if lp == -np.inf:
        return -np.inf
    res = residuals(model, theta, data, cols=batch_indices)
    return gaussian_loglik(res, sigma) + prior_power * lp


def gaussian_product(
    means: list[np.ndarray], covs: list[SPDMatrix]
) -> tuple[np.ndarray, SPDMatrix]:
    """Precision-weighted fusion of Gaussian components.

    Returns the product-density mean and covariance: the fused precision is
    the sum of component precisions, and the mean solves it against the
    precision-weighted component means.
    """
    if len(means) == 0 or len(means) != len(covs):
        raise ValueError("need at least one (mean, cov) pair")
    m = np.asarray(means[0], dtype=float).shape[0]
    eye = np.eye(m)
    prec_total = np.zeros((m, m))
    weighted = np.zeros(m)
    for mu, cov in zip(means, covs):
        prec = cov.solve(eye)
        prec_total += prec
        weighted += prec @ np.asarray(mu, dtype=float)
    prec_spd = spd_from_matrix(0.5 * (prec_total + prec_total.T), "escalate")
    mean = prec_spd.solve(weighted)
    cov_total = prec_spd.solve(eye)
    return mean, spd_from_matrix(0.5 * (cov_total + cov_total.T), "escalate")


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


def run_atais_minibatch(
    config: AtaisConfig,
    plan: BatchPlan,
    model: ForwardModel,
    data: Dataset,
    prior: LogPrior,
    rng: RngStream | None = None,
    sigma0: SPDMatrix | None = None,
) -> AtaisOutput:
    """Mini-batch run consuming one batch per iteration (Gaussian noise)."""
    if config.t != plan.n_batches:
        raise ValueError("config.t must equal the number of batches")
    if config.h != 1:
        raise ValueError("mini-batch runs use a single proposal")
    if rng is None:
        rng = RngStream(0)
    if plan.mode == "strategy1":
        return _run_strategy1(config, plan, model, data, prior, rng, sigma0)
    return _run_strategy2(config, plan, model, data, prior, rng, sigma0)


def _run_strategy1(config, plan, model, data, prior, rng, sigma0) -> AtaisOutput:
    out = run_atais(
        config,
        model,
        data,
        prior,
        GAUSSIAN,
        rng,
        sigma0=sigma0,
        final_correction=False,
        _subtarget=lambda t: (plan.partition[t - 1], 1.0),
    )
    eval_start = model.eval_count

    # Re-score the distinct candidate sequence on the full posterior.
    candidates = []
    for theta, sigma in zip(out.store.theta_map_history, out.store.sigma_ml_history):
        if np.any(np.isnan(theta)):
            continue
        if candidates and np.array_equal(candidates[-1][0], theta):
            continue
        candidates.append((theta, sigma))
    best_score, best_theta = -np.inf, None
    for theta, sigma in candidates:
        res = residuals(model, theta, data)
        score = gaussian_loglik(res, sigma) + prior(theta)
        if score > best_score:
            best_score, best_theta = score, theta
    sigma_final = spd_from_matrix(
        ml_covariance(residuals(model, best_theta, data)), "escalate"
    )

    # Full-data residual blocks for the retained samples, so the final
    # correction (and any later recycling) runs against the full posterior.
    for rec in out.store.iterations:
        if rec.thetas.shape[0] == 0:
            continue
        preds = model.predict_batch(rec.thetas, data)
        rec.residual_blocks = data.observations[None, :, :] - preds
    from .atais import final_reweight

    corrected = final_reweight(out.store, sigma_final, GAUSSIAN)
    out.theta_map = np.asarray(best_theta, dtype=float)
    out.sigma_ml = sigma_final
    out.corrected_log_weights = corrected
    out.n_evaluations += model.eval_count - eval_start
    return out


def _run_strategy2(config, plan, model, data, prior, rng, sigma0) -> AtaisOutput:
    k = data.k
    sigma_ml = sigma0 if sigma0 is not None else spd_identity(k)
    mu = config.mu1.copy()
    lam = spd_from_matrix(config.lam1, "escalate")
    delta = config.delta0
    t_total = plan.n_batches
    prior_power = 1.0 / t_total

    store = SampleStore(n_per_iteration=config.n)
    fusion_means: list[np.ndarray] = []
    fusion_covs: list[SPDMatrix] = []
    fused_mean, fused_cov = None, None
    theta_traj, sigma_traj, delta_traj, ess_traj = [], [], [], []
    eval_start = model.eval_count

    for t in range(1, t_total + 1):
        cols = np.asarray(plan.partition[t - 1])
        gen = rng.child("atais", t, 0).generator()
        draws = sample_proposal(config.n, mu, lam, gen, config.proposal_family, config.proposal_dof)
        log_prior_vals = prior.batch(draws) * prior_power
        obs = data.observations[:, cols]
        log_tgt = np.full(config.n, -np.inf)
        res_blocks = np.zeros((config.n, k, cols.size))
        inside = np.flatnonzero(np.isfinite(log_prior_vals))
        if inside.size:
            preds = model.predict_batch(draws[inside], data, cols)
            blocks = obs[None, :, :] - preds
            ok = np.all(np.isfinite(blocks), axis=(1, 2))
            blocks[~ok] = 0.0
            res_blocks[inside] = blocks
            vals = np.full(inside.size, -np.inf)
            if np.any(ok):
                vals[ok] = gaussian_loglik_batch(blocks[ok], sigma_ml) + log_prior_vals[inside][ok]
            log_tgt[inside] = vals
        log_q = proposal_logpdf(draws, mu, lam, config.proposal_family, config.proposal_dof)
        log_w = log_tgt - log_q
        w_bar = _normalize(log_w)
        any_finite = bool(np.any(np.isfinite(log_tgt)))
        ess_traj.append(ess(w_bar) if any_finite else np.nan)

        if any_finite:
            i = int(np.argmax(log_tgt))
            theta_max = draws[i]
            _, lam_tau = adapt_proposal(draws, w_bar, theta_max, config.delta_min)
            fusion_means.append(theta_max)
            fusion_covs.append(spd_from_matrix(lam_tau, "escalate"))
            fused_mean, fused_cov = gaussian_product(fusion_means, fusion_covs)
            sigma_ml = spd_from_matrix(
                ml_covariance(residuals(model, fused_mean, data)), "escalate"
            )
            mu, lam_new = adapt_proposal(draws, w_bar, fused_mean, delta)
            lam = spd_from_matrix(lam_new, "escalate")
        else:
            delta = config.delta0

        keep = (
            retain_relevant(w_bar, config.n)
            if config.retention == "relevant"
            else np.flatnonzero(np.isfinite(log_w))
        )
        store.iterations.append(
            IterationRecord(
                mu=mu.copy(), lam=lam, sigma=sigma_ml, delta=delta,
                thetas=draws[keep], log_weights=log_w[keep], log_q=log_q[keep],
                log_target=log_tgt[keep], log_prior=log_prior_vals[keep],
                residual_blocks=res_blocks[keep], n_drawn=config.n, ess=ess_traj[-1],
            )
        )
        store.sigma_ml_history.append(sigma_ml)
        store.theta_map_history.append(
            fused_mean.copy() if fused_mean is not None else np.full(mu.shape, np.nan)
        )
        theta_traj.append(store.theta_map_history[-1])
        sigma_traj.append(sigma_ml.matrix)
        delta_traj.append(delta)
        delta = adapt_delta(delta, config.delta0, config.a, config.delta_min)

    if fused_mean is None:
        raise RuntimeError("no batch produced a finite sub-posterior value")
    return AtaisOutput(
        theta_map=fused_mean,
        sigma_ml=sigma_ml,
        store=store,
        corrected_log_weights=store.stacked()["log_weights"],
        theta_map_traj=np.stack(theta_traj),
        sigma_ml_traj=np.stack(sigma_traj),
        delta_traj=np.array(delta_traj),
        ess_traj=np.array(ess_traj),
        n_evaluations=model.eval_count - eval_start,
        fused_mean=fused_mean,
        fused_cov=fused_cov,
    )
