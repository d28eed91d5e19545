"""Adaptive importance sampling over a sequence of adaptive conditional posteriors.

One run alternates, per iteration: draw from the current proposal, weight
against the conditional posterior indexed by the running ML covariance,
update the running MAP/ML pair from the weighted cloud, move the proposal to
the MAP and rebuild its covariance from the weighted samples plus a cyclic
exploration floor.  Residual matrices of retained samples are stored so the
final weight correction (and the whole second inference stage) never
re-evaluates the forward model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .core import (
    Dataset,
    ForwardModel,
    IterationRecord,
    LogPrior,
    RngStream,
    SampleStore,
    SPDMatrix,
    spd_from_matrix,
    spd_identity,
)
from .likelihood import GAUSSIAN, NoiseFamily, estimate_scale, loglik, loglik_batch, ml_covariance

__all__ = [
    "AtaisConfig",
    "AtaisState",
    "AtaisOutput",
    "proposal_logpdf",
    "sample_proposal",
    "is_log_weights",
    "current_max",
    "global_max_update",
    "adapt_proposal",
    "adapt_delta",
    "retain_relevant",
    "ess",
    "final_reweight",
    "run_atais",
]

_LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AtaisConfig:
    """Sampler settings.

    ``n`` samples per iteration and proposal, ``t`` iterations, ``t0`` warm-up
    iterations that keep the target covariance at the identity, cyclic
    exploration schedule (delta0, a, delta_min), proposal family, weight
    denominator mode (standard, or mixture with the eps discard rule), sample
    retention policy, and the number of parallel proposals ``h``.
    """

    n: int
    t: int
    mu1: np.ndarray = None
    lam1: np.ndarray = None
    t0: int = 0
    delta0: float = 1.0
    a: float = 0.1
    delta_min: float = 1e-6
    proposal_family: str = "gaussian"
    proposal_dof: float = 5.0
    weight_denominator: str = "standard"
    eps: float = 0.3
    retention: str = "relevant"
    h: int = 1

    def __post_init__(self):
        if self.n < 1 or self.t < 1:
            raise ValueError("need n >= 1 and t >= 1")
        if not (0 <= self.t0 < self.t):
            raise ValueError("need 0 <= t0 < t")
        if not (self.delta0 >= self.delta_min > 0):
            raise ValueError("need delta0 >= delta_min > 0")
        if not (0 < self.a < 1):
            raise ValueError("need 0 < a < 1")
        if not (0 < self.eps <= 1):
            raise ValueError("need eps in (0, 1]")
        if self.h < 1:
            raise ValueError("need h >= 1")
        if self.proposal_family not in ("gaussian", "student_t"):
            raise ValueError("proposal_family must be 'gaussian' or 'student_t'")
        if self.proposal_family == "student_t" and self.proposal_dof <= 0:
            raise ValueError("proposal_dof must be positive")
        if self.weight_denominator not in ("standard", "mixture"):
            raise ValueError("weight_denominator must be 'standard' or 'mixture'")
        if self.weight_denominator == "mixture" and self.h != 1:
            raise ValueError("mixture denominator is only supported with a single proposal")
        if self.retention not in ("relevant", "all"):
            raise ValueError("retention must be 'relevant' or 'all'")
        if self.mu1 is None:
            raise ValueError("mu1 is required")
        object.__setattr__(self, "mu1", np.asarray(self.mu1, dtype=float))
        lam = np.eye(self.mu1.shape[0]) if self.lam1 is None else np.asarray(self.lam1, float)
        object.__setattr__(self, "lam1", lam)


# ---------------------------------------------------------------------------
# Proposal densities
# ---------------------------------------------------------------------------


def proposal_logpdf(
    thetas: np.ndarray,
    mu: np.ndarray,
    lam: SPDMatrix,
    family: str = "gaussian",
    dof: float = 5.0,
) -> np.ndarray:
    """Normalized proposal log-density at each row of ``thetas``."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    m = mu.shape[0]
    quads = lam.quad_forms((thetas - mu).T)
    if family == "gaussian":
        return -0.5 * (m * _LOG_2PI + lam.log_det + quads)
    const = (
        gammaln(0.5 * (dof + m))
        - gammaln(0.5 * dof)
        - 0.5 * m * np.log(dof * np.pi)
        - 0.5 * lam.log_det
    )
    return const - 0.5 * (dof + m) * np.log1p(quads / dof)


def sample_proposal(
    n: int,
    mu: np.ndarray,
    lam: SPDMatrix,
    rng: np.random.Generator,
    family: str = "gaussian",
    dof: float = 5.0,
) -> np.ndarray:
    z = rng.standard_normal((n, mu.shape[0]))
    draws = mu + z @ lam.chol.T
    if family == "gaussian":
        return draws
    scale = np.sqrt(dof / rng.chisquare(dof, size=n))
    return mu + (draws - mu) * scale[:, None]


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------


def is_log_weights(
    samples: np.ndarray,
    log_target,
    proposals: Sequence[tuple[np.ndarray, SPDMatrix]],
    current: int = -1,
    mode: str = "standard",
    proposal_family: str = "gaussian",
    proposal_dof: float = 5.0,
) -> np.ndarray:
    """Importance log-weights of samples drawn from the current proposal.

    ``mode="standard"`` divides by the current proposal density.
    ``mode="mixture"`` divides by the equal-weight mixture of all proposals in
    the (already eps-filtered) list, the multiple-IS denominator.
    """
    if len(proposals) == 0:
        raise ValueError("proposal list is empty")
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if callable(log_target):
        tgt = np.array([log_target(s) for s in samples], dtype=float)
    else:
        tgt = np.asarray(log_target, dtype=float)
    if mode == "standard":
        mu, lam = proposals[current]
        den = proposal_logpdf(samples, mu, lam, proposal_family, proposal_dof)
    elif mode == "mixture":
        comps = np.stack(
            [proposal_logpdf(samples, mu, lam, proposal_family, proposal_dof)
             for mu, lam in proposals]
        )
        den = logsumexp(comps, axis=0) - np.log(len(proposals))
    else:
        raise ValueError(f"unknown weight mode: {mode!r}")
    return tgt - den


def current_max(
    samples: np.ndarray,
    log_target_values: np.ndarray,
    model: ForwardModel,
    data: Dataset,
    precomputed_residuals: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Iteration argmax of the conditional posterior and its ML covariance.

    Ties break to the lowest sample index.  When the residual tensor of the
    drawn cloud is supplied, no model re-evaluation happens.
    """
    log_target_values = np.asarray(log_target_values, dtype=float)
    if log_target_values.size == 0 or not np.any(np.isfinite(log_target_values)):
        raise ValueError("no sample has a finite log-target")
    idx = int(np.argmax(log_target_values))
    theta_max = np.asarray(samples, dtype=float)[idx]
    if precomputed_residuals is not None:
        res = precomputed_residuals[idx]
    else:
        from .core import residuals as _residuals

        res = _residuals(model, theta_max, data)
    return theta_max, ml_covariance(res)


@dataclass
class AtaisState:
    """Running MAP/ML estimators and the log target value at the MAP."""

    theta_map: np.ndarray | None = None
    theta_map_residuals: np.ndarray | None = None
    theta_map_log_prior: float = 0.0
    sigma_ml: SPDMatrix | None = None
    log_pi_map: float = -np.inf


def global_max_update(
    state: AtaisState,
    theta_max: np.ndarray,
    log_target_at_max: float,
    sigma_t: np.ndarray,
    residuals_at_max: np.ndarray,
    log_prior_at_max: float,
    family: NoiseFamily = GAUSSIAN,
) -> AtaisState:
    """Accept the iteration maximum if it beats the running MAP value.

    On improvement the running log pi_MAP is re-evaluated under the NEW
    covariance from the stored residuals (one likelihood evaluation, no model
    call); otherwise the state is returned unchanged.
    """
    if not (log_target_at_max > state.log_pi_map):
        return state
    sigma_new = spd_from_matrix(sigma_t, jitter_policy="escalate")
    log_pi = loglik(residuals_at_max, sigma_new, family) + log_prior_at_max
    return AtaisState(
        theta_map=np.array(theta_max, dtype=float),
        theta_map_residuals=np.array(residuals_at_max, dtype=float),
        theta_map_log_prior=float(log_prior_at_max),
        sigma_ml=sigma_new,
        log_pi_map=float(log_pi),
    )


def adapt_proposal(
    thetas: np.ndarray,
    normalized_weights: np.ndarray,
    theta_map: np.ndarray,
    delta: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Next proposal mean and covariance.

    The mean moves to the running MAP; the covariance is the weighted sample
    covariance about the weighted mean plus ``delta * I`` (SPD by construction).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    thetas = np.asarray(thetas, dtype=float)
    w = np.asarray(normalized_weights, dtype=float)
    theta_bar = w @ thetas
    centered = thetas - theta_bar
    cov = (centered * w[:, None]).T @ centered
    lam = 0.5 * (cov + cov.T) + delta * np.eye(thetas.shape[1])
    return np.array(theta_map, dtype=float), lam


def adapt_delta(delta: float, delta0: float, a: float, delta_min: float) -> float:
    """Cyclic exploration schedule: shrink by ``a`` until below the floor, then reset."""
    return a * delta if delta >= delta_min else delta0


def retain_relevant(normalized_weights: np.ndarray, n: int) -> np.ndarray:
    """Indices of samples with normalized weight >= 1/n (never empty)."""
    w = np.asarray(normalized_weights, dtype=float)
    return np.flatnonzero(w >= 1.0 / n)


def ess(normalized_weights: np.ndarray) -> float:
    """Effective sample size 1 / sum(w_bar^2) of normalized weights."""
    w = np.asarray(normalized_weights, dtype=float)
    denom = float(np.sum(w * w))
    if denom == 0.0:
        raise ValueError("all weights are zero")
    return 1.0 / denom


def final_reweight(
    store: SampleStore,
    sigma_final: SPDMatrix,
    family: NoiseFamily = GAUSSIAN,
) -> np.ndarray:
    """Correct all stored log-weights to the final conditional posterior.

    log w_tilde = log w + log pi_{T+1}(theta) - log pi_t(theta), with both
    target evaluations reusing the stored residual blocks; the forward model
    is never re-evaluated.  Returns a flat array aligned with ``store.stacked()``.
    """
    parts = []
    for rec in store.iterations:
        if rec.thetas.shape[0] == 0:
            continue
        if rec.residual_blocks.shape[0] != rec.thetas.shape[0]:
            raise ValueError("missing residual block for a retained sample")
        log_pi_final = loglik_batch(rec.residual_blocks, sigma_final, family) + rec.log_prior
        parts.append(rec.log_weights + log_pi_final - rec.log_target)
    if not parts:
        raise ValueError("sample store is empty")
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------


@dataclass
class AtaisOutput:
    """Final estimators, the sample store with corrected weights, and traces."""

    theta_map: np.ndarray
    sigma_ml: SPDMatrix
    store: SampleStore
    corrected_log_weights: np.ndarray
    theta_map_traj: np.ndarray
    sigma_ml_traj: np.ndarray
    delta_traj: np.ndarray
    ess_traj: np.ndarray
    n_evaluations: float
    fused_mean: np.ndarray | None = None
    fused_cov: SPDMatrix | None = None


class _Proposal:
    """One proposal stream with its locally-best sample so far."""

    __slots__ = ("mu", "lam", "best_theta", "best_res", "best_log_prior", "best_log_target")

    def __init__(self, mu: np.ndarray, lam: SPDMatrix):
        self.mu = mu
        self.lam = lam
        self.best_theta = None
        self.best_res = None
        self.best_log_prior = 0.0
        self.best_log_target = -np.inf


def _normalize(log_w: np.ndarray) -> np.ndarray:
    finite = np.isfinite(log_w)
    if not np.any(finite):
        return np.zeros_like(log_w)
    shifted = log_w - np.max(log_w[finite])
    w = np.exp(shifted, where=np.isfinite(shifted), out=np.zeros_like(shifted))
    return w / np.sum(w)


def run_atais(
    config: AtaisConfig,
    model: ForwardModel,
    data: Dataset,
    prior: LogPrior,
    family: NoiseFamily = GAUSSIAN,
    rng: RngStream | None = None,
    sigma0: SPDMatrix | None = None,
    batch_chunk: int = 2048,
    final_correction: bool = True,
    _subtarget: Callable[[int], tuple[np.ndarray, float]] | None = None,
) -> AtaisOutput:
    """Run the full first-stage sampler and return corrected weighted samples.

    ``sigma0`` is the initial covariance estimate (identity when omitted).
    ``_subtarget`` is the mini-batch hook: given the iteration index it
    returns (column indices, prior power) for the iteration's sub-posterior;
    mini-batch drivers handle their own weight correction and pass
    ``final_correction=False``.
    """
    if rng is None:
        rng = RngStream(0)
    k = data.k
    state = AtaisState(sigma_ml=sigma0 if sigma0 is not None else spd_identity(k))
    identity = spd_identity(k)
    proposals = [
        _Proposal(config.mu1.copy(), spd_from_matrix(config.lam1, "escalate"))
        for _ in range(config.h)
    ]
    mixture = config.weight_denominator == "mixture"
    history: list[tuple[np.ndarray, SPDMatrix]] = []
    move_flags: list[bool] = []  # True when the proposal moved more than eps

    store = SampleStore(n_per_iteration=config.n * config.h)
    delta = config.delta0
    delta_traj, ess_traj = [], []
    theta_traj, sigma_traj = [], []
    pi_sigma: SPDMatrix | None = None  # target sigma the cached log values refer to
    eval_start = model.eval_count

    def _refresh_caches(tgt_sigma: SPDMatrix, fam: NoiseFamily):
        nonlocal pi_sigma
        if pi_sigma is tgt_sigma:
            return
        for prop in proposals:
            if prop.best_theta is not None:
                prop.best_log_target = (
                    loglik(prop.best_res, tgt_sigma, fam) + prop.best_log_prior
                )
        if state.theta_map is not None:
            state.log_pi_map = (
                loglik(state.theta_map_residuals, tgt_sigma, fam)
                + state.theta_map_log_prior
            )
        pi_sigma = tgt_sigma

    for t in range(1, config.t + 1):
        tgt_sigma = identity if t <= config.t0 else state.sigma_ml
        if _subtarget is not None:
            cols, prior_power = _subtarget(t)
        else:
            cols, prior_power = None, 1.0
        _refresh_caches(tgt_sigma, family)

        if mixture:
            history.append((proposals[0].mu.copy(), proposals[0].lam))

        iter_thetas, iter_logtgt, iter_logq, iter_logprior = [], [], [], []
        iter_res = []
        per_prop_slices = []
        offset = 0
        for h, prop in enumerate(proposals):
            gen = rng.child("atais", t, h).generator()
            draws = sample_proposal(
                config.n, prop.mu, prop.lam, gen, config.proposal_family, config.proposal_dof
            )
            log_prior_vals = prior.batch(draws) * prior_power
            log_tgt = np.full(config.n, -np.inf)
            res_blocks = np.empty((config.n, k, data.r if cols is None else len(cols)))
            inside = np.flatnonzero(np.isfinite(log_prior_vals))
            for lo in range(0, inside.size, batch_chunk):
                sel = inside[lo: lo + batch_chunk]
                preds = model.predict_batch(draws[sel], data, cols)
                obs = data.observations if cols is None else data.observations[:, cols]
                blocks = obs[None, :, :] - preds
                # Samples whose predictions overflow get zero posterior mass.
                ok = np.all(np.isfinite(blocks), axis=(1, 2))
                blocks[~ok] = 0.0
                res_blocks[sel] = blocks
                vals = np.full(sel.size, -np.inf)
                if np.any(ok):
                    vals[ok] = (
                        loglik_batch(blocks[ok], tgt_sigma, family)
                        + log_prior_vals[sel][ok]
                    )
                log_tgt[sel] = vals
            if mixture:
                active = _active_history(history, move_flags)
                comps = np.stack(
                    [proposal_logpdf(draws, m_, l_, config.proposal_family, config.proposal_dof)
                     for m_, l_ in active]
                )
                log_q = logsumexp(comps, axis=0) - np.log(len(active))
            else:
                log_q = proposal_logpdf(
                    draws, prop.mu, prop.lam, config.proposal_family, config.proposal_dof
                )
            iter_thetas.append(draws)
            iter_logtgt.append(log_tgt)
            iter_logq.append(log_q)
            iter_logprior.append(log_prior_vals)
            iter_res.append(res_blocks)
            per_prop_slices.append(slice(offset, offset + config.n))
            offset += config.n

        thetas = np.concatenate(iter_thetas)
        log_tgt = np.concatenate(iter_logtgt)
        log_q = np.concatenate(iter_logq)
        log_prior_vals = np.concatenate(iter_logprior)
        res_blocks = np.concatenate(iter_res)
        log_w = log_tgt - log_q
        w_bar = _normalize(log_w)
        any_finite = bool(np.any(np.isfinite(log_tgt)))
        ess_traj.append(ess(w_bar) if any_finite else np.nan)

        if any_finite:
            # Per-proposal local maxima, then the shared global check.
            for h, prop in enumerate(proposals):
                sl = per_prop_slices[h]
                tgt_h = log_tgt[sl]
                if not np.any(np.isfinite(tgt_h)):
                    continue
                i = int(np.argmax(tgt_h))
                if tgt_h[i] > prop.best_log_target:
                    prop.best_theta = thetas[sl][i].copy()
                    prop.best_res = res_blocks[sl][i].copy()
                    prop.best_log_prior = float(log_prior_vals[sl][i])
                    prop.best_log_target = float(tgt_h[i])
            best_h = max(
                range(config.h), key=lambda h: proposals[h].best_log_target
            )
            cand = proposals[best_h]
            if cand.best_theta is not None and cand.best_log_target > state.log_pi_map:
                # Under mini-batching this is the batch-local estimate (1/L sum over
                # the selected columns); the driver builds the full-data estimate.
                sigma_t = estimate_scale(cand.best_res, family, state.sigma_ml)
                state = global_max_update(
                    state,
                    cand.best_theta,
                    cand.best_log_target,
                    sigma_t,
                    cand.best_res,
                    cand.best_log_prior,
                    family,
                )
                pi_sigma = None  # cached values now refer to the superseded target

            for h, prop in enumerate(proposals):
                sl = per_prop_slices[h]
                w_h = _normalize(log_w[sl])
                anchor = prop.best_theta if prop.best_theta is not None else state.theta_map
                if anchor is None:
                    continue
                mu_new, lam_new = adapt_proposal(thetas[sl], w_h, anchor, delta)
                prop.mu = mu_new
                prop.lam = spd_from_matrix(lam_new, "escalate")
            if mixture and len(store.theta_map_history) >= 1 and state.theta_map is not None:
                prev = store.theta_map_history[-1]
                denom = max(np.linalg.norm(state.theta_map), np.linalg.norm(prev))
                moved = denom > 0 and np.linalg.norm(state.theta_map - prev) / denom > config.eps
                move_flags.append(moved)
            elif mixture:
                move_flags.append(True)
        else:
            # Nothing landed in the support: keep the proposal, restart exploration.
            delta = config.delta0
            if mixture:
                move_flags.append(True)

        if config.retention == "relevant":
            keep = retain_relevant(w_bar, thetas.shape[0])
        else:
            keep = np.flatnonzero(np.isfinite(log_w))
        store.iterations.append(
            IterationRecord(
                mu=proposals[0].mu.copy() if config.h == 1 else np.stack([p.mu for p in proposals]),
                lam=proposals[0].lam,
                sigma=tgt_sigma,
                delta=delta,
                thetas=thetas[keep],
                log_weights=log_w[keep],
                log_q=log_q[keep],
                log_target=log_tgt[keep],
                log_prior=log_prior_vals[keep],
                residual_blocks=res_blocks[keep],
                n_drawn=thetas.shape[0],
                ess=ess_traj[-1],
            )
        )
        store.sigma_ml_history.append(state.sigma_ml)
        store.theta_map_history.append(
            state.theta_map.copy() if state.theta_map is not None
            else np.full(config.mu1.shape, np.nan)
        )
        theta_traj.append(store.theta_map_history[-1])
        sigma_traj.append(state.sigma_ml.matrix)
        delta_traj.append(delta)
        delta = adapt_delta(delta, config.delta0, config.a, config.delta_min)

    if state.theta_map is None:
        raise RuntimeError("no sample ever attained a finite posterior value")

    if mixture:
        _finalize_mixture(store, history, move_flags, config)
    if final_correction:
        corrected = final_reweight(store, state.sigma_ml, family)
    else:
        corrected = store.stacked()["log_weights"]
    return AtaisOutput(
        theta_map=state.theta_map,
        sigma_ml=state.sigma_ml,
        store=store,
        corrected_log_weights=corrected,
        theta_map_traj=np.stack(theta_traj),
        sigma_ml_traj=np.stack(sigma_traj),
        delta_traj=np.array(delta_traj),
        ess_traj=np.array(ess_traj),
        n_evaluations=model.eval_count - eval_start,
    )


def _active_history(history, move_flags) -> list:
    """Proposals kept by the eps rule: drop everything up to the last big move."""
    if len(history) == 1:
        return list(history)
    last_move = -1
    for i, moved in enumerate(move_flags[: len(history) - 1]):
        if moved:
            last_move = i
    kept = list(history[last_move + 1:])
    return kept if kept else [history[-1]]


def _finalize_mixture(store: SampleStore, history, move_flags, config: AtaisConfig) -> None:
    """Recompute every retained sample's denominator over the final kept mixture
    and drop samples generated by discarded proposals."""
    kept_from = 0
    for i, moved in enumerate(move_flags[: len(history) - 1]):
        if moved:
            kept_from = i + 1
    kept = history[kept_from:]
    for t, rec in enumerate(store.iterations):
        if t < kept_from:
            empty = rec.thetas[:0]
            store.iterations[t] = IterationRecord(
                mu=rec.mu, lam=rec.lam, sigma=rec.sigma, delta=rec.delta,
                thetas=empty, log_weights=rec.log_weights[:0], log_q=rec.log_q[:0],
                log_target=rec.log_target[:0], log_prior=rec.log_prior[:0],
                residual_blocks=rec.residual_blocks[:0], n_drawn=rec.n_drawn, ess=rec.ess,
            )
            continue
        if rec.thetas.shape[0] == 0:
            continue
        comps = np.stack(
            [proposal_logpdf(rec.thetas, mu, lam, config.proposal_family, config.proposal_dof)
             for mu, lam in kept]
        )
        log_q = logsumexp(comps, axis=0) - np.log(len(kept))
        rec.log_q = log_q
        rec.log_weights = rec.log_target - log_q
