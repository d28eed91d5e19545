"""Command-line harness: experiment configs, seeded parallel runs, MAE metrics
and machine-readable outputs (trajectory CSVs plus a summary JSON).

Usage:
    bayes-invert run --config cfg.json [--jobs N] [--seed-offset K] [--out DIR]
    bayes-invert list-experiments
    bayes-invert validate --config cfg.json

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .atais import AtaisConfig, run_atais
from .core import RngStream, SPDMatrix, residuals, spd_from_matrix
from .ilis import run_ilis
from .likelihood import (
    GAUSSIAN,
    NoiseFamily,
    fixedpoint_scale,
    ml_covariance,
    student_t,
    student_t_eta,
)
from .mcmc import adaptive_mh, mh_conditional, mh_joint, mh_within_gibbs
from .minibatch import make_batch_plan, run_atais_minibatch
from .models import (
    EXPERIMENT_NAMES,
    ExperimentSpec,
    experiment_spec,
    generate_synthetic,
    threshold_adjacency,
)
from .posterior import (
    WishartParams,
    choose_phi,
    credible_interval,
    joint_weights,
    sample_wishart,
)

__all__ = [
    "ConfigError",
    "RunConfig",
    "mae",
    "sigma_groundtruth",
    "run_experiment",
    "main",
]

ALGORITHMS = (
    "atais",
    "atais_minibatch",
    "ilis",
    "mh_conditional",
    "mh_joint",
    "adaptive_mh",
    "mh_within_gibbs",
)

INIT_SD = 4.0  # run-to-run randomization of the starting point and covariance scale


class ConfigError(ValueError):
    """Invalid run configuration."""


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def mae(estimate: np.ndarray, truth: np.ndarray, kind: str) -> float:
    """Mean absolute error over theta components, covariance entries, or both.

    ``kind="complete"`` expects (theta_est, sigma_est) / (theta_true, sigma_true)
    pairs and pools all M + K^2 absolute errors into one mean.
    """
    if kind == "theta":
        est, tru = np.asarray(estimate, float), np.asarray(truth, float)
        if est.shape != tru.shape:
            raise ValueError("theta dimension mismatch")
        return float(np.mean(np.abs(est - tru)))
    if kind == "sigma":
        est, tru = np.asarray(estimate, float), np.asarray(truth, float)
        if est.shape != tru.shape:
            raise ValueError("sigma dimension mismatch")
        return float(np.mean(np.abs(est - tru)))
    if kind == "complete":
        theta_est, sigma_est = estimate
        theta_tru, sigma_tru = truth
        theta_est, theta_tru = np.asarray(theta_est, float), np.asarray(theta_tru, float)
        sigma_est, sigma_tru = np.asarray(sigma_est, float), np.asarray(sigma_tru, float)
        if theta_est.shape != theta_tru.shape or sigma_est.shape != sigma_tru.shape:
            raise ValueError("dimension mismatch")
        pooled = np.concatenate(
            [np.abs(theta_est - theta_tru).ravel(), np.abs(sigma_est - sigma_tru).ravel()]
        )
        return float(np.mean(pooled))
    raise ValueError(f"unknown MAE kind: {kind!r}")


def sigma_groundtruth(spec: ExperimentSpec, data) -> np.ndarray:
    """The dataset-conditional ML reference for Sigma, evaluated at theta_true.

    For Gaussian noise this is the empirical residual covariance; for
    Student-t noise the ML reference is the fixed-point scale estimate at
    theta_true (the empirical covariance estimates a scaled matrix instead).
    """
    model = spec.model_factory()
    res = residuals(model, spec.theta_true, data)
    if spec.family.is_gaussian:
        return ml_covariance(res)
    eta = student_t_eta(spec.family.nu_t, spec.k)
    return fixedpoint_scale(res, eta, spec.sigma_true).matrix


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    experiment: str
    algorithm: str
    params: dict = field(default_factory=dict)
    noise: dict = field(default_factory=lambda: {"family": "gaussian"})
    runs: int = 1
    base_seed: int = 0
    seeds: list | None = None
    random_init: bool = True
    second_part: dict | None = None
    out_dir: str = "results"
    r: int | None = None
    graph_seed: int = 0

    def validate(self) -> None:
        if self.experiment not in EXPERIMENT_NAMES:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        fam = self.noise.get("family", "gaussian")
        if fam not in ("gaussian", "student_t"):
            raise ConfigError(f"unknown noise family {fam!r}")
        if fam == "student_t" and self.noise.get("nu", 0) <= 0:
            raise ConfigError("student_t noise needs nu > 0")
        if self.seeds is not None and len(self.seeds) != self.runs:
            raise ConfigError("seeds list must match the number of runs")
        defaults = _algorithm_defaults(self.experiment, self.algorithm)
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown parameters for {self.algorithm}: {sorted(unknown)}")
        merged = {**defaults, **self.params}
        if self.algorithm in ("atais", "atais_minibatch"):
            try:
                _build_atais_config(self.experiment, merged, self.r)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if self.second_part is not None:
            if self.second_part.get("j", 1000) < 1:
                raise ConfigError("second_part.j must be >= 1")
            level = self.second_part.get("level", 0.95)
            if not (0 < level < 1):
                raise ConfigError("second_part.level must be in (0, 1)")

    def family(self) -> NoiseFamily:
        if self.noise.get("family", "gaussian") == "gaussian":
            return GAUSSIAN
        return student_t(self.noise["nu"])

    def run_seeds(self, offset: int = 0) -> list[int]:
        if self.seeds is not None:
            return [int(s) + offset for s in self.seeds]
        return [self.base_seed + offset + i for i in range(self.runs)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


_ATAIS_DEFAULTS = {
    "localization": dict(n=50, t=40, lam_scale=6.0, delta0=1.0, a=0.1, delta_min=1e-6),
    "multioutput": dict(n=50, t=40, lam_scale=6.0, delta0=1.0, a=0.1, delta_min=1e-6),
    "biology_ode": dict(n=300, t=100, lam_scale=6.0, delta0=1.0, a=0.1, delta_min=1e-4),
    "graph": dict(n=20000, t=10, lam_scale=6.0, delta0=1.0, a=0.1, delta_min=0.05),
}


def _algorithm_defaults(experiment: str, algorithm: str) -> dict:
    atais = dict(_ATAIS_DEFAULTS.get(experiment, _ATAIS_DEFAULTS["localization"]))
    atais.update(
        t0=0, proposal_family="gaussian", proposal_dof=5.0,
        weight_denominator="standard", eps=0.3, retention="relevant", h=1,
    )
    if algorithm == "atais":
        return atais
    if algorithm == "atais_minibatch":
        atais.update(l=10, strategy="strategy2")
        return atais
    if algorithm == "ilis":
        return dict(
            j=10, chain_length=200, burn_in=0, nu=4.0, phi_scale=3.0,
            phi_source="scaled_identity", mh_cov_scale=0.05, prior_nu=4.0,
            atais=dict(),
        )
    if algorithm == "mh_conditional":
        return dict(t=2000, cov_scale=0.05, sigma_source="atais", atais=dict())
    if algorithm == "mh_joint":
        return dict(t=20000, a=0.1, nu=50.0, burn_frac=0.2)
    if algorithm == "adaptive_mh":
        return dict(t=20000, nu=50.0, burn_frac=0.2, update_every=100)
    if algorithm == "mh_within_gibbs":
        return dict(t=2000, inner_steps=10, sigma_step_sd=0.1, burn_frac=0.2)
    raise ConfigError(f"unknown algorithm {algorithm!r}")


def _build_atais_config(experiment: str, params: dict, r_override: int | None) -> AtaisConfig:
    spec = experiment_spec(experiment, r=r_override)
    m = spec.m
    mu1 = np.asarray(params.get("mu1", np.zeros(m)), dtype=float)
    lam1 = params["lam_scale"] * np.eye(m)
    return AtaisConfig(
        n=int(params["n"]),
        t=int(params["t"]),
        mu1=mu1,
        lam1=lam1,
        t0=int(params.get("t0", 0)),
        delta0=float(params["delta0"]),
        a=float(params["a"]),
        delta_min=float(params["delta_min"]),
        proposal_family=params.get("proposal_family", "gaussian"),
        proposal_dof=float(params.get("proposal_dof", 5.0)),
        weight_denominator=params.get("weight_denominator", "standard"),
        eps=float(params.get("eps", 0.3)),
        retention=params.get("retention", "relevant"),
        h=int(params.get("h", 1)),
    )


# ---------------------------------------------------------------------------
# Single-run engine (top-level and picklable for process pools)
# ---------------------------------------------------------------------------


def _random_initialization(spec: ExperimentSpec, rng: RngStream, random_init: bool):
    """Per-run starting point: theta center perturbed by N(0, sd^2), Sigma as a
    scaled identity with one shared random diagonal element (absolute value
    keeps it SPD)."""
    gen = rng.child("init").generator()
    mu_shift = INIT_SD * gen.standard_normal(spec.m) if random_init else np.zeros(spec.m)
    if random_init:
        diag = abs(1.0 + INIT_SD * gen.standard_normal())
        diag = max(diag, 1e-3)
    else:
        diag = 1.0
    sigma0 = spd_from_matrix(diag * np.eye(spec.k), "escalate")
    return mu_shift, sigma0


def _chain_estimates(record, burn_frac: float):
    burn = int(record.thetas.shape[0] * burn_frac)
    theta_hat = record.thetas[burn:].mean(axis=0)
    sigma_hat = record.sigmas[burn:].mean(axis=0) if record.sigmas is not None else None
    return theta_hat, sigma_hat


def run_single(config: RunConfig, seed: int) -> dict:
    """Execute one seeded run and return estimates, metrics and trajectories."""
    spec = experiment_spec(config.experiment, config.family(), r=config.r,
                           graph_seed=config.graph_seed)
    rng = RngStream(seed)
    data = generate_synthetic(spec, rng)
    sigma_ref = sigma_groundtruth(spec, data)
    model = spec.model_factory()
    params = {**_algorithm_defaults(config.experiment, config.algorithm), **config.params}
    mu_shift, sigma0 = _random_initialization(spec, rng, config.random_init)
    family = config.family()

    result: dict = {"seed": seed}
    trajectory = None
    output = None

    if config.algorithm in ("atais", "atais_minibatch"):
        acfg = _build_atais_config(config.experiment, params, config.r)
        acfg = AtaisConfig(
            **{**{f: getattr(acfg, f) for f in acfg.__dataclass_fields__},
               "mu1": acfg.mu1 + mu_shift}
        )
        if config.algorithm == "atais":
            output = run_atais(acfg, model, data, spec.prior, family,
                               rng.child("sampler"), sigma0=sigma0)
        else:
            if not family.is_gaussian:
                raise ConfigError("mini-batch runs assume Gaussian noise")
            plan = make_batch_plan(data.r, int(params["l"]), params["strategy"],
                                   rng.child("plan"))
            acfg = AtaisConfig(
                **{**{f: getattr(acfg, f) for f in acfg.__dataclass_fields__},
                   "t": plan.n_batches}
            )
            output = run_atais_minibatch(acfg, plan, model, data, spec.prior,
                                         rng.child("sampler"), sigma0=sigma0)
        theta_hat, sigma_hat = output.theta_map, output.sigma_ml.matrix
        ess_valid = output.ess_traj[np.isfinite(output.ess_traj)]
        result["ess_mean"] = float(ess_valid.mean()) if ess_valid.size else float("nan")
        result["n_evaluations"] = float(output.n_evaluations)
        trajectory = _atais_trajectory_rows(output, spec)
    elif config.algorithm == "ilis":
        phi, nu = _ilis_phi(config, params, spec, model, data, rng, sigma0, mu_shift)
        proposal = WishartParams(nu, phi)
        prior_w = WishartParams(float(params["prior_nu"]),
                                phi if params["phi_source"] != "scaled_identity"
                                else spd_from_matrix(params["phi_scale"] * np.eye(spec.k)))
        ilis_out = run_ilis(
            int(params["j"]), int(params["chain_length"]), int(params["burn_in"]),
            proposal, prior_w, params["mh_cov_scale"] * np.eye(spec.m),
            model, data, spec.prior, family, rng.child("ilis"),
            init_theta=mu_shift,
        )
        theta_hat = ilis_out.theta_map_estimate()
        sigma_hat = ilis_out.sigma_mean()
        result["n_evaluations"] = float(ilis_out.n_evaluations)
    elif config.algorithm == "mh_conditional":
        sigma_cond, extra_evals = _conditional_sigma(config, params, spec, model, data,
                                                     rng, sigma0, mu_shift)
        from .likelihood import loglik as _loglik

        def log_target(theta):
            lp = spec.prior(theta)
            if lp == -np.inf:
                return -np.inf
            res = residuals(model, theta, data)
            if not np.all(np.isfinite(res)):
                return -np.inf
            return _loglik(res, sigma_cond, family) + lp

        record = mh_conditional(log_target, mu_shift,
                                params["cov_scale"] * np.eye(spec.m),
                                int(params["t"]), rng.child("chain"))
        theta_hat, _ = _chain_estimates(record, params.get("burn_frac", 0.2))
        sigma_hat = sigma_cond.matrix
        result["acceptance"] = record.acceptance_rate("theta")
        result["n_evaluations"] = float(model.eval_count)
        trajectory = _chain_trajectory_rows(record)
    else:
        init_theta = mu_shift
        init_sigma = sigma0
        if config.algorithm == "mh_joint":
            record = mh_joint(model, data, spec.prior, float(params["a"]),
                              float(params["nu"]), int(params["t"]),
                              rng.child("chain"), init_theta, init_sigma, family=family)
        elif config.algorithm == "adaptive_mh":
            record = adaptive_mh(model, data, spec.prior, float(params["nu"]),
                                 int(params["t"]), rng.child("chain"),
                                 init_theta, init_sigma, family=family,
                                 update_every=int(params["update_every"]))
        else:
            record = mh_within_gibbs(model, data, spec.prior, int(params["inner_steps"]),
                                     int(params["t"]), rng.child("chain"),
                                     init_theta, init_sigma, family=family,
                                     sigma_step_sd=float(params["sigma_step_sd"]))
            result["spd_rejections"] = record.spd_rejections
        theta_hat, sigma_hat = _chain_estimates(record, params.get("burn_frac", 0.2))
        result["n_evaluations"] = float(model.eval_count)
        result["acceptance"] = {k: record.acceptance_rate(k) for k in record.proposals}
        trajectory = _chain_trajectory_rows(record)

    result["theta_hat"] = np.asarray(theta_hat).tolist()
    result["sigma_hat"] = np.asarray(sigma_hat).tolist()
    result["mae_theta"] = mae(theta_hat, spec.theta_true, "theta")
    result["mae_sigma"] = mae(sigma_hat, sigma_ref, "sigma")
    result["mae_complete"] = mae(
        (theta_hat, sigma_hat), (spec.theta_true, sigma_ref), "complete"
    )
    result["sigma_groundtruth"] = sigma_ref.tolist()

    if config.experiment == "graph":
        p_hat = spd_from_matrix(np.asarray(sigma_hat), "escalate").inverse()
        recovered = threshold_adjacency(0.5 * (p_hat + p_hat.T), 0.3)
        result["exact_adjacency_recovered"] = bool(
            np.array_equal(recovered, spec.adjacency_true)
        )

    if config.second_part and config.second_part.get("enabled", True) and output is not None:
        result.update(_second_part(config, output, family, rng))
    result["_trajectory"] = trajectory
    return result


def _ilis_phi(config, params, spec, model, data, rng, sigma0, mu_shift):
    nu = float(params["nu"])
    if params["phi_source"] == "atais":
        acfg = _build_atais_config(config.experiment,
                                   {**_algorithm_defaults(config.experiment, "atais"),
                                    **params.get("atais", {})}, config.r)
        out = run_atais(acfg, model, data, spec.prior, config.family(),
                        rng.child("atais_phi"), sigma0=sigma0)
        return choose_phi(out.sigma_ml, nu), nu
    return spd_from_matrix(params["phi_scale"] * np.eye(spec.k)), nu


def _conditional_sigma(config, params, spec, model, data, rng, sigma0, mu_shift):
    source = params["sigma_source"]
    if source == "groundtruth":
        return spec.sigma_true, 0.0
    if source == "identity":
        return sigma0, 0.0
    acfg = _build_atais_config(config.experiment,
                               {**_algorithm_defaults(config.experiment, "atais"),
                                **params.get("atais", {})}, config.r)
    acfg = AtaisConfig(
        **{**{f: getattr(acfg, f) for f in acfg.__dataclass_fields__},
           "mu1": acfg.mu1 + mu_shift}
    )
    before = model.eval_count
    out = run_atais(acfg, model, data, spec.prior, config.family(),
                    rng.child("atais_sigma"), sigma0=sigma0)
    return out.sigma_ml, model.eval_count - before


def _second_part(config: RunConfig, output, family, rng: RngStream) -> dict:
    sp = config.second_part
    j = int(sp.get("j", 1000))
    nu = int(sp.get("nu", 100))
    level = float(sp.get("level", 0.95))
    params = WishartParams(nu, choose_phi(output.sigma_ml, nu))
    gen = rng.child("second_part").generator()
    draws = [sample_wishart(params, gen) for _ in range(j)]
    n_total = sum(rec.n_drawn for rec in output.store.iterations)
    joint = joint_weights(output.store, draws, params, params, family, n_total=n_total)
    interval = credible_interval(draws, joint.lambda_bar, level,
                                 n_resample=j, rng=rng.child("resample"))
    return {
        "log_evidence": joint.log_marginal_likelihood,
        "interval": interval.tolist(),
        "sigma_posterior_mean": np.einsum(
            "j,jkl->kl", joint.lambda_bar, np.stack([d.matrix for d in draws])
        ).tolist(),
    }


def _atais_trajectory_rows(output, spec) -> list[dict]:
    rows = []
    k = spec.k
    for t in range(output.theta_map_traj.shape[0]):
        row = {"iteration": t + 1}
        for i, v in enumerate(output.theta_map_traj[t]):
            row[f"theta_map_{i}"] = v
        for a in range(k):
            for b in range(k):
                row[f"sigma_{a}_{b}"] = output.sigma_ml_traj[t, a, b]
        row["delta"] = output.delta_traj[t]
        row["ess"] = output.ess_traj[t]
        rows.append(row)
    return rows


def _chain_trajectory_rows(record) -> list[dict]:
    rows = []
    for t in range(record.thetas.shape[0]):
        row = {"step": t + 1}
        for i, v in enumerate(record.thetas[t]):
            row[f"theta_{i}"] = v
        if record.sigmas is not None:
            k = record.sigmas.shape[1]
            for a in range(k):
                for b in range(k):
                    row[f"sigma_{a}_{b}"] = record.sigmas[t, a, b]
        row["log_target"] = record.log_targets[t]
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Multi-run driver
# ---------------------------------------------------------------------------


def _run_single_payload(payload) -> dict:
    raw, seed = payload
    return run_single(RunConfig.from_dict(raw), seed)


def run_experiment(
    config: RunConfig,
    jobs: int = 1,
    seed_offset: int = 0,
    write_files: bool = True,
) -> dict:
    """Execute all seeded runs, write CSV trajectories and a summary JSON."""
    config.validate()
    seeds = config.run_seeds(seed_offset)
    raw = config.to_dict()
    results: list[dict] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_single_payload, [(raw, s) for s in seeds]))
    else:
        for s in seeds:
            results.append(run_single(config, s))

    out_dir = Path(config.out_dir)
    summary = _summarize(config, results)
    if write_files:
        out_dir.mkdir(parents=True, exist_ok=True)
        for res in results:
            rows = res.pop("_trajectory", None)
            if rows:
                _write_csv(out_dir / f"run_{res['seed']}_trajectory.csv", rows)
        with open(out_dir / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2)
    else:
        for res in results:
            res.pop("_trajectory", None)
    return summary


def _summarize(config: RunConfig, results: list[dict]) -> dict:
    clean = []
    for res in results:
        clean.append({k: v for k, v in res.items() if not k.startswith("_")})
    agg = {
        f"mean_{key}": float(np.mean([r[key] for r in clean]))
        for key in ("mae_theta", "mae_sigma", "mae_complete")
    }
    agg["mean_n_evaluations"] = float(np.mean([r.get("n_evaluations", np.nan) for r in clean]))
    if config.experiment == "graph":
        flags = [r["exact_adjacency_recovered"] for r in clean]
        agg["adjacency_recovery_rate"] = float(np.mean(flags))
    if any("interval" in r for r in clean):
        stacks = np.stack([np.asarray(r["interval"]) for r in clean if "interval" in r])
        agg["interval_mean"] = stacks.mean(axis=0).tolist()
    if any("log_evidence" in r for r in clean):
        agg["mean_log_evidence"] = float(
            np.mean([r["log_evidence"] for r in clean if "log_evidence" in r])
        )
    return {
        "experiment": config.experiment,
        "algorithm": config.algorithm,
        "noise": config.noise,
        "params": {**_algorithm_defaults(config.experiment, config.algorithm),
                   **config.params},
        "runs": clean,
        "aggregate": agg,
    }


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(raw)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bayes-invert")
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="execute the runs described by a config file")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--jobs", type=int, default=1)
    run_p.add_argument("--seed-offset", type=int, default=0)
    run_p.add_argument("--out", default=None)
    sub.add_parser("list-experiments", help="print the available experiment ids")
    val_p = sub.add_parser("validate", help="check a config file without running it")
    val_p.add_argument("--config", required=True)

    args = parser.parse_args(argv)
    if args.command == "list-experiments":
        for name in EXPERIMENT_NAMES:
            spec = experiment_spec(name)
            print(f"{name}: M={spec.m}, K={spec.k}, R={spec.r}")
        return 0
    try:
        config = _load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "validate":
        print("config ok")
        return 0
    if args.out is not None:
        config.out_dir = args.out
    try:
        summary = run_experiment(config, jobs=args.jobs, seed_offset=args.seed_offset)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    agg = summary["aggregate"]
    print(json.dumps(agg, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
