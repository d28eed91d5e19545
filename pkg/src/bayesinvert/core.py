"""Shared domain types: datasets, SPD matrices, forward models, priors and RNG streams.

Everything downstream (samplers, posteriors, baselines) builds on the types in
this module.  All matrices are dense numpy arrays; probability computations
are carried in the log domain throughout the package, since the conditional
posteriors of interest are typically far too narrow for linear-scale densities.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "NotSymmetricError",
    "NotPositiveDefiniteError",
    "ModelEvaluationError",
    "SPDMatrix",
    "spd_from_matrix",
    "Dataset",
    "ForwardModel",
    "residuals",
    "LogPrior",
    "ImproperFlatPrior",
    "UniformBoxPrior",
    "GaussianPrior",
    "RngStream",
    "IterationRecord",
    "SampleStore",
]

SYMMETRY_RTOL = 1e-10
JITTER_START = 1e-12
JITTER_MAX = 1e-6


class NotSymmetricError(ValueError):
    """Input matrix is not symmetric within tolerance."""


class NotPositiveDefiniteError(ValueError):
    """Matrix could not be factorized as strictly positive definite."""


class ModelEvaluationError(RuntimeError):
    """Forward-model evaluation failed; carries the offending column index."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


# ---------------------------------------------------------------------------
# SPD matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SPDMatrix:
    """Symmetric positive-definite matrix with a cached Cholesky factor.

    Holds the (possibly jittered) matrix, its lower-triangular factor ``L``
    with ``matrix = L L^T``, the log-determinant, and the jitter that was
    added to make the factorization succeed (0.0 when none was needed).
    Instances are immutable and safe to share across threads.
    """

    matrix: np.ndarray
    chol: np.ndarray
    log_det: float
    jitter: float = 0.0

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``A x = b`` via the cached factorization (never an explicit inverse)."""
        y = solve_triangular(self.chol, b, lower=True)
        return solve_triangular(self.chol, y, lower=True, trans="T")

    def whiten(self, x: np.ndarray) -> np.ndarray:
        """Return ``L^{-1} x`` so that ``|whiten(e)|^2 = e^T A^{-1} e``."""
        return solve_triangular(self.chol, x, lower=True)

    def quad_forms(self, vectors: np.ndarray) -> np.ndarray:
        """Per-column quadratic forms ``v_j^T A^{-1} v_j`` for a (k, n) array."""
        w = self.whiten(vectors)
        return np.sum(w * w, axis=0)

    @cached_property
    def _precision(self) -> np.ndarray:
        p = self.solve(np.eye(self.k))
        p.setflags(write=False)
        return p

    def quad_forms_tensor(self, res: np.ndarray, per_column: bool = False) -> np.ndarray:
        """Quadratic forms over an (S, K, R) residual tensor.

        Returns per-sample sums (S,) or per-column values (S, R).  Uses the
        factorization-derived precision with BLAS contractions, which is much
        faster than per-tensor triangular solves at sampler batch sizes.
        """
        res = np.asarray(res, dtype=float)
        with np.errstate(over="ignore"):
            if per_column:
                return np.einsum("skr,kl,slr->sr", res, self._precision, res, optimize=True)
            gram = np.einsum("skr,slr->skl", res, res)
            return np.tensordot(gram, self._precision, axes=([1, 2], [0, 1]))

    def inverse(self) -> np.ndarray:
        """Dense inverse, for reporting only (e.g. precision-matrix readouts)."""
        return self.solve(np.eye(self.k))

    def scaled(self, c: float) -> "SPDMatrix":
        """Return ``c * A`` for ``c > 0``, reusing the cached factor."""
        if c <= 0:
            raise ValueError("scale factor must be positive")
        return SPDMatrix(
            matrix=self.matrix * c,
            chol=self.chol * np.sqrt(c),
            log_det=self.log_det + self.k * np.log(c),
            jitter=self.jitter * c,
        )


def _check_symmetric(m: np.ndarray) -> None:
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if float(np.max(np.abs(m - m.T))) > SYMMETRY_RTOL * scale:
        raise NotSymmetricError("matrix is not symmetric within relative tolerance 1e-10")


def spd_from_matrix(m: np.ndarray, jitter_policy: str = "reject") -> SPDMatrix:
    """Build an :class:`SPDMatrix` from a symmetric matrix.

    With ``jitter_policy="reject"`` a failed Cholesky raises
    :class:`NotPositiveDefiniteError`.  With ``"escalate"``, ``eps * I`` is
    added with ``eps`` doubling from 1e-12 up to at most 1e-6 until the
    factorization succeeds; the applied jitter is recorded on the result.
    """
    if jitter_policy not in ("reject", "escalate"):
        raise ValueError(f"unknown jitter policy: {jitter_policy!r}")
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("expected a square matrix")
    _check_symmetric(m)
    sym = 0.5 * (m + m.T)

    def _try(mat: np.ndarray) -> np.ndarray | None:
        try:
            chol = np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.diag(chol) > 0.0):
            return None
        return chol

    chol = _try(sym)
    if chol is not None:
        log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        result = SPDMatrix(sym, chol, log_det, 0.0)
    else:
        if jitter_policy == "reject":
            raise NotPositiveDefiniteError("matrix is not positive definite")
        eps = JITTER_START
        result = None
        while eps <= JITTER_MAX:
            jittered = sym + eps * np.eye(sym.shape[0])
            chol = _try(jittered)
            if chol is not None:
                log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
                result = SPDMatrix(jittered, chol, log_det, eps)
                break
            eps *= 2.0
        if result is None:
            raise NotPositiveDefiniteError(
                "matrix is not positive definite even after jitter up to 1e-6"
            )
    result.matrix.setflags(write=False)
    result.chol.setflags(write=False)
    return result


def spd_identity(k: int) -> SPDMatrix:
    eye = np.eye(k)
    return SPDMatrix(eye, eye.copy(), 0.0, 0.0)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """K x R observation matrix plus optional per-column auxiliary inputs.

    ``observations[:, r]`` is the r-th observation vector y_r.  ``aux_inputs``
    holds the scalar time instant (or d-vector of spatial coordinates) for
    each column, when the forward model needs one.
    """

    observations: np.ndarray
    aux_inputs: np.ndarray | None = None
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim != 2:
            raise ValueError("observations must be a K x R matrix")
        if obs.shape[0] < 1 or obs.shape[1] < 1:
            raise ValueError("need K >= 1 and R >= 1")
        if not np.all(np.isfinite(obs)):
            raise ValueError("observations contain non-finite entries")
        object.__setattr__(self, "observations", obs)
        if self.aux_inputs is not None:
            aux = np.asarray(self.aux_inputs, dtype=float)
            if aux.shape[0] != obs.shape[1]:
                raise ValueError("aux_inputs must have exactly R entries")
            aux.setflags(write=False)
            object.__setattr__(self, "aux_inputs", aux)
        if self.labels is not None and len(self.labels) != obs.shape[0]:
            raise ValueError("labels must have length K")
        obs.setflags(write=False)

    @property
    def k(self) -> int:
        return self.observations.shape[0]

    @property
    def r(self) -> int:
        return self.observations.shape[1]


# ---------------------------------------------------------------------------
# Forward models
# ---------------------------------------------------------------------------


class ForwardModel:
    """Vectorial map f_r(theta): R^M -> R^K, evaluable per observation column.

    Subclasses set ``m`` and ``k`` and implement :meth:`evaluate` (pointwise)
    or override :meth:`predict_batch` with a vectorized version.  The instance
    keeps a running count of theta-evaluations (one unit = one evaluation of
    the full K x R map F(theta); column subsets are charged fractionally),
    which the samplers report and the recycling stage must leave untouched.
    """

    m: int
    k: int

    def __init__(self):
        self.eval_count: float = 0.0

    def evaluate(self, theta: np.ndarray, r: int, aux) -> np.ndarray:
        """Return f_r(theta) in R^K for one observation index (no counting)."""
        raise NotImplementedError

    def _charge(self, n_theta: int, n_cols: int, r_total: int) -> None:
        self.eval_count += n_theta * (n_cols / r_total)

    def reset_eval_count(self) -> None:
        self.eval_count = 0.0

    def _aux(self, data: Dataset, r: int):
        return None if data.aux_inputs is None else data.aux_inputs[r]

    def predict(self, theta: np.ndarray, data: Dataset, cols: np.ndarray | None = None) -> np.ndarray:
        """Return F(theta) restricted to ``cols`` (default all columns), shape (K, len(cols))."""
        return self.predict_batch(np.asarray(theta, dtype=float)[None, :], data, cols)[0]

    def predict_batch(
        self, thetas: np.ndarray, data: Dataset, cols: np.ndarray | None = None
    ) -> np.ndarray:
        """Return F(theta_s) for a (S, M) block of parameters, shape (S, K, len(cols))."""
        thetas = np.asarray(thetas, dtype=float)
        idx = np.arange(data.r) if cols is None else np.asarray(cols)
        out = np.empty((thetas.shape[0], self.k, len(idx)))
        for s, theta in enumerate(thetas):
            for j, r in enumerate(idx):
                try:
                    out[s, :, j] = self.evaluate(theta, int(r), self._aux(data, int(r)))
                except ModelEvaluationError:
                    raise
                except Exception as exc:
                    raise ModelEvaluationError(
                        f"model evaluation failed at column r={int(r)}: {exc}", index=int(r)
                    ) from exc
        self._charge(thetas.shape[0], len(idx), data.r)
        return out


def residuals(
    model: ForwardModel, theta: np.ndarray, data: Dataset, cols: np.ndarray | None = None
) -> np.ndarray:
    """Error matrix with column r equal to y_r - f_r(theta), shape (K, R)."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.m,):
        raise ValueError(f"theta must have dimension {model.m}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta contains non-finite entries")
    pred = model.predict(theta, data, cols)
    obs = data.observations if cols is None else data.observations[:, cols]
    return obs - pred


# ---------------------------------------------------------------------------
# Priors over theta
# ---------------------------------------------------------------------------


class LogPrior:
    """Log-density over R^M; returns -inf outside the support (may be improper)."""

    def __call__(self, theta: np.ndarray) -> float:
        raise NotImplementedError

    def batch(self, thetas: np.ndarray) -> np.ndarray:
        return np.array([self(t) for t in np.asarray(thetas, dtype=float)])


class ImproperFlatPrior(LogPrior):
    """g(theta) proportional to 1 on all of R^M (log-density identically 0)."""

    def __call__(self, theta: np.ndarray) -> float:
        return 0.0

    def batch(self, thetas: np.ndarray) -> np.ndarray:
        return np.zeros(np.asarray(thetas).shape[0])


class UniformBoxPrior(LogPrior):
    """Proper uniform prior on an axis-aligned box."""

    def __init__(self, lows: Sequence[float], highs: Sequence[float]):
        self.lows = np.asarray(lows, dtype=float)
        self.highs = np.asarray(highs, dtype=float)
        if self.lows.shape != self.highs.shape or np.any(self.highs <= self.lows):
            raise ValueError("box bounds must satisfy lows < highs componentwise")
        self._log_density = -float(np.sum(np.log(self.highs - self.lows)))

    def __call__(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        inside = np.all(theta >= self.lows) and np.all(theta <= self.highs)
        return self._log_density if inside else -np.inf

    def batch(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.asarray(thetas, dtype=float)
        inside = np.all((thetas >= self.lows) & (thetas <= self.highs), axis=1)
        return np.where(inside, self._log_density, -np.inf)


class GaussianPrior(LogPrior):
    """Proper Gaussian prior N(mean, cov)."""

    def __init__(self, mean: Sequence[float], cov: np.ndarray):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = cov if isinstance(cov, SPDMatrix) else spd_from_matrix(np.asarray(cov, float))
        m = self.mean.shape[0]
        self._log_norm = -0.5 * (m * np.log(2.0 * np.pi) + self.cov.log_det)

    def __call__(self, theta: np.ndarray) -> float:
        d = np.asarray(theta, dtype=float) - self.mean
        return self._log_norm - 0.5 * float(self.cov.quad_forms(d[:, None])[0])

    def batch(self, thetas: np.ndarray) -> np.ndarray:
        d = np.asarray(thetas, dtype=float) - self.mean
        return self._log_norm - 0.5 * self.cov.quad_forms(d.T)


# ---------------------------------------------------------------------------
# Seeded random streams
# ---------------------------------------------------------------------------


def _encode_key(key) -> tuple[int, ...]:
    if isinstance(key, str):
        return (zlib.crc32(key.encode("utf-8")),)
    if isinstance(key, (int, np.integer)):
        k = int(key)
        if k < 0:
            raise ValueError("integer stream keys must be non-negative")
        parts = []
        while True:
            parts.append(k & 0xFFFFFFFF)
            k >>= 32
            if k == 0:
                return tuple(parts)
    raise TypeError(f"unsupported stream key type: {type(key)!r}")


@dataclass(frozen=True)
class RngStream:
    """Splittable random stream: the same seed and index path always yields
    the same draws, and child streams are statistically independent by
    construction (numpy SeedSequence spawn keys)."""

    seed: int
    path: tuple = ()

    def child(self, *keys) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(keys))

    def generator(self) -> np.random.Generator:
        spawn_key: tuple[int, ...] = ()
        for key in self.path:
            spawn_key = spawn_key + _encode_key(key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=spawn_key)
        return np.random.default_rng(seq)


# ---------------------------------------------------------------------------
# Sample storage
# ---------------------------------------------------------------------------


@dataclass
class IterationRecord:
    """Retained output of one sampler iteration.

    ``thetas``, ``log_weights``, ``log_q``, ``log_target``, ``log_prior`` and
    ``residual_blocks`` are aligned arrays over the retained samples of the
    iteration; ``residual_blocks[i]`` is the stored K x R error matrix
    e_{t,r} for sample i, which lets every later re-weighting stage avoid
    re-evaluating the forward model.
    """

    mu: np.ndarray
    lam: SPDMatrix
    sigma: SPDMatrix
    delta: float
    thetas: np.ndarray
    log_weights: np.ndarray
    log_q: np.ndarray
    log_target: np.ndarray
    log_prior: np.ndarray
    residual_blocks: np.ndarray
    n_drawn: int
    ess: float
    proposal_index: int = 0

    def __post_init__(self):
        n = self.thetas.shape[0]
        if self.residual_blocks.shape[0] != n:
            raise ValueError("residual block count must equal retained sample count")
        for name in ("log_weights", "log_q", "log_target", "log_prior"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ValueError(f"{name} must be aligned with retained samples")
            if np.any(np.isnan(arr)):
                raise ValueError(f"{name} contains NaN")


@dataclass
class SampleStore:
    """Per-run record of retained samples, proposals and running estimators."""

    n_per_iteration: int
    iterations: list[IterationRecord] = field(default_factory=list)
    sigma_ml_history: list[SPDMatrix] = field(default_factory=list)
    theta_map_history: list[np.ndarray] = field(default_factory=list)

    @property
    def t(self) -> int:
        return len(self.iterations)

    @property
    def n_retained(self) -> int:
        return sum(rec.thetas.shape[0] for rec in self.iterations)

    def stacked(self) -> dict:
        """Concatenate retained samples across iterations into flat arrays."""
        recs = [rec for rec in self.iterations if rec.thetas.shape[0] > 0]
        if not recs:
            raise ValueError("sample store is empty")
        idx = np.concatenate(
            [np.full(rec.thetas.shape[0], t) for t, rec in enumerate(self.iterations)
             if rec.thetas.shape[0] > 0]
        )
        return {
            "iteration": idx,
            "thetas": np.concatenate([rec.thetas for rec in recs], axis=0),
            "log_weights": np.concatenate([rec.log_weights for rec in recs]),
            "log_q": np.concatenate([rec.log_q for rec in recs]),
            "log_target": np.concatenate([rec.log_target for rec in recs]),
            "log_prior": np.concatenate([rec.log_prior for rec in recs]),
            "residual_blocks": np.concatenate([rec.residual_blocks for rec in recs], axis=0),
        }
