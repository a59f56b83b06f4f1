"""Domain types and elementary densities for mixed-effects mixture-of-experts
(MEMoE) models.

A dataset is a collection of subjects, each carrying subject-level covariates
``w`` and repeated observations ``(y, x, z)``: fixed-effect covariates ``x``,
random-effect design ``z``.  The model has ``K`` experts; expert ``k`` says

    y | u, label=k  ~  N(x'beta_k + z'u, sigma2_k)

with a shared subject-level random effect ``u ~ N(kappa w, Sigma)`` and a
softmax gating function assigning observations to experts based on a gating
input ``v`` built from the covariates.

Conventions: the caller includes intercept columns in ``x`` and ``w``
explicitly (no hidden columns are added here); all densities are computed in
log space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "GATE_X",
    "GATE_XZ",
    "Observation",
    "Subject",
    "Dataset",
    "ModelParams",
    "gaussian_logpdf",
    "gate_probs",
    "log_gate_probs",
    "gating_input",
    "conditional_mixture_logpdf",
]

# Gating-feature policies: the gating input v is either the fixed-effect
# covariate vector x or the concatenation (x, z).  Every simulation design
# gates on x only, so "x" is the default.
GATE_X = "x"
GATE_XZ = "xz"
_POLICIES = (GATE_X, GATE_XZ)


class MemoeError(Exception):
    """Base class for errors raised by this package."""


def _as_float_vector(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


def _as_float_matrix(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Observation:
    """One repeated measurement: response ``y``, fixed-effect covariates ``x``
    (length p), random-effect design ``z`` (length q)."""

    y: float
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", _as_float_vector(self.x, "x"))
        object.__setattr__(self, "z", _as_float_vector(self.z, "z"))
        if not np.isfinite(self.y):
            raise ValueError("y must be finite")


class Subject:
    """One subject: an identifier, subject-level covariates ``w`` (length d),
    and ``n_i >= 1`` observations stored as stacked arrays.

    Parameters
    ----------
    id : hashable
        Opaque subject identifier.
    w : array of shape (d,)
        Subject-level covariates (include the intercept 1 explicitly).
    y : array of shape (n_i,)
        Responses in observation order.
    X : array of shape (n_i, p)
        Fixed-effect covariate rows.
    Z : array of shape (n_i, q)
        Random-effect design rows.
    """

    __slots__ = ("id", "w", "y", "X", "Z")

    def __init__(self, id, w, y, X, Z):
        self.id = id
        self.w = _as_float_vector(w, "w")
        y = np.atleast_1d(np.asarray(y, dtype=float))
        X = _as_float_matrix(np.atleast_2d(X), "X")
        Z = _as_float_matrix(np.atleast_2d(Z), "Z")
        if y.ndim != 1 or not np.all(np.isfinite(y)):
            raise ValueError("y must be a finite 1-d vector")
        if y.shape[0] < 1:
            raise ValueError("subject must have at least one observation")
        if X.shape[0] != y.shape[0] or Z.shape[0] != y.shape[0]:
            raise ValueError("X, Z, y row counts disagree")
        y.flags.writeable = False
        self.y = y
        self.X = X
        self.Z = Z

    @classmethod
    def from_observations(cls, id, w, obs: Sequence[Observation]) -> "Subject":
        if len(obs) < 1:
            raise ValueError("subject must have at least one observation")
        y = np.array([o.y for o in obs], dtype=float)
        X = np.stack([o.x for o in obs])
        Z = np.stack([o.z for o in obs])
        return cls(id, w, y, X, Z)

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def obs(self) -> list[Observation]:
        """Observation view of the stacked arrays."""
        return [Observation(float(self.y[j]), self.X[j], self.Z[j])
                for j in range(self.n_obs)]

    def __repr__(self):
        return f"Subject(id={self.id!r}, n_obs={self.n_obs})"


class Dataset:
    """An immutable collection of subjects sharing dimensions (p, q, d).

    Construction packs all observations into flat row-major arrays
    (``y_all``, ``x_all``, ``z_all``, ``gate_all``) with subject bookkeeping
    (``row_subject``, ``offsets``) so that per-subject operations can be
    vectorized across the whole dataset.  Rows of a subject are contiguous
    and keep their original order.

    Parameters
    ----------
    subjects : sequence of Subject
    gating_policy : {"x", "xz"}
        How the gating input v is built from an observation's covariates.
    """

    def __init__(self, subjects: Sequence[Subject], gating_policy: str = GATE_X):
        subjects = tuple(subjects)
        if len(subjects) < 1:
            raise ValueError("dataset must contain at least one subject")
        if gating_policy not in _POLICIES:
            raise ValueError(f"unknown gating policy {gating_policy!r}")
        p = subjects[0].X.shape[1]
        q = subjects[0].Z.shape[1]
        d = subjects[0].w.shape[0]
        for s in subjects:
            if s.X.shape[1] != p or s.Z.shape[1] != q or s.w.shape[0] != d:
                raise ValueError(
                    f"subject {s.id!r} has dims "
                    f"(p={s.X.shape[1]}, q={s.Z.shape[1]}, d={s.w.shape[0]}), "
                    f"expected (p={p}, q={q}, d={d})")
        self.subjects = subjects
        self.gating_policy = gating_policy
        self.dims = (p, q, d)
        self.N = len(subjects)
        counts = np.array([s.n_obs for s in subjects], dtype=np.int64)
        self.n_per_subject = counts
        self.total_obs = int(counts.sum())
        offsets = np.zeros(self.N + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        self.offsets = offsets
        self.y_all = np.concatenate([s.y for s in subjects])
        self.x_all = np.vstack([s.X for s in subjects])
        self.z_all = np.vstack([s.Z for s in subjects])
        self.w_all = np.vstack([s.w for s in subjects])
        self.row_subject = np.repeat(np.arange(self.N, dtype=np.int64), counts)
        if gating_policy == GATE_X:
            self.gate_all = self.x_all
        else:
            self.gate_all = np.hstack([self.x_all, self.z_all])
        for arr in (self.y_all, self.x_all, self.z_all, self.w_all,
                    self.row_subject, self.offsets, self.n_per_subject,
                    self.gate_all):
            arr.flags.writeable = False

    @property
    def p(self) -> int:
        return self.dims[0]

    @property
    def q(self) -> int:
        return self.dims[1]

    @property
    def d(self) -> int:
        return self.dims[2]

    @property
    def g(self) -> int:
        """Length of the gating input."""
        return self.gate_all.shape[1]

    def subset(self, indices) -> "Dataset":
        """New dataset restricted to the given subject indices (kept order)."""
        return Dataset([self.subjects[i] for i in indices], self.gating_policy)

    def __repr__(self):
        p, q, d = self.dims
        return (f"Dataset(N={self.N}, total_obs={self.total_obs}, "
                f"p={p}, q={q}, d={d}, gating={self.gating_policy!r})")


@dataclass(frozen=True)
class ModelParams:
    """Full parameter set of a K-expert model.

    Fields
    ------
    alpha : (K, g) gating coefficients; the last row is identically zero
        (reference class, which makes the softmax parameters identifiable).
    beta : (K, p) expert fixed-effect coefficients, one row per expert.
    sigma2 : (K,) expert noise variances, all positive.
    kappa : (q, d) random-effect mean map (u has mean kappa @ w).
    Sigma : (q, q) random-effect covariance, symmetric positive definite.
    """

    alpha: np.ndarray
    beta: np.ndarray
    sigma2: np.ndarray
    kappa: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", _as_float_matrix(self.alpha, "alpha"))
        object.__setattr__(self, "beta", _as_float_matrix(self.beta, "beta"))
        object.__setattr__(self, "sigma2",
                           _as_float_vector(self.sigma2, "sigma2"))
        object.__setattr__(self, "kappa", _as_float_matrix(self.kappa, "kappa"))
        object.__setattr__(self, "Sigma", _as_float_matrix(self.Sigma, "Sigma"))
        K = self.beta.shape[0]
        if K < 1:
            raise ValueError("need at least one expert")
        if self.alpha.shape[0] != K or self.sigma2.shape[0] != K:
            raise ValueError("alpha, beta, sigma2 disagree on expert count")
        if np.any(self.alpha[-1] != 0.0):
            raise ValueError("last alpha row must be identically zero")
        if np.any(self.sigma2 <= 0.0):
            raise ValueError("sigma2 entries must be positive")
        q = self.kappa.shape[0]
        if self.Sigma.shape != (q, q):
            raise ValueError("Sigma shape does not match kappa rows")
        if not np.allclose(self.Sigma, self.Sigma.T,
                           rtol=0.0, atol=1e-12 * (1.0 + np.abs(self.Sigma).max())):
            raise ValueError("Sigma must be symmetric")
        if np.linalg.eigvalsh(self.Sigma).min() <= 0.0:
            raise ValueError("Sigma must be positive definite")

    @property
    def K(self) -> int:
        return self.beta.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[1]

    @property
    def q(self) -> int:
        return self.kappa.shape[0]

    @property
    def d(self) -> int:
        return self.kappa.shape[1]

    @property
    def g(self) -> int:
        return self.alpha.shape[1]

    def replace(self, **kwargs) -> "ModelParams":
        fields = dict(alpha=self.alpha, beta=self.beta, sigma2=self.sigma2,
                      kappa=self.kappa, Sigma=self.Sigma)
        fields.update(kwargs)
        return ModelParams(**fields)


# ---------------------------------------------------------------------------
# Elementary densities
# ---------------------------------------------------------------------------

_LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_logpdf(y, mean, var):
    """Log density of N(mean, var) at y.

    Scalar or broadcasting array arguments.  Raises ``ValueError`` on any
    non-positive variance.
    """
    var = np.asarray(var, dtype=float)
    if np.any(var <= 0.0):
        raise ValueError("variance must be positive")
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    out = -0.5 * (np.log(2.0 * np.pi * var) + (y - mean) ** 2 / var)
    return float(out) if out.ndim == 0 else out


def gating_input(x, z, policy: str = GATE_X) -> np.ndarray:
    """Gating input vector for one observation under the given policy."""
    x = np.asarray(x, dtype=float)
    if policy == GATE_X:
        return x
    if policy == GATE_XZ:
        return np.concatenate([x, np.asarray(z, dtype=float)])
    raise ValueError(f"unknown gating policy {policy!r}")


def log_gate_probs(v, alpha) -> np.ndarray:
    """Log softmax gate probabilities.

    ``v`` may be a single gating input (g,) or a stack (T, g); ``alpha`` is
    (K, g).  Returns (K,) or (T, K).  Stabilized by max-subtraction, so
    entries of magnitude 1e3 are safe.
    """
    v = np.asarray(v, dtype=float)
    logits = v @ np.asarray(alpha, dtype=float).T
    return logits - logsumexp(logits, axis=-1, keepdims=True)


def gate_probs(v, alpha) -> np.ndarray:
    """Softmax gate probabilities pi_k(v) = exp(v'a_k) / sum_l exp(v'a_l)."""
    return np.exp(log_gate_probs(v, alpha))


def conditional_mixture_logpdf(obs: Observation, u, params: ModelParams,
                               gating_policy: str = GATE_X) -> float:
    """Log density of one observation's response given the random effect u.

    log sum_k pi_k(v) N(y; x'beta_k + z'u, sigma2_k), via log-sum-exp.
    """
    u = np.asarray(u, dtype=float)
    v = gating_input(obs.x, obs.z, gating_policy)
    means = params.beta @ obs.x + float(obs.z @ u)
    log_phi = -0.5 * (np.log(2.0 * np.pi * params.sigma2)
                      + (obs.y - means) ** 2 / params.sigma2)
    return float(logsumexp(log_gate_probs(v, params.alpha) + log_phi))
