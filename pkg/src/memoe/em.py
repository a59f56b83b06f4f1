"""The outer EM loop for mixed-effects mixture-of-experts models.

The E-step finds every subject's random-effect mode and curvature (see
:mod:`memoe.laplace`) and the per-observation responsibilities

    gamma_ijk  propto  pi_k(v_ij) N(y_ij; x_ij'beta_k + z_ij'u_hat_i, s2_k).

The M-step maximizes the minorizing surrogate built from Jensen's inequality
on the observation mixtures plus a linearization of -log|H_i|, which yields
five closed-form-or-Newton block updates: gating coefficients (soft-target
multinomial logistic Newton), expert coefficients (weighted least squares on
the mode-residualized response), noise variances (weighted residual moments
plus the z'H^{-1}z curvature correction), the random-effect mean map, and the
random-effect covariance.

The driver runs several random initializations and keeps the start with the
highest final approximated log-likelihood.  The likelihood trace is monitored:
tiny relative dips are tolerated (the surrogate guarantees its own ascent, not
exactly that of the approximated likelihood), larger ones warn, and dips
beyond 1e-4 relative abort the start at the previous iterate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .model import Dataset, ModelParams, _LOG_2PI, MemoeError
from .laplace import (ModeConfig, SubjectPosterior, _Packed, _SigmaOps,
                      _find_modes, _segment_sum)

__all__ = [
    "FitConfig",
    "FitError",
    "Responsibilities",
    "EMState",
    "DatasetSums",
    "FitDiagnostics",
    "FittedModel",
    "e_step",
    "q_surrogate",
    "m_step_alpha",
    "m_step_beta",
    "m_step_sigma2",
    "m_step_kappa",
    "m_step_Sigma",
    "fit",
    "fit_from",
    "select_k",
]

_DIP_SLACK = 1e-8   # relative log-likelihood dips beyond this end the start
_DIP_WARN = 1e-4    # ... and beyond this warn loudly as well
_DYING_EXPERT = 1e-8
_ALPHA_CLAMP = 50.0


class FitError(MemoeError):
    """Raised when no start of the EM driver produces a usable fit."""


@dataclass(frozen=True)
class FitConfig:
    """Settings of the EM driver.

    ``fix_kappa_zero`` and ``fix_sigma_to_floor`` realize the restricted
    baseline variants: zero-mean random effects, and (with both set) the
    no-random-effects mixture where the random-effect covariance is pinned to
    the eigenvalue floor so the modes collapse to zero.
    """

    K: int = 2
    max_em_iters: int = 500
    em_rel_tol: float = 1e-6
    n_starts: int = 5
    seed: int = 0
    sigma2_floor: float = 1e-6
    sigma_eig_floor: float = 1e-8
    mode_tol: float = 1e-8
    mode_max_iters: int = 100
    gating_newton_iters: int = 50
    fix_kappa_zero: bool = False
    fix_sigma_to_floor: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        for name in ("em_rel_tol", "sigma2_floor", "sigma_eig_floor",
                     "mode_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_starts < 1 or self.max_em_iters < 1:
            raise ValueError("n_starts and max_em_iters must be >= 1")

    def mode_config(self) -> ModeConfig:
        return ModeConfig(mode_tol=self.mode_tol,
                          mode_max_iters=self.mode_max_iters)


class Responsibilities:
    """Per-observation expert responsibilities.

    Stored flat as a (total_obs, K) row-stochastic array aligned with the
    dataset's packed row order; ``for_subject(i)`` returns the (n_i, K)
    block of subject i.
    """

    def __init__(self, flat: np.ndarray, offsets: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        if flat.ndim != 2:
            raise ValueError("responsibilities must be (rows, K)")
        self.flat = flat
        self.offsets = offsets

    @property
    def K(self) -> int:
        return self.flat.shape[1]

    def for_subject(self, i: int) -> np.ndarray:
        return self.flat[self.offsets[i]:self.offsets[i + 1]]

    def row_sums(self) -> np.ndarray:
        return self.flat.sum(axis=1)


@dataclass
class EMState:
    """Snapshot of one E-step: everything the surrogate and the M-step need."""

    params: ModelParams
    U: np.ndarray           # (N, q) modes
    H: np.ndarray           # (N, q, q) curvature at the modes
    H_inv: np.ndarray       # (N, q, q)
    log_det_H: np.ndarray   # (N,)
    h: np.ndarray           # (N,)
    gamma: np.ndarray       # (T, K)
    loglik: float
    mode_unconverged: int
    grad_norm: np.ndarray   # (N,)
    iters: np.ndarray       # (N,)
    mode_converged: np.ndarray  # (N,) bool


@dataclass(frozen=True)
class DatasetSums:
    """Training-data summaries frozen into a fitted model so that prediction
    never needs the training data: per-expert weighted Gram matrices
    sum_ij gamma_ijk x x'/s2_k and the subject-covariate Gram sum_i w w'."""

    gram: np.ndarray     # (K, p, p)
    w_gram: np.ndarray   # (d, d)


@dataclass
class FitDiagnostics:
    """Counters and flags accumulated while fitting."""

    stopped_on_dip: bool = False
    dip_count: int = 0
    max_rel_dip: float = 0.0
    degenerate_experts: set = field(default_factory=set)
    sigma2_floor_hits: int = 0
    sigma_eig_floor_hits: int = 0
    alpha_clamped: int = 0
    ridge_fallbacks: int = 0
    mode_unconverged: int = 0
    curvature_floor_hits: int = 0


@dataclass
class FittedModel:
    """Result of the EM driver: converged parameters, per-subject posteriors,
    responsibilities, the log-likelihood trace, and prediction summaries."""

    params: ModelParams
    posteriors: list
    gamma: Responsibilities
    loglik_trace: list
    converged: bool
    em_iters: int
    best_of: dict
    sums: DatasetSums
    gating_policy: str
    dims: tuple
    diagnostics: FitDiagnostics
    cfg: FitConfig | None = None

    @property
    def final_loglik(self) -> float:
        return self.loglik_trace[-1]

    @property
    def K(self) -> int:
        return self.params.K

    def mode_matrix(self) -> np.ndarray:
        return np.stack([p.u_hat for p in self.posteriors])


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

def _e_step_arrays(dataset: Dataset, params: ModelParams, cfg: FitConfig,
                   U0=None) -> EMState:
    packed = _Packed.from_dataset(dataset)
    mp = _find_modes(packed, params, cfg.mode_config(), U0)
    terms = mp.h + 0.5 * dataset.q * _LOG_2PI - 0.5 * mp.log_det_H
    return EMState(params=params, U=mp.U, H=mp.H, H_inv=np.linalg.inv(mp.H),
                   log_det_H=mp.log_det_H, h=mp.h, gamma=mp.gamma,
                   loglik=float(np.sum(terms)),
                   mode_unconverged=int((~mp.converged).sum()),
                   grad_norm=mp.grad_norm, iters=mp.iters,
                   mode_converged=mp.converged)


def e_step(dataset: Dataset, params: ModelParams,
           cfg: FitConfig | None = None, prev_posteriors=None):
    """Modes, curvatures, and responsibilities at the current parameters.

    ``prev_posteriors`` warm-starts the mode search.  Returns a list of
    :class:`SubjectPosterior` and a :class:`Responsibilities`.
    """
    cfg = cfg or FitConfig(K=params.K)
    U0 = None
    if prev_posteriors is not None:
        U0 = np.stack([p.u_hat for p in prev_posteriors])
    state = _e_step_arrays(dataset, params, cfg, U0)
    posteriors = _posterior_list(dataset, state, cfg)
    return posteriors, Responsibilities(state.gamma, dataset.offsets)


def _posterior_list(dataset: Dataset, state: EMState, cfg: FitConfig):
    return [SubjectPosterior(u_hat=state.U[i], H=state.H[i],
                             log_det_H=float(state.log_det_H[i]),
                             h_at_mode=float(state.h[i]),
                             newton_iters=int(state.iters[i]),
                             grad_norm=float(state.grad_norm[i]),
                             converged=bool(state.mode_converged[i]))
            for i in range(dataset.N)]


# ---------------------------------------------------------------------------
# Surrogate
# ---------------------------------------------------------------------------

def q_surrogate(dataset: Dataset, params_new: ModelParams,
                state_at_t: EMState) -> float:
    """The minorizing surrogate evaluated at candidate parameters.

    With modes, curvatures, and responsibilities frozen at the state's
    iterate: the random-effect prior at the frozen modes, the responsibility-
    weighted complete-data terms (including the entropy -gamma log gamma),
    and the trace linearization of -log|H_i| with the curvature rebuilt from
    the frozen responsibilities at the candidate variances.
    """
    packed = _Packed.from_dataset(dataset)
    sig = _SigmaOps(params_new.Sigma)
    U, gamma = state_at_t.U, state_at_t.gamma
    diff = U - packed.W @ params_new.kappa.T
    prior = -0.5 * (dataset.q * _LOG_2PI + sig.logdet + sig.mahalanobis(diff))
    zu = np.einsum("tq,tq->t", packed.Z, U[packed.row_subject])
    means = packed.X @ params_new.beta.T + zu[:, None]
    resid = packed.y[:, None] - means
    log_phi = -0.5 * (np.log(2.0 * np.pi * params_new.sigma2)[None, :]
                      + resid ** 2 / params_new.sigma2[None, :])
    logits = packed.V @ params_new.alpha.T
    log_pi = logits - logsumexp(logits, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(gamma > 0.0, gamma * np.log(gamma), 0.0)
    rows = (gamma * (log_pi + log_phi) - ent).sum(axis=1)
    # Curvature at the candidate parameters with frozen responsibilities.
    c = (gamma / params_new.sigma2[None, :]).sum(axis=1)
    outer = np.einsum("t,ti,tj->tij", c, packed.Z, packed.Z)
    H_new = sig.inv[None, :, :] + _segment_sum(outer, packed.offsets)
    tr = np.einsum("nij,nji->n", state_at_t.H_inv, H_new)
    return float(np.sum(prior) + np.sum(rows) - 0.5 * np.sum(tr))


# ---------------------------------------------------------------------------
# M-step blocks
# ---------------------------------------------------------------------------

def _soft_multinomial_objective(V, gamma, alpha):
    logits = V @ alpha.T
    log_pi = logits - logsumexp(logits, axis=1, keepdims=True)
    return float((gamma * log_pi).sum())


def m_step_alpha(gating_inputs, gamma, alpha_init, cfg: FitConfig):
    """Maximize sum_t sum_k gamma_tk log pi_k(v_t; alpha) by Newton ascent.

    The last expert's row is held at zero (reference class).  Coefficients
    are clamped at magnitude 50 when the soft targets are separable and the
    objective is unbounded.
    """
    V = np.asarray(gating_inputs, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    K = gamma.shape[1]
    g = V.shape[1]
    alpha = np.array(alpha_init, dtype=float, copy=True)
    if K == 1:
        return np.zeros((1, g))
    free = K - 1
    f = _soft_multinomial_objective(V, gamma, alpha)
    best_alpha, best_f = alpha.copy(), f
    clamped = 0
    for _ in range(cfg.gating_newton_iters):
        logits = V @ alpha.T
        pi = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        grad = np.einsum("tk,tg->kg", gamma[:, :free] - pi[:, :free], V)
        if np.abs(grad).max() < 1e-8:
            break
        # Negative Hessian blocks B[k,l] = sum_t pi_k (d_kl - pi_l) v v'.
        B = np.einsum("tk,tl,ta,tb->kalb", pi[:, :free], pi[:, :free], V, V)
        diag = np.einsum("tk,ta,tb->kab", pi[:, :free], V, V)
        for k in range(free):
            B[k, :, k, :] = diag[k] - B[k, :, k, :]
            for l in range(free):
                if l != k:
                    B[k, :, l, :] = -B[k, :, l, :]
        Bm = B.reshape(free * g, free * g)
        Bm = Bm + 1e-10 * (np.trace(Bm) / Bm.shape[0] + 1.0) * np.eye(free * g)
        step = np.linalg.solve(Bm, grad.reshape(-1)).reshape(free, g)
        scale = 1.0
        for _ in range(31):
            trial = alpha.copy()
            trial[:free] += scale * step
            f_try = _soft_multinomial_objective(V, gamma, trial)
            if f_try >= f:
                alpha, f = trial, f_try
                break
            scale *= 0.5
        else:
            break
        if np.abs(alpha).max() > _ALPHA_CLAMP:
            alpha = np.clip(alpha, -_ALPHA_CLAMP, _ALPHA_CLAMP)
            alpha[-1] = 0.0
            f = _soft_multinomial_objective(V, gamma, alpha)
            clamped += 1
        if f >= best_f:
            best_alpha, best_f = alpha.copy(), f
        if clamped:
            break
    if clamped:
        warnings.warn("gating coefficients clamped at magnitude 50 "
                      "(separable responsibilities)")
    best_alpha[-1] = 0.0
    return best_alpha


def _solve_gram(G, rhs, what: str, diag: FitDiagnostics | None = None):
    """Solve G b = rhs for an SPD Gram matrix, ridging it when degenerate."""
    try:
        return cho_solve(cho_factor(G, lower=True), rhs)
    except np.linalg.LinAlgError:
        pass
    except ValueError:
        pass
    ridge = 1e-10 * np.trace(G) / G.shape[0] + 1e-300
    warnings.warn(f"rank-deficient {what} matrix; solving with ridge")
    if diag is not None:
        diag.ridge_fallbacks += 1
    return np.linalg.solve(G + ridge * np.eye(G.shape[0]), rhs)


def _beta_update(packed: _Packed, gamma, U, sigma2, beta_old, diag=None):
    K, p = gamma.shape[1], packed.X.shape[1]
    zu = np.einsum("tq,tq->t", packed.Z, U[packed.row_subject])
    target = packed.y - zu
    beta = np.array(beta_old, dtype=float, copy=True)
    counts = gamma.sum(axis=0)
    for k in range(K):
        if counts[k] < _DYING_EXPERT:
            continue
        wts = gamma[:, k] / sigma2[k]
        G = (packed.X * wts[:, None]).T @ packed.X
        rhs = (packed.X * wts[:, None]).T @ target
        beta[k] = _solve_gram(G, rhs, "weighted Gram", diag)
    return beta


def m_step_beta(dataset: Dataset, gamma, posteriors, sigma2) -> np.ndarray:
    """Weighted least-squares update of every expert's coefficients:
    beta_k = (sum gamma x x'/s2_k)^{-1} sum gamma x (y - z'u_hat)/s2_k."""
    packed = _Packed.from_dataset(dataset)
    gamma = _flat_gamma(gamma)
    U = _modes_array(posteriors)
    sigma2 = np.asarray(sigma2, dtype=float)
    beta_old = np.zeros((gamma.shape[1], dataset.p))
    return _beta_update(packed, gamma, U, sigma2, beta_old)


def _sigma2_update(packed: _Packed, gamma, U, H_inv, beta_new, floor,
                   prev_sigma2, row_subject, diag=None):
    K = gamma.shape[1]
    zu = np.einsum("tq,tq->t", packed.Z, U[row_subject])
    resid = packed.y[:, None] - packed.X @ beta_new.T - zu[:, None]
    corr = np.einsum("ti,tij,tj->t", packed.Z, H_inv[row_subject], packed.Z)
    counts = gamma.sum(axis=0)
    num = (gamma * (resid ** 2 + corr[:, None])).sum(axis=0)
    sigma2 = np.empty(K)
    for k in range(K):
        if counts[k] < _DYING_EXPERT:
            sigma2[k] = prev_sigma2[k]
            if diag is not None:
                diag.degenerate_experts.add(k)
        else:
            sigma2[k] = num[k] / counts[k]
    floored = sigma2 < floor
    if floored.any() and diag is not None:
        diag.sigma2_floor_hits += int(floored.sum())
    return np.maximum(sigma2, floor)


def m_step_sigma2(dataset: Dataset, gamma, posteriors, beta_new,
                  floor: float = 1e-6, prev_sigma2=None) -> np.ndarray:
    """Noise-variance update: responsibility-weighted mean of the squared
    mode residuals plus the z'H^{-1}z curvature correction, floored."""
    packed = _Packed.from_dataset(dataset)
    gamma = _flat_gamma(gamma)
    U = _modes_array(posteriors)
    H_inv = np.stack([np.linalg.inv(p.H) for p in posteriors])
    beta_new = np.asarray(beta_new, dtype=float)
    if prev_sigma2 is None:
        prev_sigma2 = np.full(gamma.shape[1], floor)
    return _sigma2_update(packed, gamma, U, H_inv, beta_new, floor,
                          np.asarray(prev_sigma2, dtype=float),
                          dataset.row_subject)


def _kappa_update(W, U, diag=None):
    d = W.shape[1]
    if d == 0:
        return np.zeros((U.shape[1], 0))
    G = W.T @ W
    rhs = W.T @ U     # (d, q)
    return _solve_gram(G, rhs, "subject-covariate Gram", diag).T


def m_step_kappa(dataset: Dataset, posteriors) -> np.ndarray:
    """Random-effect mean map: kappa = (sum u w')(sum w w')^{-1}."""
    return _kappa_update(dataset.w_all, _modes_array(posteriors))


def _Sigma_update(W, U, H_inv, kappa_new, eig_floor, diag=None):
    diff = U - W @ kappa_new.T
    N = U.shape[0]
    S = (diff.T @ diff + H_inv.sum(axis=0)) / N
    S = 0.5 * (S + S.T)
    vals, vecs = np.linalg.eigh(S)
    if vals.min() < eig_floor:
        if diag is not None:
            diag.sigma_eig_floor_hits += 1
        vals = np.maximum(vals, eig_floor)
        S = (vecs * vals) @ vecs.T
        S = 0.5 * (S + S.T)
    return S


def m_step_Sigma(dataset: Dataset, posteriors, kappa_new,
                 eig_floor: float = 1e-8) -> np.ndarray:
    """Random-effect covariance update: mean of centered mode outer products
    plus the posterior curvatures H^{-1}, symmetrized, eigenvalue-floored."""
    U = _modes_array(posteriors)
    H_inv = np.stack([np.linalg.inv(p.H) for p in posteriors])
    return _Sigma_update(dataset.w_all, U, H_inv,
                         np.asarray(kappa_new, dtype=float), eig_floor)


def _flat_gamma(gamma):
    if isinstance(gamma, Responsibilities):
        return gamma.flat
    return np.asarray(gamma, dtype=float)


def _modes_array(posteriors):
    if isinstance(posteriors, np.ndarray):
        return posteriors
    return np.stack([p.u_hat for p in posteriors])


# ---------------------------------------------------------------------------
# Initialization and the driver
# ---------------------------------------------------------------------------

def _init_params(dataset: Dataset, cfg: FitConfig,
                 seed_seq: np.random.SeedSequence,
                 style: str = "random") -> ModelParams:
    """Starting parameters from initial responsibilities.

    ``random``: per-observation uniforms, normalized, then squared and
    renormalized to sharpen.  ``quantile``: near-one-hot responsibilities
    from pooled least-squares residual quantile blocks, which separates
    mean-shifted experts immediately (random responsibilities average the
    experts out and can strand the fit at the blurred symmetric stationary
    point).  Either way one M-step with zero modes follows, with Sigma = I
    and kappa = 0.
    """
    rng = np.random.Generator(np.random.Philox(seed_seq))
    T, K = dataset.total_obs, cfg.K
    packed = _Packed.from_dataset(dataset)
    if K == 1:
        gamma0 = np.ones((T, 1))
    elif style == "quantile":
        pooled, *_ = np.linalg.lstsq(dataset.x_all, dataset.y_all,
                                     rcond=None)
        resid = dataset.y_all - dataset.x_all @ pooled
        ranks = np.argsort(np.argsort(resid, kind="stable"), kind="stable")
        block = np.minimum((ranks * K) // T, K - 1)
        gamma0 = np.full((T, K), 0.05 / max(K - 1, 1))
        gamma0[np.arange(T), block] = 0.95
    else:
        raw = rng.uniform(size=(T, K)) + 1e-12
        gamma0 = raw / raw.sum(axis=1, keepdims=True)
        gamma0 = gamma0 ** 2
        gamma0 /= gamma0.sum(axis=1, keepdims=True)
    alpha0 = m_step_alpha(dataset.gate_all, gamma0,
                          np.zeros((K, dataset.g)), cfg)
    U0 = np.zeros((dataset.N, dataset.q))
    beta0 = _beta_update(packed, gamma0, U0, np.ones(K),
                         np.zeros((K, dataset.p)))
    zeroH = np.zeros((dataset.N, dataset.q, dataset.q))
    sigma20 = _sigma2_update(packed, gamma0, U0, zeroH, beta0,
                             cfg.sigma2_floor, np.ones(K),
                             dataset.row_subject)
    kappa0 = np.zeros((dataset.q, dataset.d))
    if cfg.fix_sigma_to_floor:
        Sigma0 = cfg.sigma_eig_floor * np.eye(dataset.q)
    else:
        Sigma0 = np.eye(dataset.q)
    return ModelParams(alpha=alpha0, beta=beta0, sigma2=sigma20,
                       kappa=kappa0, Sigma=Sigma0)


def _m_step(dataset: Dataset, packed: _Packed, state: EMState,
            cfg: FitConfig, diag: FitDiagnostics) -> ModelParams:
    params, gamma, U = state.params, state.gamma, state.U
    counts = gamma.sum(axis=0)
    for k in np.nonzero(counts < _DYING_EXPERT)[0]:
        diag.degenerate_experts.add(int(k))
    alpha_new = m_step_alpha(dataset.gate_all, gamma, params.alpha, cfg)
    beta_new = _beta_update(packed, gamma, U, params.sigma2, params.beta,
                            diag)
    sigma2_new = _sigma2_update(packed, gamma, U, state.H_inv, beta_new,
                                cfg.sigma2_floor, params.sigma2,
                                dataset.row_subject, diag)
    if cfg.fix_kappa_zero or dataset.d == 0:
        kappa_new = np.zeros((dataset.q, dataset.d))
    else:
        kappa_new = _kappa_update(dataset.w_all, U, diag)
    if cfg.fix_sigma_to_floor:
        Sigma_new = cfg.sigma_eig_floor * np.eye(dataset.q)
    else:
        Sigma_new = _Sigma_update(dataset.w_all, U, state.H_inv, kappa_new,
                                  cfg.sigma_eig_floor, diag)
    return ModelParams(alpha=alpha_new, beta=beta_new, sigma2=sigma2_new,
                       kappa=kappa_new, Sigma=Sigma_new)


def fit_from(dataset: Dataset, params0: ModelParams,
             cfg: FitConfig) -> FittedModel:
    """Deterministic single-start EM from the given initial parameters."""
    packed = _Packed.from_dataset(dataset)
    diag = FitDiagnostics()
    params = params0
    trace: list[float] = []
    U_warm = None
    prev_state: EMState | None = None
    converged = False
    state = None
    for t in range(cfg.max_em_iters + 1):
        state = _e_step_arrays(dataset, params, cfg, U_warm)
        diag.mode_unconverged += state.mode_unconverged
        if trace:
            dip = trace[-1] - state.loglik
            rel_dip = dip / (1.0 + abs(trace[-1]))
            if rel_dip > _DIP_SLACK:
                # The surrogate can no longer certify ascent of the
                # approximated likelihood (its linearization slack): the
                # previous iterate is the peak, so stop there.
                diag.stopped_on_dip = True
                diag.dip_count += 1
                diag.max_rel_dip = max(diag.max_rel_dip, rel_dip)
                if rel_dip > _DIP_WARN:
                    warnings.warn(
                        f"log-likelihood dropped by {dip:.3e}; stopping "
                        "this start at the previous iterate")
                state = prev_state
                params = state.params
                converged = True
                break
        trace.append(state.loglik)
        if len(trace) >= 2:
            rel_change = (abs(trace[-1] - trace[-2])
                          / (1.0 + abs(trace[-2])))
            if rel_change < cfg.em_rel_tol:
                converged = True
                break
        if t == cfg.max_em_iters:
            break
        prev_state = state
        params = _m_step(dataset, packed, state, cfg, diag)
        U_warm = state.U
    gamma = Responsibilities(state.gamma, dataset.offsets)
    posteriors = _posterior_list(dataset, state, cfg)
    sums = _dataset_sums(dataset, state)
    return FittedModel(params=state.params, posteriors=posteriors,
                       gamma=gamma, loglik_trace=trace, converged=converged,
                       em_iters=len(trace), best_of={},
                       sums=sums, gating_policy=dataset.gating_policy,
                       dims=dataset.dims, diagnostics=diag, cfg=cfg)


def _dataset_sums(dataset: Dataset, state: EMState) -> DatasetSums:
    wts = state.gamma / state.params.sigma2[None, :]
    gram = np.einsum("tk,ti,tj->kij", wts, dataset.x_all, dataset.x_all)
    return DatasetSums(gram=gram, w_gram=dataset.w_all.T @ dataset.w_all)


def fit(dataset: Dataset, cfg: FitConfig) -> FittedModel:
    """Multi-start EM driver.

    Runs ``cfg.n_starts`` independent random initializations and returns the
    one with the highest final approximated log-likelihood.  Raises
    :class:`FitError` if every start fails.
    """
    results = []
    errors = []
    for s in range(cfg.n_starts):
        seed_seq = np.random.SeedSequence(cfg.seed, spawn_key=(s,))
        style = "quantile" if s == 0 else "random"
        try:
            params0 = _init_params(dataset, cfg, seed_seq, style)
            fitted = fit_from(dataset, params0, cfg)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            errors.append(f"start {s}: {exc}")
            results.append(None)
            continue
        if not math.isfinite(fitted.final_loglik):
            errors.append(f"start {s}: non-finite log-likelihood")
            results.append(None)
            continue
        results.append(fitted)
    finals = [r.final_loglik if r is not None else -np.inf for r in results]
    best_idx = int(np.argmax(finals))
    if results[best_idx] is None:
        raise FitError("all starts failed: " + "; ".join(errors))
    best = results[best_idx]
    best.best_of = {
        "n_starts": cfg.n_starts,
        "chosen": best_idx,
        "final_logliks": [None if not math.isfinite(f) else f for f in finals],
        "failures": errors,
    }
    return best


# ---------------------------------------------------------------------------
# Expert-count selection by subject-level cross-validation
# ---------------------------------------------------------------------------

def select_k(dataset: Dataset, k_range, folds: int, cfg: FitConfig,
             seed: int = 0):
    """Choose the expert count by subject-level K-fold cross-validation.

    Every subject's observations share a fold.  For each candidate K and
    fold, the model fits on the remaining subjects and scores held-out
    root-mean-squared prediction error.  A (K, fold) cell with a dying expert
    is marked failed; a K with more than half its folds failed is
    disqualified.  Returns ``(best_k, table)`` where the table rows are
    dicts with keys K, fold, rmse, failed.
    """
    from .predict import point_predict
    if folds < 2 or folds > dataset.N:
        raise ValueError("folds must be in [2, N]")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    order = rng.permutation(dataset.N)
    fold_of = np.empty(dataset.N, dtype=int)
    fold_of[order] = np.arange(dataset.N) % folds
    table = []
    mean_rmse = {}
    for K in k_range:
        cfg_k = dc_replace(cfg, K=int(K))
        rmses, failed = [], 0
        for f in range(folds):
            train = np.nonzero(fold_of != f)[0]
            test = np.nonzero(fold_of == f)[0]
            cell = {"K": int(K), "fold": f, "rmse": None, "failed": False}
            try:
                fitted = fit(dataset.subset(train), cfg_k)
            except FitError:
                cell["failed"] = True
                failed += 1
                table.append(cell)
                continue
            if fitted.diagnostics.degenerate_experts:
                cell["failed"] = True
                failed += 1
                table.append(cell)
                continue
            se = []
            for i in test:
                s = dataset.subjects[i]
                for j in range(s.n_obs):
                    pred = point_predict(s.X[j], s.Z[j], s.w, fitted)
                    se.append((pred - s.y[j]) ** 2)
            cell["rmse"] = float(np.sqrt(np.mean(se)))
            rmses.append(cell["rmse"])
            table.append(cell)
        if failed <= folds // 2 and rmses:
            mean_rmse[int(K)] = float(np.mean(rmses))
    if not mean_rmse:
        raise FitError("every candidate expert count was disqualified")
    best_k = min(mean_rmse, key=lambda k: (mean_rmse[k], k))
    return best_k, table
