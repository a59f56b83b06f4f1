"""Point prediction, the predictive mixture, and grid highest-density
prediction sets.

For a new covariate tuple (x, z, w) the response's predictive law is a
K-component Gaussian mixture: weights are the gate probabilities at the new
input, component means are Gamma_k = x'beta_k + z'kappa w, and component
variances add the random-effect spread, the noise variance, and two working
estimation-variance terms:

    b2_k = z'Sigma z + s2_k + V_k^beta + V_k^kappa,
    V_k^beta  = x' (sum_ij gamma_ijk x x'/s2_k)^{-1} x,
    V_k^kappa = (w (x) z)' (Sigma (x) (sum_i w w')^{-1}) (w (x) z)
              = (z'Sigma z) (w'(sum_i w w')^{-1} w).

A (1-q) prediction set is the union of grid cells with the highest mixture
density whose exact masses (Gaussian CDF differences) accumulate to at least
1-q, searched inside the conservative bounding interval
[min_k(Gamma_k - c_q b_k), max_k(Gamma_k + c_q b_k)] with c_q the standard
normal (1-q/2) quantile.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr
from scipy.stats import norm

from .model import Dataset, gate_probs, gating_input

__all__ = [
    "PredictiveMixture",
    "PredictionSet",
    "predictive_mixture",
    "point_predict",
    "prediction_set",
    "prediction_set_from_mixture",
    "coverage_eval",
]


@dataclass(frozen=True)
class PredictiveMixture:
    """Gaussian-mixture predictive law at one covariate tuple: gate weights,
    component means, and component variances."""

    pi_hat: np.ndarray
    Gamma_hat: np.ndarray
    b2_hat: np.ndarray

    def __post_init__(self):
        for name in ("pi_hat", "Gamma_hat", "b2_hat"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=float))
        if np.any(self.b2_hat <= 0):
            raise ValueError("component variances must be positive")
        if abs(self.pi_hat.sum() - 1.0) > 1e-8 or np.any(self.pi_hat < 0):
            raise ValueError("weights must form a probability vector")

    def logpdf_grid(self, y: np.ndarray) -> np.ndarray:
        b2 = self.b2_hat[None, :]
        comp = (-0.5 * (np.log(2.0 * np.pi * b2)
                        + (y[:, None] - self.Gamma_hat[None, :]) ** 2 / b2))
        return comp

    def pdf(self, y) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        dens = np.exp(self.logpdf_grid(y)) @ self.pi_hat
        return dens


@dataclass(frozen=True)
class PredictionSet:
    """Union of disjoint half-open intervals carrying at least 1-q
    predictive mass, as unions of contiguous grid cells."""

    intervals: tuple          # ((lo, hi), ...) sorted, disjoint
    achieved_mass: float
    q: float
    grid_cells: int
    cell_width: float
    bounds: tuple             # the bounding interval searched

    @property
    def total_length(self) -> float:
        return float(sum(hi - lo for lo, hi in self.intervals))

    def contains(self, y: float) -> bool:
        return any(lo <= y < hi for lo, hi in self.intervals)


def _resolve_model(fitted):
    """Accept a FittedModel or a loaded archive: both expose params, sums,
    and gating_policy."""
    return fitted.params, fitted.sums, fitted.gating_policy


def predictive_mixture(x_new, z_new, w_new, fitted,
                       dataset_sums=None) -> PredictiveMixture:
    """Predictive Gaussian mixture at a new covariate tuple.

    ``dataset_sums`` defaults to the summaries frozen into the fitted model
    at training time.
    """
    params, sums, policy = _resolve_model(fitted)
    if dataset_sums is None:
        dataset_sums = sums
    x = np.asarray(x_new, dtype=float)
    z = np.asarray(z_new, dtype=float)
    w = np.asarray(w_new, dtype=float)
    v = gating_input(x, z, policy)
    pi_hat = gate_probs(v, params.alpha)
    Gamma = params.beta @ x + float(z @ (params.kappa @ w))
    z_Sig_z = float(z @ params.Sigma @ z)
    if w.size:
        w_quad = float(w @ _solve_spd(dataset_sums.w_gram, w))
    else:
        w_quad = 0.0
    v_kappa = z_Sig_z * w_quad
    K = params.K
    b2 = np.empty(K)
    for k in range(K):
        v_beta = float(x @ _solve_spd(dataset_sums.gram[k], x))
        b2[k] = z_Sig_z + params.sigma2[k] + v_beta + v_kappa
    return PredictiveMixture(pi_hat=pi_hat, Gamma_hat=Gamma, b2_hat=b2)


def _solve_spd(G, rhs):
    try:
        from scipy.linalg import cho_factor, cho_solve
        return cho_solve(cho_factor(G, lower=True), rhs)
    except (np.linalg.LinAlgError, ValueError):
        import warnings
        warnings.warn("singular design summary; solving with ridge")
        ridge = 1e-10 * np.trace(G) / max(G.shape[0], 1) + 1e-300
        return np.linalg.solve(G + ridge * np.eye(G.shape[0]), rhs)


def point_predict(x_new, z_new, w_new, fitted) -> float:
    """Highest-gate-probability expert mean; ties go to the lowest index."""
    params, _, policy = _resolve_model(fitted)
    x = np.asarray(x_new, dtype=float)
    z = np.asarray(z_new, dtype=float)
    w = np.asarray(w_new, dtype=float)
    pi_hat = gate_probs(gating_input(x, z, policy), params.alpha)
    k_hat = int(np.argmax(pi_hat))
    return float(params.beta[k_hat] @ x + z @ (params.kappa @ w))


def prediction_set_from_mixture(mix: PredictiveMixture, q: float,
                                M: int = 2000) -> PredictionSet:
    """Grid highest-density region of a Gaussian mixture.

    The bounding interval is partitioned into M equal cells; cell masses are
    exact CDF differences.  Cells sorted by midpoint density (ties broken by
    ascending cell index) are selected greedily until the accumulated mass
    reaches 1-q, and adjacent selected cells merge into maximal intervals.
    """
    if not 0.0 < q < 1.0:
        raise ValueError("q must be in (0, 1)")
    if M < 10:
        raise ValueError("need at least 10 grid cells")
    b = np.sqrt(mix.b2_hat)
    c_q = norm.ppf(1.0 - q / 2.0)
    lo = float(np.min(mix.Gamma_hat - c_q * b))
    hi = float(np.max(mix.Gamma_hat + c_q * b))
    edges = np.linspace(lo, hi, M + 1)
    delta = (hi - lo) / M
    mids = 0.5 * (edges[:-1] + edges[1:])
    dens = mix.pdf(mids)
    cdf = ndtr((edges[:, None] - mix.Gamma_hat[None, :]) / b[None, :])
    masses = (cdf[1:] - cdf[:-1]) @ mix.pi_hat
    order = np.argsort(-dens, kind="stable")
    csum = np.cumsum(masses[order])
    target = 1.0 - q
    reached = np.nonzero(csum >= target)[0]
    n_star = int(reached[0]) + 1 if reached.size else M
    selected = np.sort(order[:n_star])
    achieved = float(csum[n_star - 1])
    intervals = []
    start = prev = selected[0]
    for idx in selected[1:]:
        if idx == prev + 1:
            prev = idx
            continue
        intervals.append((float(edges[start]), float(edges[prev + 1])))
        start = prev = idx
    intervals.append((float(edges[start]), float(edges[prev + 1])))
    return PredictionSet(intervals=tuple(intervals), achieved_mass=achieved,
                         q=q, grid_cells=M, cell_width=delta,
                         bounds=(lo, hi))


def prediction_set(x_new, z_new, w_new, fitted, q: float,
                   M: int = 2000) -> PredictionSet:
    """Prediction set for a new covariate tuple under the fitted model."""
    mix = predictive_mixture(x_new, z_new, w_new, fitted)
    return prediction_set_from_mixture(mix, q, M)


def coverage_eval(test_set: Dataset, fitted, q: float, M: int = 2000):
    """Evaluate prediction sets over every observation of a test dataset.

    Returns ``(coverage, mean_total_length)``: the fraction of responses
    inside their prediction set and the mean summed interval length.
    """
    if test_set.total_obs == 0:
        raise ValueError("empty test set")
    hits, lengths = [], []
    for s in test_set.subjects:
        for j in range(s.n_obs):
            ps = prediction_set(s.X[j], s.Z[j], s.w, fitted, q, M)
            hits.append(ps.contains(float(s.y[j])))
            lengths.append(ps.total_length)
    return float(np.mean(hits)), float(np.mean(lengths))
