"""Simulation designs, restricted baselines, expert alignment, and the
replication study pipeline.

Three data-generating designs are provided:

* ``example1`` -- a two-expert mixture regression without random effects;
  1500 single-observation subjects, gating and experts on a 5-dimensional
  standard normal covariate.
* ``example2`` -- a homogeneous linear mixed model (one expert, random
  intercept with variance tau); 100 subjects x 15 observations.
* ``example3`` (cases 1-3) -- expert mixtures with a random intercept:
  case 1 zero-mean, case 2 adds a covariate-dependent random-effect mean,
  case 3 has three experts with unequal noise scales.

Generators are pure functions of (design, tau, seed), built on the
counter-based Philox generator with one spawned stream per subject, so
datasets are identical across runs and platforms.  Draw order within a
subject's stream is fixed and documented in each generator.

The study pipeline replicates: generate, split 80/20 by observation, fit
each method on the training rows, align experts to the truth, and score
parameter bias/MSE, held-out PMSE (test rows of a training subject are
predicted with that subject's fitted random-effect mode), and 95%
prediction-set coverage and length.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .model import Dataset, Subject, MemoeError, gate_probs
from .em import FitConfig, FitError, FittedModel, fit
from .predict import prediction_set

__all__ = [
    "SimTruth",
    "SimReport",
    "StudyError",
    "gen_example1",
    "gen_example2",
    "gen_example3",
    "fit_baseline",
    "align_experts",
    "run_study",
    "report_rows",
    "DESIGNS",
]

DESIGNS = ("example1", "example2", "example3_case1", "example3_case2",
           "example3_case3")

_ALPHA_EX1 = np.array([[6.0, -5.0, 3.0, 2.0, 1.0],
                       [-4.0, 2.0, -7.0, 5.0, -3.0]])
_BETA_EX1 = np.array([[3.0, -3.0, 1.0, -1.0, 0.0],
                      [-5.0, 5.0, 0.0, 2.0, -2.0]])
_BETA_EX2 = np.array([[3.0, -3.0, 1.0, -1.0, 0.0]])
_ALPHA_EX3_K3 = np.array([[6.0, -5.0, 3.0, 2.0, 1.0],
                          [-4.0, 2.0, -7.0, 5.0, -3.0],
                          [2.0, -1.0, 4.0, -3.0, 6.0]])
_BETA_EX3_K3 = np.array([[3.0, -3.0, 1.0, -1.0, 0.0],
                         [-5.0, 5.0, 0.0, 2.0, -2.0],
                         [1.0, -2.0, 3.0, 1.0, -4.0]])
_KAPPA_CASE2 = np.array([[2.0, 5.0, -1.0, 5.0]])
_KAPPA_CASE3 = np.array([[5.0, -3.0, 2.0, 1.0]])
_SIGMA_CASE3 = np.array([1.0, 1.2, 0.8])


class StudyError(MemoeError):
    """Raised when too many replications of a study fail."""


@dataclass(frozen=True)
class SimTruth:
    """Ground truth retained by the generators for scoring and oracles."""

    design: str
    K: int
    beta: np.ndarray          # (K, p)
    sigma: np.ndarray         # (K,) noise standard deviations
    alpha_gen: np.ndarray     # raw gating rows used in generation
    kappa: np.ndarray | None  # (q, d) or None when the mean map is zero
    tau: float
    labels: np.ndarray        # (total_obs,) expert labels in packed order
    u: np.ndarray             # (N,) subject random effects (0 when absent)


def _root_seq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _subject_rng(child_seq) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(child_seq))


def gen_example1(seed) -> tuple[Dataset, SimTruth]:
    """Two-expert mixture regression, no random effects.

    1500 subjects, one observation each.  Per-subject draw order:
    x (5 normals), gate uniform, noise normal.  The raw two-row softmax
    parameters are used as-is for generation; fitting reference-codes the
    gate, which represents the same probabilities.
    """
    root = _root_seq(seed)
    N = 1500
    subjects, labels = [], []
    for i, child in enumerate(root.spawn(N)):
        rng = _subject_rng(child)
        x = rng.standard_normal(5)
        pi = gate_probs(x, _ALPHA_EX1)
        label = int(np.searchsorted(np.cumsum(pi), rng.random()))
        label = min(label, 1)
        y = float(x @ _BETA_EX1[label] + rng.standard_normal())
        subjects.append(Subject(i, [1.0], [y], x[None, :], [[1.0]]))
        labels.append(label)
    ds = Dataset(subjects)
    truth = SimTruth(design="example1", K=2, beta=_BETA_EX1,
                     sigma=np.array([1.0, 1.0]), alpha_gen=_ALPHA_EX1,
                     kappa=None, tau=0.0,
                     labels=np.array(labels), u=np.zeros(N))
    return ds, truth


def gen_example2(tau: float, seed) -> tuple[Dataset, SimTruth]:
    """Homogeneous linear mixed model with a random intercept of variance
    tau; 100 subjects x 15 observations.  Per-subject draw order: the
    intercept's standard normal, then per observation x (5 normals) and the
    noise normal."""
    root = _root_seq(seed)
    N, n_i = 100, 15
    beta = _BETA_EX2[0]
    subjects = []
    u_all = np.empty(N)
    for i, child in enumerate(root.spawn(N)):
        rng = _subject_rng(child)
        u = np.sqrt(tau) * rng.standard_normal()
        u_all[i] = u
        X = np.empty((n_i, 5))
        y = np.empty(n_i)
        for j in range(n_i):
            X[j] = rng.standard_normal(5)
            y[j] = X[j] @ beta + u + rng.standard_normal()
        subjects.append(Subject(i, [1.0], y, X, np.ones((n_i, 1))))
    ds = Dataset(subjects)
    truth = SimTruth(design="example2", K=1, beta=_BETA_EX2,
                     sigma=np.array([1.0]), alpha_gen=np.zeros((1, 5)),
                     kappa=None, tau=tau,
                     labels=np.zeros(N * n_i, dtype=int), u=u_all)
    return ds, truth


def gen_example3(case: int, tau: float, seed) -> tuple[Dataset, SimTruth]:
    """Expert-mixture linear mixed models; 100 subjects x 15 observations.

    Cases share one draw path (per subject: 3 normals for the subject
    covariates, the intercept's standard normal, then per observation
    x (5 normals), gate uniform, noise normal), so case 1 produces exactly
    the case 2 responses with a zero mean map.

    * case 1: two experts, u ~ N(0, tau), unit noise.
    * case 2: case 1 plus a covariate-dependent random-effect mean.
    * case 3: three experts, covariate-dependent mean, unequal noise scales.
    """
    if case == 1:
        alpha, beta, kappa = _ALPHA_EX1, _BETA_EX1, np.zeros((1, 4))
        sigma = np.array([1.0, 1.0])
    elif case == 2:
        alpha, beta, kappa = _ALPHA_EX1, _BETA_EX1, _KAPPA_CASE2
        sigma = np.array([1.0, 1.0])
    elif case == 3:
        alpha, beta, kappa = _ALPHA_EX3_K3, _BETA_EX3_K3, _KAPPA_CASE3
        sigma = _SIGMA_CASE3
    else:
        raise ValueError(f"unknown example3 case {case!r}")
    K = beta.shape[0]
    root = _root_seq(seed)
    N, n_i = 100, 15
    subjects, labels = [], []
    u_all = np.empty(N)
    for i, child in enumerate(root.spawn(N)):
        rng = _subject_rng(child)
        w = np.concatenate([[1.0], rng.standard_normal(3)])
        u = float((kappa @ w)[0]) + np.sqrt(tau) * rng.standard_normal()
        u_all[i] = u
        X = np.empty((n_i, 5))
        y = np.empty(n_i)
        for j in range(n_i):
            X[j] = rng.standard_normal(5)
            pi = gate_probs(X[j], alpha)
            label = int(min(np.searchsorted(np.cumsum(pi), rng.random()),
                            K - 1))
            labels.append(label)
            y[j] = X[j] @ beta[label] + u + sigma[label] * rng.standard_normal()
        w_exposed = np.array([1.0]) if case == 1 else w
        subjects.append(Subject(i, w_exposed, y, X, np.ones((n_i, 1))))
    ds = Dataset(subjects)
    truth = SimTruth(design=f"example3_case{case}", K=K, beta=beta,
                     sigma=sigma, alpha_gen=alpha,
                     kappa=None if case == 1 else kappa, tau=tau,
                     labels=np.array(labels), u=u_all)
    return ds, truth


def generate(design: str, tau: float, seed) -> tuple[Dataset, SimTruth]:
    """Dispatch to the named design generator."""
    if design == "example1":
        return gen_example1(seed)
    if design == "example2":
        return gen_example2(tau, seed)
    if design.startswith("example3_case"):
        return gen_example3(int(design[-1]), tau, seed)
    raise ValueError(f"unknown design {design!r}")


# ---------------------------------------------------------------------------
# Baselines and alignment
# ---------------------------------------------------------------------------

def fit_baseline(dataset: Dataset, which: str, cfg: FitConfig) -> FittedModel:
    """Fit one of the comparison variants.

    ``lmm``: one expert with free random effects; ``moe``: the mixture with
    the random-effect covariance pinned at the eigenvalue floor and a zero
    mean map, so subject modes collapse and observations act independent;
    ``remoe``: zero-mean random effects; ``memoe``: the full model.
    """
    if which == "lmm":
        cfg = dc_replace(cfg, K=1)
    elif which == "moe":
        cfg = dc_replace(cfg, fix_sigma_to_floor=True, fix_kappa_zero=True)
    elif which == "remoe":
        cfg = dc_replace(cfg, fix_kappa_zero=True)
    elif which != "memoe":
        raise ValueError(f"unknown baseline {which!r}")
    return fit(dataset, cfg)


def align_experts(estimated, reference) -> tuple:
    """Permutation matching estimated experts to reference experts.

    Returns ``perm`` with ``perm[k]`` the estimated expert paired with
    reference expert ``k``, minimizing the total squared distance between
    coefficient rows.  Exhaustive search (expert counts here are <= 5).
    """
    est = getattr(estimated, "beta", estimated)
    ref = getattr(reference, "beta", reference)
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if est.shape != ref.shape:
        raise ValueError("expert counts (or dimensions) do not match")
    K = est.shape[0]
    if K > 6:
        from scipy.optimize import linear_sum_assignment
        cost = ((ref[:, None, :] - est[None, :, :]) ** 2).sum(axis=2)
        _, cols = linear_sum_assignment(cost)
        return tuple(int(c) for c in cols)
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(K)):
        cost = sum(float(((est[perm[k]] - ref[k]) ** 2).sum())
                   for k in range(K))
        if cost < best_cost:
            best, best_cost = perm, cost
    return best


# ---------------------------------------------------------------------------
# Replication study
# ---------------------------------------------------------------------------

@dataclass
class MethodCell:
    """Aggregated metrics for one (tau, method) pair."""

    dev_sum: np.ndarray | None = None     # (K_true, p) signed deviations
    dev_sq_sum: np.ndarray | None = None  # (K_true, p)
    n_ok: int = 0
    failures: int = 0
    pmse_reps: list = field(default_factory=list)
    coverage_reps: list = field(default_factory=list)
    length_reps: list = field(default_factory=list)
    dip_violations: int = 0
    invariant_violations: int = 0

    @property
    def bias(self) -> np.ndarray:
        return np.abs(self.dev_sum / self.n_ok)

    @property
    def mse(self) -> np.ndarray:
        return self.dev_sq_sum / self.n_ok

    @property
    def bias_scalar(self) -> float:
        return float(self.bias.mean())

    @property
    def pmse_mean(self) -> float:
        return float(np.mean(self.pmse_reps))

    @property
    def coverage_mean(self) -> float:
        return float(np.mean(self.coverage_reps))

    @property
    def length_mean(self) -> float:
        return float(np.mean(self.length_reps))


@dataclass
class SimReport:
    """Replication-study results: one :class:`MethodCell` per (tau, method)."""

    design: str
    taus: tuple
    n_reps: int
    methods: tuple
    cells: dict
    level: float = 0.05

    def cell(self, tau: float, method: str) -> MethodCell:
        return self.cells[(tau, method)]


def _split_rows(dataset: Dataset, truth: SimTruth, test_frac: float,
                rng: np.random.Generator):
    """Random observation-level 80/20 split.

    Returns the training dataset and the held-out rows as
    ``(train_subject_index, x, z, w, y)`` tuples.  A subject whose rows all
    land in the test set is dropped from training (its index is -1) and is
    predicted as a new subject; with one observation per subject this
    reduces to holding subjects out entirely.
    """
    T = dataset.total_obs
    n_test = int(round(test_frac * T))
    perm = rng.permutation(T)
    test_mask = np.zeros(T, dtype=bool)
    test_mask[perm[:n_test]] = True
    subjects, test_rows = [], []
    for i, s in enumerate(dataset.subjects):
        lo = dataset.offsets[i]
        mask = test_mask[lo:lo + s.n_obs]
        keep = ~mask
        if keep.any():
            ti = len(subjects)
            subjects.append(Subject(s.id, s.w, s.y[keep], s.X[keep],
                                    s.Z[keep]))
        else:
            ti = -1
        for j in np.nonzero(mask)[0]:
            test_rows.append((ti, s.X[j], s.Z[j], s.w, float(s.y[j])))
    return Dataset(subjects, dataset.gating_policy), test_rows


def _predict_rows(fitted: FittedModel, test_rows):
    """Point predictions for held-out rows: the highest-gate expert mean
    plus the training subject's fitted random-effect mode, or the modeled
    random-effect mean for subjects absent from training."""
    params = fitted.params
    U = fitted.mode_matrix()
    preds = np.empty(len(test_rows))
    for r, (i, x, z, w, _) in enumerate(test_rows):
        pi = gate_probs(x if fitted.gating_policy == "x"
                        else np.concatenate([x, z]), params.alpha)
        k_hat = int(np.argmax(pi))
        u = U[i] if i >= 0 else params.kappa @ w
        preds[r] = params.beta[k_hat] @ x + z @ u
    return preds


def _fit_k(design: str, truth: SimTruth, method: str, cfg: FitConfig) -> int:
    if method == "lmm":
        return 1
    if design == "example2":
        return max(cfg.K, 2)
    return truth.K


def _score_devs(fitted: FittedModel, truth: SimTruth):
    """Signed coefficient deviations per true expert after alignment.

    A single-expert fit against a multi-expert truth (and the reverse) is
    scored by broadcasting: every true expert row is compared against the
    mean-deviation of the experts available.
    """
    est = fitted.params.beta
    K_true, K_est = truth.beta.shape[0], est.shape[0]
    if K_est == K_true:
        perm = align_experts(fitted.params, truth.beta)
        return est[list(perm)] - truth.beta
    if K_est == 1:
        return np.repeat(est, K_true, axis=0) - truth.beta
    # More experts than the truth: compare each true row to its nearest.
    devs = np.empty_like(truth.beta)
    for k in range(K_true):
        dists = ((est - truth.beta[k]) ** 2).sum(axis=1)
        devs[k] = est[int(np.argmin(dists))] - truth.beta[k]
    return devs


def worker_count() -> int:
    """Worker cap from the MEMOE_THREADS environment variable (default 1)."""
    raw = os.environ.get("MEMOE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _run_rep(design, tau, ti, rep, methods, cfg, seed, level, grid_cells,
             coverage):
    """One replication: returns per-method metric contributions."""
    rep_root = np.random.SeedSequence(seed, spawn_key=(ti, rep))
    gen_seq, split_seq = rep_root.spawn(2)
    data, truth = generate(design, tau, gen_seq)
    split_rng = np.random.Generator(np.random.Philox(split_seq))
    train, test_rows = _split_rows(data, truth, 0.2, split_rng)
    y_test = np.array([r[4] for r in test_rows])
    out = {}
    for method in methods:
        cfg_m = dc_replace(cfg, K=_fit_k(design, truth, method, cfg))
        try:
            fitted = fit_baseline(train, method, cfg_m)
        except (FitError, np.linalg.LinAlgError):
            out[method] = None
            continue
        trace = np.asarray(fitted.loglik_trace)
        slack = 1e-8 * (1.0 + np.abs(trace[:-1]))
        res = {
            "devs": _score_devs(fitted, truth),
            "dips": int(np.sum(trace[:-1] - trace[1:] > slack)),
            "floor_ok": bool(
                np.all(fitted.params.sigma2 >= cfg_m.sigma2_floor)
                and np.linalg.eigvalsh(fitted.params.Sigma).min()
                >= cfg_m.sigma_eig_floor - 1e-15),
            "gamma_ok": bool(np.abs(fitted.gamma.row_sums() - 1.0).max()
                             <= 1e-10),
        }
        preds = _predict_rows(fitted, test_rows)
        res["pmse"] = float(np.mean((preds - y_test) ** 2))
        if coverage:
            hits, lengths = [], []
            for (i, x, z, w, y) in test_rows:
                ps = prediction_set(x, z, w, fitted, level, grid_cells)
                hits.append(ps.contains(y))
                lengths.append(ps.total_length)
            res["coverage"] = float(np.mean(hits))
            res["length"] = float(np.mean(lengths))
        out[method] = res
    return out


def run_study(design: str, tau_grid, n_reps: int, methods, cfg: FitConfig,
              seed: int = 0, level: float = 0.05, grid_cells: int = 2000,
              coverage: bool = True) -> SimReport:
    """Replicated benchmark of the requested methods on one design.

    Per replication: generate, split 80/20 by observation, fit every method
    on the training rows, align experts to the truth, and accumulate
    coefficient deviations, held-out PMSE, and prediction-set coverage and
    mean total length at the requested level.  Replications are independent
    (parallelized up to the MEMOE_THREADS cap) and aggregated in a fixed
    order.  A cell with more than 10% failed replications fails the study.
    """
    methods = tuple(methods)
    taus = tuple(float(t) for t in np.atleast_1d(tau_grid))
    cells = {(t, m): MethodCell() for t in taus for m in methods}
    jobs = [(ti, tau, rep) for ti, tau in enumerate(taus)
            for rep in range(n_reps)]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                _run_rep_args,
                [(design, tau, ti, rep, methods, cfg, seed, level,
                  grid_cells, coverage) for ti, tau, rep in jobs]))
    else:
        results = [_run_rep(design, tau, ti, rep, methods, cfg, seed, level,
                            grid_cells, coverage)
                   for ti, tau, rep in jobs]
    for (ti, tau, rep), rep_out in zip(jobs, results):
        for method in methods:
            cell = cells[(tau, method)]
            res = rep_out[method]
            if res is None:
                cell.failures += 1
                continue
            devs = res["devs"]
            if cell.dev_sum is None:
                cell.dev_sum = np.zeros_like(devs)
                cell.dev_sq_sum = np.zeros_like(devs)
            cell.dev_sum += devs
            cell.dev_sq_sum += devs ** 2
            cell.n_ok += 1
            cell.dip_violations += res["dips"]
            cell.invariant_violations += int(not res["floor_ok"]) \
                + int(not res["gamma_ok"])
            cell.pmse_reps.append(res["pmse"])
            if "coverage" in res:
                cell.coverage_reps.append(res["coverage"])
                cell.length_reps.append(res["length"])
    for (tau, method), cell in cells.items():
        if cell.failures > 0.1 * n_reps:
            raise StudyError(
                f"{cell.failures}/{n_reps} replications failed for "
                f"method {method!r} at tau={tau}")
    return SimReport(design=design, taus=taus, n_reps=n_reps,
                     methods=methods, cells=cells, level=level)


def _run_rep_args(args):
    return _run_rep(*args)


def report_rows(report: SimReport):
    """Flatten a study report into (header, rows) for delimited output."""
    header = ["design", "tau", "method", "metric", "expert", "coord", "value"]
    rows = []
    for (tau, method), cell in report.cells.items():
        if cell.n_ok:
            bias, mse = cell.bias, cell.mse
            for k in range(bias.shape[0]):
                for c in range(bias.shape[1]):
                    rows.append([report.design, tau, method, "bias",
                                 k + 1, c + 1, bias[k, c]])
                    rows.append([report.design, tau, method, "mse",
                                 k + 1, c + 1, mse[k, c]])
        if cell.pmse_reps:
            rows.append([report.design, tau, method, "pmse", "", "",
                         cell.pmse_mean])
        if cell.coverage_reps:
            rows.append([report.design, tau, method, "coverage", "", "",
                         cell.coverage_mean])
            rows.append([report.design, tau, method, "mean_length", "", "",
                         cell.length_mean])
        rows.append([report.design, tau, method, "failures", "", "",
                     cell.failures])
    return header, rows
