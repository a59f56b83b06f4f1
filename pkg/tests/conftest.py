"""Shared helpers: random instance builders and independent oracles."""

import numpy as np
import pytest

from memoe import Dataset, ModelParams, Subject


def random_subject(rng, n_obs, p, q, d, id=0, y_scale=1.0):
    X = rng.standard_normal((n_obs, p))
    Z = rng.standard_normal((n_obs, q))
    w = np.concatenate([[1.0], rng.standard_normal(d - 1)]) if d else np.empty(0)
    y = y_scale * rng.standard_normal(n_obs)
    return Subject(id, w, y, X, Z)


def random_dataset(rng, N=5, n_obs=4, p=2, q=2, d=2, gating="x"):
    subjects = [random_subject(rng, n_obs, p, q, d, id=i) for i in range(N)]
    return Dataset(subjects, gating_policy=gating)


def random_params(rng, K=2, p=2, q=2, d=2, g=None, spread=1.0):
    g = p if g is None else g
    alpha = np.vstack([rng.standard_normal((K - 1, g)), np.zeros(g)])
    beta = spread * rng.standard_normal((K, p))
    sigma2 = rng.uniform(0.5, 2.0, size=K)
    kappa = 0.5 * rng.standard_normal((q, d))
    A = rng.standard_normal((q, q))
    Sigma = A @ A.T / q + 0.5 * np.eye(q)
    Sigma = 0.5 * (Sigma + Sigma.T)
    return ModelParams(alpha=alpha, beta=beta, sigma2=sigma2, kappa=kappa,
                       Sigma=Sigma)


def lmm_marginal_loglik(dataset, params):
    """Exact single-expert marginal log-likelihood oracle:
    y_i ~ N(X_i beta + Z_i kappa w_i, Z_i Sigma Z_i' + s2 I)."""
    from scipy.stats import multivariate_normal
    assert params.K == 1
    beta = params.beta[0]
    s2 = float(params.sigma2[0])
    total = 0.0
    for s in dataset.subjects:
        mean = s.X @ beta + s.Z @ (params.kappa @ s.w)
        cov = s.Z @ params.Sigma @ s.Z.T + s2 * np.eye(s.n_obs)
        total += multivariate_normal.logpdf(s.y, mean=mean, cov=cov)
    return float(total)


def lmm_mode_oracle(subject, params):
    """Closed-form single-expert mode: the ridge normal equations
    (Sigma^{-1} + Z'Z/s2) u = Sigma^{-1} kappa w + Z'(y - X beta)/s2."""
    assert params.K == 1
    s2 = float(params.sigma2[0])
    Sig_inv = np.linalg.inv(params.Sigma)
    A = Sig_inv + subject.Z.T @ subject.Z / s2
    b = Sig_inv @ (params.kappa @ subject.w) \
        + subject.Z.T @ (subject.y - subject.X @ params.beta[0]) / s2
    return np.linalg.solve(A, b)


def quadrature_subject_loglik(subject, params, n_nodes=10_000, width=12.0):
    """Trapezoid quadrature of the one-dimensional marginal integrand,
    rebuilt from primitive formulas (prior density times the per-observation
    mixture densities), centered at the mode with the posterior standard
    deviation as the scale."""
    import math
    from memoe import find_mode
    from memoe.model import gate_probs
    post = find_mode(subject, params)
    sd = 1.0 / math.sqrt(post.H[0, 0])
    grid = np.linspace(post.u_hat[0] - width * sd,
                       post.u_hat[0] + width * sd, n_nodes)
    Sig = float(params.Sigma[0, 0])
    mu = float((params.kappa @ subject.w)[0])
    h = -0.5 * np.log(2 * np.pi * Sig) - (grid - mu) ** 2 / (2 * Sig)
    for j in range(subject.n_obs):
        pi = gate_probs(subject.X[j], params.alpha)
        dens = np.zeros_like(grid)
        for k in range(params.K):
            m = subject.X[j] @ params.beta[k] + subject.Z[j, 0] * grid
            dens += (pi[k] / np.sqrt(2 * np.pi * params.sigma2[k])
                     * np.exp(-(subject.y[j] - m) ** 2
                              / (2 * params.sigma2[k])))
        h += np.log(dens)
    m = h.max()
    return m + np.log(np.trapezoid(np.exp(h - m), grid))


def small_loading_mixture_instance(rng, n_subjects=3, z_scale=0.01):
    """A two-expert q=1 instance with small random-effect loadings: the
    regime where the simplified-curvature Laplace value is accurate well
    beyond 1e-4 relative, so quadrature comparisons check the implementation
    rather than the approximation."""
    from memoe import Dataset, Subject
    subjects = []
    for i in range(n_subjects):
        s = random_subject(rng, n_obs=int(rng.integers(1, 4)), p=2, q=1,
                           d=1, id=i)
        subjects.append(Subject(s.id, s.w, s.y, s.X,
                                z_scale * (rng.random((s.n_obs, 1)) + 0.25)))
    ds = Dataset(subjects)
    params = random_params(rng, K=2, p=2, q=1, d=1, spread=0.7)
    params = params.replace(Sigma=0.3 * params.Sigma)
    return ds, params


def dataset_to_csv(dataset, path):
    """Write a dataset in the long layout the default test schema expects:
    sid, y, x1..xp, z1..zq, w1..wd."""
    import csv
    p, q, d = dataset.dims
    header = (["sid", "y"] + [f"x{i+1}" for i in range(p)]
              + [f"z{i+1}" for i in range(q)]
              + [f"w{i+1}" for i in range(d)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in dataset.subjects:
            for j in range(s.n_obs):
                writer.writerow([s.id, repr(float(s.y[j]))]
                                + [repr(float(v)) for v in s.X[j]]
                                + [repr(float(v)) for v in s.Z[j]]
                                + [repr(float(v)) for v in s.w])
    return header


def make_schema(p=5, q=1, d=1):
    from memoe import LongCsvSchema
    return LongCsvSchema(subject_col="sid", y_col="y",
                         x_cols=tuple(f"x{i+1}" for i in range(p)),
                         z_cols=tuple(f"z{i+1}" for i in range(q)),
                         w_cols=tuple(f"w{i+1}" for i in range(d)))


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
