"""Predictive mixture, point prediction, and grid highest-density sets."""

import numpy as np
import pytest
from scipy.stats import norm

from memoe import (DatasetSums, ModelArchive, ModelParams, PredictiveMixture,
                   coverage_eval, point_predict, prediction_set,
                   prediction_set_from_mixture, predictive_mixture)
from memoe.model import gate_probs

from conftest import random_params


def _archive(params, gram_scale=1e8, w_gram=None):
    K, p, d = params.K, params.p, params.d
    gram = np.tile(gram_scale * np.eye(p), (K, 1, 1))
    if w_gram is None:
        w_gram = 1e8 * np.eye(d)
    return ModelArchive(params=params,
                        sums=DatasetSums(gram=gram, w_gram=w_gram),
                        gating_policy="x", dims=(p, params.q, d))


class TestPredictiveMixture:
    def test_zero_z_and_vanishing_working_variance(self, rng):
        params = random_params(rng, K=2, p=2, q=1, d=1)
        model = _archive(params)   # huge design sums: V terms -> 0
        mix = predictive_mixture([1.0, 2.0], [0.0], [1.0], model)
        np.testing.assert_allclose(mix.b2_hat, params.sigma2, rtol=1e-7)

    def test_kronecker_identity_scalar_case(self, rng):
        # q = d = 1: the mean-map variance term reduces to w^2 z^2 s / W,
        # verified against the explicit Kronecker-product expansion.
        params = random_params(rng, K=1, p=2, q=1, d=1)
        W = 37.5
        model = _archive(params, w_gram=np.array([[W]]))
        x, z, w = np.array([0.5, -1.0]), np.array([2.0]), np.array([3.0])
        mix = predictive_mixture(x, z, w, model)
        s = float(params.Sigma[0, 0])
        v_kappa_direct = w[0] ** 2 * z[0] ** 2 * s / W
        kron = np.kron(params.Sigma, np.linalg.inv([[W]]))
        wz = np.kron(w, z)
        v_kappa_kron = float(wz @ kron @ wz)
        assert v_kappa_direct == pytest.approx(v_kappa_kron, rel=1e-12)
        v_beta = float(x @ np.linalg.solve(model.sums.gram[0], x))
        expected = z @ params.Sigma @ z + params.sigma2[0] \
            + v_beta + v_kappa_direct
        assert mix.b2_hat[0] == pytest.approx(float(expected), rel=1e-12)

    def test_gate_weights_match_gate_probs(self, rng):
        params = random_params(rng, K=3, p=2, q=1, d=1)
        model = _archive(params)
        x, z, w = np.array([0.3, 1.1]), np.array([1.0]), np.array([1.0])
        mix = predictive_mixture(x, z, w, model)
        np.testing.assert_allclose(mix.pi_hat, gate_probs(x, params.alpha),
                                   atol=1e-15)

    def test_means_include_random_effect_mean(self, rng):
        params = random_params(rng, K=2, p=2, q=2, d=2)
        model = _archive(params)
        x, z, w = np.array([1.0, 2.0]), np.array([0.5, -1.0]), \
            np.array([1.0, 3.0])
        mix = predictive_mixture(x, z, w, model)
        expected = params.beta @ x + z @ (params.kappa @ w)
        np.testing.assert_allclose(mix.Gamma_hat, expected, atol=1e-12)


class TestPointPredict:
    def test_k1(self, rng):
        params = random_params(rng, K=1, p=2, q=1, d=1)
        model = _archive(params)
        x, z, w = np.array([1.0, -2.0]), np.array([1.5]), np.array([0.5])
        expected = params.beta[0] @ x + z @ (params.kappa @ w)
        assert point_predict(x, z, w, model) == pytest.approx(
            float(expected), abs=1e-12)

    def test_argmax_selection_ignores_other_expert(self, rng):
        alpha = np.array([[2.2, 0.0], [0.0, 0.0]])   # pi = (0.9, 0.1) at e1
        params = ModelParams(alpha=alpha, beta=np.array([[1.0, 0.0],
                                                         [-55.0, 3.0]]),
                             sigma2=[1.0, 1.0], kappa=np.zeros((1, 1)),
                             Sigma=np.eye(1))
        model = _archive(params)
        x = np.array([1.0, 0.0])
        assert point_predict(x, [0.0], [1.0], model) == pytest.approx(1.0)

    def test_tie_breaks_to_lowest_index(self):
        params = ModelParams(alpha=np.zeros((2, 1)),
                             beta=np.array([[5.0], [-5.0]]),
                             sigma2=[1.0, 1.0], kappa=np.zeros((1, 1)),
                             Sigma=np.eye(1))
        model = _archive(params)
        assert point_predict([1.0], [0.0], [1.0], model) == pytest.approx(5.0)


class TestPredictionSet:
    def test_k1_central_interval(self):
        mix = PredictiveMixture(pi_hat=[1.0], Gamma_hat=[2.0], b2_hat=[4.0])
        ps = prediction_set_from_mixture(mix, q=0.05, M=2000)
        assert len(ps.intervals) == 1
        lo, hi = ps.intervals[0]
        c = norm.ppf(0.975)
        assert lo == pytest.approx(2.0 - c * 2.0, abs=ps.cell_width)
        assert hi == pytest.approx(2.0 + c * 2.0, abs=ps.cell_width)
        f_max = mix.pdf(np.array([2.0]))[0]
        assert 0.95 - 1e-12 <= ps.achieved_mass \
            <= 0.95 + 2 * ps.cell_width * f_max

    def test_two_spikes_give_two_intervals(self):
        mix = PredictiveMixture(pi_hat=[0.5, 0.5], Gamma_hat=[-10.0, 10.0],
                                b2_hat=[1.0, 1.0])
        ps = prediction_set_from_mixture(mix, q=0.05, M=2000)
        assert len(ps.intervals) == 2
        # Each component interval must carry 0.475 of the mixture mass, i.e.
        # 0.95 of its own, so the half-width is the 0.975 normal quantile.
        r = norm.ppf(0.975)
        tol = 2 * ps.cell_width
        for center, (lo, hi) in zip((-10.0, 10.0), ps.intervals):
            assert lo == pytest.approx(center - r, abs=tol)
            assert hi == pytest.approx(center + r, abs=tol)

    def test_minimality_of_selected_prefix(self, rng):
        mix = PredictiveMixture(pi_hat=[0.3, 0.7], Gamma_hat=[-2.0, 3.0],
                                b2_hat=[1.0, 2.0])
        for q in (0.05, 0.2):
            ps = prediction_set_from_mixture(mix, q=q, M=500)
            n_star = round(ps.total_length / ps.cell_width)
            # Recompute the sorted masses to drop the last selected cell.
            lo, hi = ps.bounds
            edges = np.linspace(lo, hi, 501)
            mids = 0.5 * (edges[:-1] + edges[1:])
            dens = mix.pdf(mids)
            from scipy.special import ndtr
            cdf = ndtr((edges[:, None] - np.array(mix.Gamma_hat))
                       / np.sqrt(mix.b2_hat))
            masses = (cdf[1:] - cdf[:-1]) @ mix.pi_hat
            order = np.argsort(-dens, kind="stable")
            csum = np.cumsum(masses[order])
            assert csum[n_star - 1] >= 1 - q - 1e-12
            assert csum[n_star - 2] < 1 - q

    def test_mass_guarantee_and_superlevel_on_random_mixtures(self, rng):
        for _ in range(50):
            K = int(rng.integers(1, 4))
            mix = PredictiveMixture(
                pi_hat=rng.dirichlet(np.ones(K)),
                Gamma_hat=rng.uniform(-10, 10, size=K),
                b2_hat=rng.uniform(0.3, 3.0, size=K) ** 2)
            for q in (0.01, 0.05, 0.2, 0.5):
                ps = prediction_set_from_mixture(mix, q=q, M=400)
                assert ps.achieved_mass >= 1 - q - 1e-12
                lo, hi = ps.bounds
                edges = np.linspace(lo, hi, 401)
                mids = 0.5 * (edges[:-1] + edges[1:])
                dens = mix.pdf(mids)
                inside = np.zeros(400, dtype=bool)
                for a, b in ps.intervals:
                    inside |= (mids > a) & (mids < b)
                if inside.any() and (~inside).any():
                    assert dens[inside].min() >= dens[~inside].max() - 1e-15

    def test_grid_refinement_stability(self):
        mix = PredictiveMixture(pi_hat=[0.4, 0.6], Gamma_hat=[-4.0, 5.0],
                                b2_hat=[1.0, 4.0])
        ps1 = prediction_set_from_mixture(mix, q=0.05, M=2000)
        ps2 = prediction_set_from_mixture(mix, q=0.05, M=20000)
        span = ps1.bounds[1] - ps1.bounds[0]
        assert abs(ps1.total_length - ps2.total_length) < 2 * span / 2000

    def test_affine_equivariance(self):
        mix = PredictiveMixture(pi_hat=[0.35, 0.65], Gamma_hat=[-3.0, 4.0],
                                b2_hat=[1.3, 2.1])
        a, b = 2.3, -1.7
        mapped = PredictiveMixture(
            pi_hat=mix.pi_hat, Gamma_hat=a * mix.Gamma_hat + b,
            b2_hat=a ** 2 * mix.b2_hat)
        ps = prediction_set_from_mixture(mix, q=0.1, M=2000)
        ps_m = prediction_set_from_mixture(mapped, q=0.1, M=2000)
        got = np.array(ps_m.intervals)
        want = a * np.array(ps.intervals) + b
        np.testing.assert_allclose(got, want, atol=2 * ps_m.cell_width)

    def test_rejects_bad_level_and_grid(self):
        mix = PredictiveMixture(pi_hat=[1.0], Gamma_hat=[0.0], b2_hat=[1.0])
        with pytest.raises(ValueError):
            prediction_set_from_mixture(mix, q=0.0)
        with pytest.raises(ValueError):
            prediction_set_from_mixture(mix, q=0.05, M=5)


class TestCoverageEval:
    def test_higher_level_gives_shorter_sets(self, rng):
        from memoe import gen_example2, fit, FitConfig
        ds, _ = gen_example2(tau=1.0, seed=3)
        sub = ds.subset(range(30))
        fitted = fit(sub, FitConfig(K=1, n_starts=1))
        test = ds.subset(range(30, 40))
        cov05, len05 = coverage_eval(test, fitted, q=0.05, M=500)
        cov50, len50 = coverage_eval(test, fitted, q=0.5, M=500)
        assert len50 < len05
        assert cov05 > cov50

    def test_empty_test_set_rejected(self, rng):
        params = random_params(rng, K=1, p=2, q=1, d=1)
        model = _archive(params)
        with pytest.raises(Exception):
            coverage_eval(None, model, q=0.05)
