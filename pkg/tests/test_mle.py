"""Likelihood maximisation, asymptotic variance, Wald tests."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from sarpanel import mle, model, weights


@pytest.fixture(scope="module")
def rook_design():
    return model.SpatialDesign(weights.row_normalize(weights.build_rook(4, 6)))


@pytest.fixture(scope="module")
def rook_100():
    return model.SpatialDesign(weights.row_normalize(weights.build_rook(10, 10)))


class TestFit:
    def test_lambda_within_three_se(self, rook_100):
        truth = model.SararParams(beta=np.ones(4), lam=0.2, rho=0.5, sigma2=1.0)
        rng = np.random.Generator(np.random.Philox(key=21))
        X = rng.standard_normal((5, 100, 4))
        hits = 0
        n_seeds = 60
        for r in range(n_seeds):
            data = model.simulate(truth, rook_100, X, None, 5, seed=40_000 + r)
            fit = mle.fit(rook_100, model.within_transform(data))
            se = fit.se[fit.pmap.active.tolist().index(fit.pmap.i_lam)]
            if abs(fit.params.lam - 0.2) < 3 * se:
                hits += 1
        assert hits / n_seeds >= 0.95

    def test_no_spatial_terms_reduces_to_within_ols(self, rook_design):
        rng = np.random.Generator(np.random.Philox(key=22))
        T, n = 4, 24
        X = rng.standard_normal((T, n, 1))
        truth = model.SararParams(beta=np.array([1.5]), lam=0.0, rho=0.0, sigma2=1.0)
        data = model.simulate(truth, rook_design, X, rng.standard_normal(n), T, seed=1)
        panel = model.within_transform(data)
        fit = mle.fit(rook_design, panel)
        beta_ols = np.einsum("tnj,tn->j", panel.xtil, panel.ytil) / np.sum(
            panel.xtil**2
        )
        # spatial terms estimated near zero -> beta close to pooled within-OLS
        assert abs(fit.params.beta[0] - beta_ols[0]) < 5e-3

    def test_refits_from_random_inits_agree(self, rook_design):
        rng = np.random.Generator(np.random.Philox(key=23))
        truth = model.SararParams(beta=np.ones(2), lam=0.3, rho=0.2, sigma2=1.0)
        X = rng.standard_normal((5, 24, 2))
        for draw in range(20):
            data = model.simulate(truth, rook_design, X, None, 5, seed=50_000 + draw)
            panel = model.within_transform(data)
            base = mle.fit(rook_design, panel)
            for _ in range(5):
                init = rng.uniform(-0.6, 0.6, size=2)
                refit = mle.fit(rook_design, panel, mle.FitOptions(init=tuple(init)))
                assert abs(refit.params.lam - base.params.lam) < 1e-6
                assert abs(refit.params.rho - base.params.rho) < 1e-6

    def test_mle_dominates_truth(self, rook_design):
        truth = model.SararParams(beta=np.zeros(0), lam=0.2, rho=0.4, sigma2=1.0)
        for r in range(10):
            data = model.simulate(truth, rook_design, None, None, 3, seed=60_000 + r)
            panel = model.within_transform(data)
            fit = mle.fit(rook_design, panel)
            assert fit.loglik >= model.log_likelihood(truth, rook_design, panel) - 1e-9

    def test_scale_equivariance(self, rook_design):
        truth = model.SararParams(beta=np.zeros(0), lam=0.25, rho=0.1, sigma2=1.0)
        data = model.simulate(truth, rook_design, None, None, 3, seed=70_001)
        panel = model.within_transform(data)
        fit1 = mle.fit(rook_design, panel)
        scaled = model.TransformedPanel(ytil=3.0 * panel.ytil, xtil=panel.xtil)
        fit2 = mle.fit(rook_design, scaled)
        assert_allclose(fit2.params.lam, fit1.params.lam, atol=1e-7)
        assert_allclose(fit2.params.rho, fit1.params.rho, atol=1e-7)
        assert_allclose(fit2.params.sigma2, 9.0 * fit1.params.sigma2, rtol=1e-6)

    def test_sar_option_fixes_rho(self, rook_design):
        truth = model.SararParams(beta=np.zeros(0), lam=0.2, rho=0.0, sigma2=1.0)
        data = model.simulate(truth, rook_design, None, None, 2, seed=70_002)
        fit = mle.fit(
            rook_design,
            model.within_transform(data),
            mle.FitOptions(has_rho=False, fixed_sigma2=1.0),
        )
        assert fit.params.rho == 0.0
        assert fit.params.sigma2 == 1.0
        assert fit.pmap.d == 1


class TestAsymptoticInformation:
    def test_sar_blocks(self, rook_design):
        p = model.SararParams(beta=np.zeros(0), lam=0.2, rho=0.0, sigma2=1.3)
        info = mle.asymptotic_information(p, rook_design, np.zeros((2, 24, 0)), 2)
        g = rook_design.ops(0.2, 0.0).G
        assert_allclose(info[0, 0], np.trace((g.T + g) @ g) / 24, rtol=1e-12)
        assert_allclose(info[2, 2], 0.5 / 1.3**2, rtol=1e-12)

    def test_matches_mc_expected_hessian(self, rook_design):
        rng = np.random.Generator(np.random.Philox(key=24))
        T, k = 5, 2
        X = rng.standard_normal((T, 24, k))
        p = model.SararParams(beta=np.array([1.0, -0.5]), lam=0.2, rho=0.5, sigma2=1.0)
        xtil = X - X.mean(axis=0, keepdims=True)
        info = mle.asymptotic_information(p, rook_design, xtil, T)
        mc = mle.expected_information_mc(p, rook_design, X, T, reps=10_000, seed=4)
        scale = np.abs(info).max()
        # 2% relative where the entry is material, MC-noise floor elsewhere
        assert np.all(np.abs(info - mc) <= 0.02 * np.abs(info) + 0.02 * scale)

    def test_symmetric(self, rook_design):
        rng = np.random.Generator(np.random.Philox(key=25))
        xtil = rng.standard_normal((3, 24, 2))
        xtil -= xtil.mean(axis=0, keepdims=True)
        p = model.SararParams(beta=np.array([0.3, 0.6]), lam=0.1, rho=0.2, sigma2=0.8)
        info = mle.asymptotic_information(p, rook_design, xtil, 3)
        assert_allclose(info, info.T, atol=1e-12)

    def test_vcov_shrinks_with_n(self):
        # doubling n roughly halves the variance on the homogeneous torus design
        torus_small = model.SpatialDesign(
            weights.row_normalize(weights.build_queen(4, 6, torus=True))
        )
        torus_big = model.SpatialDesign(
            weights.row_normalize(weights.build_queen(8, 6, torus=True))
        )
        p = model.SararParams(beta=np.zeros(0), lam=0.2, rho=0.0, sigma2=1.0)
        T = 2
        i_small = mle.asymptotic_information(p, torus_small, np.zeros((T, 24, 0)), T)
        i_big = mle.asymptotic_information(p, torus_big, np.zeros((T, 48, 0)), T)
        v_small = np.linalg.inv(i_small[np.ix_([0, 2], [0, 2])]) / 24
        v_big = np.linalg.inv(i_big[np.ix_([0, 2], [0, 2])]) / 48
        ratio = np.diag(v_big) / np.diag(v_small)
        assert np.all(np.abs(ratio - 0.5) < 0.15 * 0.5 + 0.075)


class TestWald:
    def test_restriction_at_estimate_gives_zero(self, rook_design):
        truth = model.SararParams(beta=np.zeros(0), lam=0.2, rho=0.3, sigma2=1.0)
        data = model.simulate(truth, rook_design, None, None, 5, seed=80_000)
        fit = mle.fit(rook_design, model.within_transform(data))
        idx = fit.pmap.active.tolist().index(fit.pmap.i_lam)
        res = mle.wald_test(fit, idx, fit.params.lam)
        assert res.stat == pytest.approx(0.0, abs=1e-12)
        assert res.p_value == pytest.approx(1.0)

    def test_large_n_size_calibrated(self):
        design = model.SpatialDesign(
            weights.row_normalize(weights.build_rook(20, 20))
        )
        truth = model.SararParams(beta=np.zeros(0), lam=0.0, rho=0.0, sigma2=1.0)
        opts = mle.FitOptions(has_rho=False)
        rejections = 0
        n_seeds = 1000
        for r in range(n_seeds):
            data = model.simulate(truth, design, None, None, 2, seed=90_000 + r)
            fit = mle.fit(design, model.within_transform(data), opts)
            idx = 0  # lambda first active coordinate with k = 0
            if mle.wald_test(fit, idx, 0.0).p_value < 0.05:
                rejections += 1
        assert 0.03 <= rejections / n_seeds <= 0.07

    def test_joint_wald(self, rook_design):
        truth = model.SararParams(beta=np.zeros(0), lam=0.3, rho=0.2, sigma2=1.0)
        data = model.simulate(truth, rook_design, None, None, 5, seed=91_000)
        fit = mle.fit(rook_design, model.within_transform(data))
        res = mle.wald_test_joint(fit, [0, 1], [fit.params.lam, fit.params.rho])
        assert res.stat == pytest.approx(0.0, abs=1e-10)
