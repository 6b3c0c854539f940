"""Analytic derivatives vs finite-difference oracles and aggregation identities."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from sarpanel import derivatives as der
from sarpanel import model, weights


@pytest.fixture(scope="module")
def rook_design():
    return model.SpatialDesign(weights.row_normalize(weights.build_rook(4, 6)))


def _draw_case(design, T, k, seed):
    """Random (theta, panel) pair: data simulated near, evaluated away from, truth."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    n = design.n
    X = rng.standard_normal((T, n, k))
    truth = model.SararParams(
        beta=rng.standard_normal(k),
        lam=rng.uniform(-0.4, 0.4),
        rho=rng.uniform(-0.4, 0.4),
        sigma2=rng.uniform(0.5, 1.5),
    )
    data = model.simulate(truth, design, X, rng.standard_normal(n), T, seed=seed + 1)
    panel = model.within_transform(data)
    theta = model.SararParams(
        beta=truth.beta + 0.3 * rng.standard_normal(k),
        lam=np.clip(truth.lam + rng.uniform(-0.2, 0.2), -0.9, 0.9),
        rho=np.clip(truth.rho + rng.uniform(-0.2, 0.2), -0.9, 0.9),
        sigma2=truth.sigma2 * rng.uniform(0.8, 1.25),
    )
    return theta, panel


CASES = [(2, 0), (2, 2), (5, 0), (5, 4)]


class TestScore:
    @pytest.mark.parametrize("T,k", CASES)
    def test_matches_fd_of_loglik(self, rook_design, T, k):
        for seed in range(20):
            theta, panel = _draw_case(rook_design, T, k, 100 + seed)
            vec = theta.to_vector()
            analytic = der.score(theta, rook_design, panel)
            fd = der.fd_gradient(
                lambda t: model.log_likelihood(
                    model.SararParams.from_vector(t, k), rook_design, panel
                ),
                vec,
                step=1e-5,
            )
            assert_allclose(analytic, fd, rtol=1e-5, atol=1e-5 * (1 + np.abs(fd).max()))

    def test_beta_block_is_ols_normal_equation(self, rook_design):
        theta, panel = _draw_case(rook_design, 3, 2, 55)
        theta0 = theta.replace(lam=0.0, rho=0.0)
        s = der.score(theta0, rook_design, panel)
        vt = model.residuals(theta0, rook_design, panel)
        expect = np.einsum("tnj,tn->j", panel.xtil, vt) / theta0.sigma2
        assert_allclose(s[:2], expect, rtol=1e-12)

    def test_mean_zero_at_truth(self, rook_design):
        truth = model.SararParams(beta=np.zeros(0), lam=0.2, rho=0.3, sigma2=1.0)
        reps = 4000
        acc = np.zeros(3)
        acc2 = np.zeros(3)
        for r in range(reps):
            data = model.simulate(truth, rook_design, None, None, 2, seed=9_000 + r)
            panel = model.within_transform(data)
            s = der.score(truth, rook_design, panel)
            acc += s
            acc2 += s * s
        mean = acc / reps
        se = np.sqrt((acc2 / reps - mean**2) / reps)
        assert np.all(np.abs(mean) < 4 * se + 1e-12)


class TestUnitScores:
    @pytest.mark.parametrize("T,k", CASES)
    def test_aggregation_identity(self, rook_design, T, k):
        theta, panel = _draw_case(rook_design, T, k, 300)
        psi = der.unit_scores(theta, rook_design, panel)
        total = psi.sum(axis=(0, 1)) / (T - 1)
        assert_allclose(total, der.score(theta, rook_design, panel), atol=1e-9)

    def test_sar_rows_match_full_model(self, rook_design):
        # with k = 0 the (lambda, sigma2) rows coincide with the SARAR formulas
        theta, panel = _draw_case(rook_design, 2, 0, 301)
        theta = theta.replace(rho=0.0)
        psi = der.unit_scores(theta, rook_design, panel)
        kappa = (panel.T - 1) / theta.sigma2
        wy = panel.ytil @ rook_design.W.entries.T
        vt = model.residuals(theta, rook_design, panel)
        g_diag = np.diag(rook_design.ops(theta.lam, 0.0).G)
        lam_row = kappa * wy * vt - (panel.T - 1) ** 2 / panel.T * g_diag[None, :]
        assert_allclose(psi[:, :, 0], lam_row, atol=1e-12)

    def test_mean_zero_componentwise(self, rook_design):
        truth = model.SararParams(beta=np.zeros(0), lam=0.2, rho=0.0, sigma2=1.0)
        reps = 2000
        acc = None
        acc2 = None
        for r in range(reps):
            data = model.simulate(truth, rook_design, None, None, 2, seed=11_000 + r)
            panel = model.within_transform(data)
            psi = der.unit_scores(truth, rook_design, panel).sum(axis=0)
            acc = psi if acc is None else acc + psi
            acc2 = psi**2 if acc2 is None else acc2 + psi**2
        mean = acc / reps
        se = np.sqrt((acc2 / reps - mean**2) / reps)
        assert np.mean(np.abs(mean) < 4 * se + 1e-12) > 0.98

    def test_cross_unit_correlation_decays(self, rook_design):
        # unit scores are only asymptotically uncorrelated: O(1/n) bound
        truth = model.SararParams(beta=np.zeros(0), lam=0.2, rho=0.0, sigma2=1.0)
        reps = 5000
        n = 24
        acc = np.zeros((n, n))
        for r in range(reps):
            data = model.simulate(truth, rook_design, None, None, 2, seed=13_000 + r)
            panel = model.within_transform(data)
            lam_scores = der.unit_scores(truth, rook_design, panel)[:, :, 0].sum(axis=0)
            acc += np.outer(lam_scores, lam_scores)
        cov = acc / reps
        var_scale = np.mean(np.diag(cov))
        off = cov[~np.eye(n, dtype=bool)]
        assert np.mean(np.abs(off)) < 5.0 / n * var_scale


class TestHessian:
    @pytest.mark.parametrize("T,k", CASES)
    def test_matches_fd_of_score(self, rook_design, T, k):
        for seed in range(20):
            theta, panel = _draw_case(rook_design, T, k, 500 + seed)
            vec = theta.to_vector()
            analytic = der.hessian(theta, rook_design, panel)
            fd = der.fd_jacobian(
                lambda t: der.score(
                    model.SararParams.from_vector(t, k), rook_design, panel
                ),
                vec,
                step=1e-5,
            )
            scale = 1 + np.abs(fd).max()
            assert np.max(np.abs(analytic - fd)) / scale < 1e-4

    def test_symmetric_and_aggregates_jacobians(self, rook_design):
        theta, panel = _draw_case(rook_design, 5, 4, 600)
        h = der.hessian(theta, rook_design, panel)
        assert_allclose(h, h.T, atol=1e-9)
        jac = der.unit_score_jacobians(theta, rook_design, panel)
        assert_allclose(jac.sum(axis=(0, 1)) / (panel.T - 1), h, atol=1e-8)

    def test_beta_sigma_cross_block(self, rook_design):
        theta, panel = _draw_case(rook_design, 3, 2, 601)
        h = der.hessian(theta, rook_design, panel)
        ops = rook_design.ops(theta.lam, theta.rho)
        vt = model.residuals(theta, rook_design, panel)
        xdd = np.einsum("ij,tjk->tik", ops.R, panel.xtil)
        expect = -np.einsum("tnj,tn->j", xdd, vt) / theta.sigma2**2
        assert_allclose(h[:2, 4], expect, rtol=1e-10)

    def test_lambda_block_trace_term(self, rook_design):
        theta, panel = _draw_case(rook_design, 3, 0, 602)
        theta = theta.replace(rho=0.0)
        h = der.hessian(theta, rook_design, panel)
        g = rook_design.ops(theta.lam, 0.0).G
        wy = panel.ytil @ rook_design.W.entries.T
        expect = -(panel.T - 1) * np.trace(g @ g) - np.sum(wy * wy) / theta.sigma2
        assert_allclose(h[0, 0], expect, rtol=1e-10)

    def test_negative_semidefinite_at_mle(self, rook_design):
        from sarpanel import mle

        truth = model.SararParams(beta=np.zeros(0), lam=0.2, rho=0.3, sigma2=1.0)
        data = model.simulate(truth, rook_design, None, None, 5, seed=77)
        panel = model.within_transform(data)
        fit = mle.fit(rook_design, panel)
        h = der.hessian(fit.params, rook_design, panel)
        act = fit.pmap.active
        eigs = np.linalg.eigvalsh(h[np.ix_(act, act)])
        assert np.all(eigs <= 1e-6 * max(1.0, np.abs(eigs).max()))


class TestThirdTensor:
    @pytest.mark.parametrize("T,k", [(2, 0), (5, 0), (2, 2), (5, 4)])
    def test_matches_fd_of_hessian(self, rook_design, T, k):
        for seed in range(20):
            theta, panel = _draw_case(rook_design, T, k, 700 + seed)
            vec = theta.to_vector()
            analytic = der.third_tensor(theta, rook_design, panel)
            fd = der.fd_jacobian(
                lambda t: der.hessian(
                    model.SararParams.from_vector(t, k), rook_design, panel
                ),
                vec,
                step=1e-4,
            )
            scale = 1 + np.abs(fd).max()
            assert np.max(np.abs(analytic - fd)) / scale < 5e-4

    def test_fully_symmetric(self, rook_design):
        theta, panel = _draw_case(rook_design, 5, 2, 800)
        t3 = der.third_tensor(theta, rook_design, panel)
        for perm in [(0, 2, 1), (1, 0, 2), (2, 1, 0), (1, 2, 0), (2, 0, 1)]:
            assert np.max(np.abs(t3 - np.transpose(t3, perm))) < 5e-7 * (
                1 + np.abs(t3).max()
            )

    def test_pure_spatial_trace_entries(self, rook_design):
        theta, panel = _draw_case(rook_design, 5, 0, 801)
        t3 = der.third_tensor(theta, rook_design, panel)
        ops = rook_design.ops(theta.lam, theta.rho)
        g, h = ops.G, ops.H
        # d3l/dlambda3 = -2(T-1) tr(G^3); d3l/drho3 = -2(T-1) tr(H^3)
        assert_allclose(t3[0, 0, 0], -2 * (panel.T - 1) * np.trace(g @ g @ g), rtol=1e-10)
        assert_allclose(t3[1, 1, 1], -2 * (panel.T - 1) * np.trace(h @ h @ h), rtol=1e-10)


class TestTraceIdentities:
    def test_trace_powers_two_ways(self, rook_design):
        lam = 0.3
        ops = rook_design.ops(lam, 0.0)
        g = ops.G
        assert abs(np.trace(g) - rook_design.trace_g(lam)) < 1e-8
        eig = np.linalg.eigvals(rook_design.W.entries)
        assert abs(np.trace(g) - np.sum(eig / (1 - lam * eig)).real) < 1e-8


class TestFdOracle:
    def test_simple_derivative(self):
        g = der.fd_gradient(lambda t: float(t[0] ** 2), np.array([3.0]))
        assert_allclose(g, [6.0], atol=1e-8)

    def test_positive_step_required(self):
        with pytest.raises(ValueError):
            der.fd_gradient(lambda t: 0.0, np.zeros(1), step=0.0)
