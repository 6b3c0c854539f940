"""Gaussian ML fitting, first-order asymptotic variance, and Wald tests.

beta and sigma2 are concentrated out in closed form given (lambda, rho):
beta-hat solves the GLS normal equations in the R-transformed variables and
sigma2-hat = RSS/m.  The outer problem over the spatial parameters is a
bounded quasi-Newton search using the analytic profile gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .derivatives import score, unit_blocks
from .errors import FitError, SingularityError
from .model import (
    SPATIAL_PARAM_BOUND,
    ParamMap,
    SararParams,
    SpatialDesign,
    TransformedPanel,
    log_likelihood,
)


@dataclass(frozen=True)
class FitOptions:
    """Model variant and optimizer controls for :func:`fit`.

    ``has_rho=False`` pins rho at ``fixed_rho`` (SAR(1)); ``fixed_sigma2``
    treats the innovation variance as known instead of estimating it.
    """

    has_rho: bool = True
    fixed_rho: float = 0.0
    fixed_sigma2: float | None = None
    tol: float = 1e-6
    max_iter: int = 500
    bound: float = SPATIAL_PARAM_BOUND
    init: tuple | None = None

    def param_map(self, k: int) -> ParamMap:
        return ParamMap(k=k, has_rho=self.has_rho, has_sigma2=self.fixed_sigma2 is None)


@dataclass
class MleFit:
    params: SararParams
    pmap: ParamMap
    loglik: float
    score_norm: float
    iterations: int
    converged: bool
    boundary: bool
    vcov: np.ndarray
    se: np.ndarray
    design: SpatialDesign = field(repr=False)
    panel: TransformedPanel = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.params.to_vector().tolist(),
            "labels": ["beta%d" % (j + 1) for j in range(self.pmap.k)]
            + ["lambda", "rho", "sigma2"],
            "active": self.pmap.active.tolist(),
            "se": self.se.tolist(),
            "loglik": self.loglik,
            "converged": bool(self.converged),
            "boundary": bool(self.boundary),
            "iters": int(self.iterations),
            "score_norm": self.score_norm,
        }


class _Profile:
    """Concentrated log-likelihood over the free spatial parameters."""

    def __init__(self, design: SpatialDesign, panel: TransformedPanel, opts: FitOptions):
        self.design = design
        self.panel = panel
        self.opts = opts
        self.k = panel.k
        self.m = panel.m
        self.tm1 = panel.T - 1
        self.y_w = panel.ytil @ design.W.entries.T  # W ytil per period
        self.m_mat = design.M.entries

    def _spatial(self, x):
        lam = float(x[0])
        rho = float(x[1]) if self.opts.has_rho else self.opts.fixed_rho
        return lam, rho

    def concentrate(self, x):
        """Return (params, residuals, rss, loglik) at the profiled optimum."""
        lam, rho = self._spatial(x)
        panel = self.panel
        u = panel.ytil - lam * self.y_w
        if rho != 0.0:
            ru = u - rho * (u @ self.m_mat.T)
        else:
            ru = u
        if self.k:
            if rho != 0.0:
                xdd = panel.xtil - rho * np.einsum("ij,tjk->tik", self.m_mat, panel.xtil)
            else:
                xdd = panel.xtil
            gram = np.einsum("tnj,tnl->jl", xdd, xdd)
            rhs = np.einsum("tnj,tn->j", xdd, ru)
            try:
                beta = np.linalg.solve(gram, rhs)
            except np.linalg.LinAlgError as exc:
                raise SingularityError("collinear regressors in GLS step") from exc
            vt = ru - xdd @ beta
        else:
            beta = np.zeros(0)
            vt = ru
        rss = float(np.sum(vt * vt))
        if self.opts.fixed_sigma2 is None:
            sigma2 = max(rss / self.m, 1e-10)
        else:
            sigma2 = self.opts.fixed_sigma2
        ll = (
            -0.5 * self.m * np.log(2.0 * np.pi * sigma2)
            + self.tm1 * (self.design.logdet_s(lam) + self.design.logdet_r(rho))
            - 0.5 * rss / sigma2
        )
        params = SararParams(beta=beta, lam=lam, rho=rho, sigma2=sigma2)
        return params, u, vt, ll

    def negloglik_and_grad(self, x):
        lam, rho = self._spatial(x)
        params, u, vt, ll = self.concentrate(x)
        if self.k:
            u_hat = u - self.panel.xtil @ params.beta
        else:
            u_hat = u
        s2 = params.sigma2
        grad_lam = -self.tm1 * self.design.trace_g(lam) + np.sum(
            (self.y_w - rho * (self.y_w @ self.m_mat.T)) * vt
        ) / s2
        grad = [grad_lam]
        if self.opts.has_rho:
            grad_rho = -self.tm1 * self.design.trace_h(rho) + np.sum(
                (u_hat @ self.m_mat.T) * vt
            ) / s2
            grad.append(grad_rho)
        return -ll, -np.asarray(grad)


def fit(
    design: SpatialDesign,
    panel: TransformedPanel,
    opts: FitOptions | None = None,
) -> MleFit:
    """Maximize the within-transformed Gaussian likelihood.

    Raises :class:`FitError` when the optimizer reports failure; a solution
    on the +-bound box is returned but flagged via ``boundary``.
    """
    opts = opts or FitOptions()
    profile = _Profile(design, panel, opts)
    x0 = np.zeros(2 if opts.has_rho else 1)
    if opts.init is not None:
        x0 = np.asarray(opts.init, dtype=float)[: x0.size]
    starts = [x0]
    # With no covariates and W = M the likelihood is exactly symmetric in
    # (lambda, rho): optima come in swapped pairs and the diagonal holds a
    # saddle that traps symmetric starts.  Break the symmetry explicitly.
    symmetric = (
        opts.has_rho
        and panel.k == 0
        and np.array_equal(design.W.entries, design.M.entries)
    )
    if symmetric:
        starts += [np.array([0.4, -0.1]), np.array([-0.1, 0.4])]
    bounds = [(-opts.bound, opts.bound)] * x0.size

    res = None
    for start in starts:
        cand = optimize.minimize(
            profile.negloglik_and_grad,
            start,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": opts.max_iter, "ftol": 1e-13, "gtol": 1e-9},
        )
        if not cand.success:
            # line-search failures near the box edge: retry derivative-free
            cand_nm = optimize.minimize(
                lambda x: profile.negloglik_and_grad(x)[0],
                cand.x,
                method="Nelder-Mead",
                options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4 * opts.max_iter},
            )
            if cand_nm.fun <= cand.fun:
                cand_nm.x = np.clip(cand_nm.x, -opts.bound, opts.bound)
                cand_nm.nit += cand.nit
                cand_nm.success = cand_nm.success or cand.success
                cand = cand_nm
        if res is None or cand.fun < res.fun - 1e-12:
            if res is not None:
                cand.nit += res.nit
            res = cand
    if not res.success:
        raise FitError(f"likelihood maximisation failed: {res.message}", trace=res)
    if symmetric and res.x[0] > res.x[1]:
        # swapped pair maximizers are exact ties; label them as lambda <= rho
        swapped = res.x[::-1].copy()
        if abs(profile.negloglik_and_grad(swapped)[0] - res.fun) < 1e-9 * (1 + abs(res.fun)):
            res.x = swapped
    params, _, _, ll = profile.concentrate(res.x)
    pmap = opts.param_map(panel.k)
    full_score = score(params, design, panel)
    active_score = full_score[pmap.active].copy()
    boundary = bool(np.any(np.abs(res.x) >= opts.bound - 1e-8))
    if boundary:
        # at an active bound only the inward gradient direction must vanish
        spatial_pos = [pmap.i_lam] + ([pmap.i_rho] if opts.has_rho else [])
        for xj, pos in zip(res.x, spatial_pos):
            loc = list(pmap.active).index(pos)
            if xj >= opts.bound - 1e-8 and active_score[loc] > 0:
                active_score[loc] = 0.0
            if xj <= -opts.bound + 1e-8 and active_score[loc] < 0:
                active_score[loc] = 0.0
    norm = float(np.linalg.norm(active_score))
    converged = bool(res.success) and norm < opts.tol * (1.0 + abs(ll))
    info = asymptotic_information(params, design, panel.xtil, panel.T)
    info_active = info[np.ix_(pmap.active, pmap.active)]
    # lambda = rho with W = M leaves the (lambda, rho) block exactly singular
    if np.linalg.cond(info_active) > 1e10:
        vcov = np.full((pmap.d, pmap.d), np.nan)
    else:
        vcov = np.linalg.inv(info_active) / panel.m
    se = np.sqrt(np.clip(np.diag(vcov), 0.0, None))
    return MleFit(
        params=params,
        pmap=pmap,
        loglik=float(ll),
        score_norm=norm,
        iterations=int(res.nit),
        converged=converged,
        boundary=boundary,
        vcov=vcov,
        se=se,
        design=design,
        panel=panel,
    )


def asymptotic_information(
    params: SararParams, design: SpatialDesign, xtil: np.ndarray, T: int
) -> np.ndarray:
    """Per-observation information matrix of theta, full (k+3) stack.

    Sum of a data block (beta and lambda rows, scaled by 1/(m sigma2)) and a
    trace block in (lambda, rho, sigma2); equals -E[hessian]/m at the truth.
    """
    n = design.n
    m = n * (T - 1)
    s2 = params.sigma2
    k = params.k
    d = k + 3
    il, ir, isig = k, k + 1, k + 2
    ops = design.ops(params.lam, params.rho)
    gdd = ops.Gdd
    h = ops.H
    out = np.zeros((d, d))
    if k:
        xdd = np.einsum("ij,tjk->tik", ops.R, xtil)
        gxb = np.einsum("ij,tj->ti", gdd, xdd @ params.beta)
        out[:k, :k] = np.einsum("tnj,tnl->jl", xdd, xdd) / (m * s2)
        out[:k, il] = np.einsum("tnj,tn->j", xdd, gxb) / (m * s2)
        out[il, :k] = out[:k, il]
        out[il, il] += np.sum(gxb * gxb) / (m * s2)
    gs = gdd.T + gdd
    hs = h.T + h
    out[il, il] += np.trace(gs @ gdd) / n
    out[il, ir] = out[ir, il] = np.trace(hs @ gdd) / n
    out[ir, ir] = np.trace(hs @ h) / n
    out[il, isig] = out[isig, il] = np.trace(gdd) / (n * s2)
    out[ir, isig] = out[isig, ir] = np.trace(h) / (n * s2)
    out[isig, isig] = 0.5 / s2**2
    return out


@dataclass(frozen=True)
class WaldResult:
    stat: float
    p_value: float
    p_one_sided: float
    degenerate: bool = False


def wald_test(fit_result: MleFit, index: int, null_value: float) -> WaldResult:
    """Wald test of one active coordinate against a null value.

    ``index`` refers to the active-parameter ordering of ``fit_result.pmap``;
    the statistic is compared to chi-square(1), and the one-sided p-value is
    for the alternative "greater than the null".  A fit at a point where the
    information matrix is singular (lambda = rho with W = M) carries no
    identifying information about the coordinate: the test then reports a
    zero statistic flagged as degenerate.  An exactly zero variance raises.
    """
    if not fit_result.converged:
        raise FitError("Wald test requires a converged fit")
    theta = fit_result.params.to_vector()[fit_result.pmap.active]
    var = fit_result.vcov[index, index]
    if var == 0:
        raise SingularityError("zero variance for Wald test")
    if not np.isfinite(var) or var < 0:
        return WaldResult(stat=0.0, p_value=1.0, p_one_sided=0.5, degenerate=True)
    z = (theta[index] - null_value) / np.sqrt(var)
    stat = float(z * z)
    return WaldResult(
        stat=stat,
        p_value=float(stats.chi2.sf(stat, df=1)),
        p_one_sided=float(stats.norm.sf(z)),
    )


def wald_test_joint(fit_result: MleFit, indices, null_values) -> WaldResult:
    """Joint Wald test of several active coordinates (chi-square, q df)."""
    if not fit_result.converged:
        raise FitError("Wald test requires a converged fit")
    idx = np.atleast_1d(np.asarray(indices, dtype=int))
    nulls = np.atleast_1d(np.asarray(null_values, dtype=float))
    theta = fit_result.params.to_vector()[fit_result.pmap.active]
    sub = fit_result.vcov[np.ix_(idx, idx)]
    diff = theta[idx] - nulls
    if not np.all(np.isfinite(sub)):
        return WaldResult(stat=0.0, p_value=1.0, p_one_sided=0.5, degenerate=True)
    stat = float(diff @ np.linalg.solve(sub, diff))
    return WaldResult(
        stat=stat,
        p_value=float(stats.chi2.sf(stat, df=idx.size)),
        p_one_sided=float(stats.chi2.sf(stat, df=idx.size)) / 2.0,
    )


def expected_information_mc(
    params: SararParams,
    design: SpatialDesign,
    X: np.ndarray | None,
    T: int,
    reps: int,
    seed: int,
) -> np.ndarray:
    """Monte Carlo estimate of -E[hessian]/m at the truth (test oracle)."""
    from .derivatives import hessian
    from .model import simulate, within_transform

    n = design.n
    acc = None
    for r in range(reps):
        data = simulate(params, design, X, None, T, seed=seed + r)
        panel = within_transform(data)
        h = hessian(params, design, panel)
        acc = h if acc is None else acc + h
    return -acc / (reps * n * (T - 1))
