"""Saddlepoint test for composite hypotheses on spatial parameters.

The statistic for testing coordinate(s) of theta against null values, with
the remaining coordinates as nuisances theta2, is

    stat = 2 n inf_{theta2} sup_{nu} -K(nu; theta_hat_tested, theta2),

where K is the Monte Carlo approximation of the per-unit score CGF

    K(nu) = n^{-1} sum_i log E[ exp(nu' psi_i) ],

psi_i is the unit-level estimating function averaged over periods, evaluated
at the *estimated* value of the tested coordinate(s) and at theta2, and the
expectation runs under the law with the tested coordinate(s) at their null
values and nuisances at theta2.  Under the null the statistic is
asymptotically chi-square with one degree of freedom per tested coordinate.

Monte Carlo draws use common random numbers across all (nu, theta2)
evaluations; covariates are held fixed (conditional inference) unless
``redraw_x`` is requested.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .errors import DimensionError, MonteCarloError
from .mle import MleFit
from .model import ParamMap, SararParams, SpatialDesign

_MAX_EXP = 690.0  # log of the largest safe double


@dataclass(frozen=True)
class SadTestOptions:
    mc_size: int = 2000
    seed: int = 0
    inner_tol: float = 1e-9
    inner_max_iter: int = 200
    outer_max_iter: int = 200
    outer_xatol: float = 1e-5
    outer_fatol: float = 1e-8
    redraw_x: bool = False


@dataclass
class SadTestResult:
    stat: float
    p_value: float
    df: int
    theta2_star: np.ndarray
    theta2_labels: list
    nu_star: np.ndarray
    mc_size: int
    seed: int
    inner_converged: bool
    outer_converged: bool
    evaluations: int = 0

    def to_dict(self) -> dict:
        return {
            "stat": self.stat,
            "p": self.p_value,
            "df": self.df,
            "theta2_star": self.theta2_star.tolist(),
            "theta2_labels": self.theta2_labels,
            "nu_star": self.nu_star.tolist(),
            "mc_size": self.mc_size,
            "seed": self.seed,
            "flags": {
                "inner_converged": bool(self.inner_converged),
                "outer_converged": bool(self.outer_converged),
            },
        }


class _ScoreSimulator:
    """Per-unit scores on simulated panels, vectorized over MC draws.

    Innovation draws (standard normals) are fixed at construction; spatial
    rebuilds are cached on the (lambda_sim, rho_sim, lambda_eval, rho_eval,
    beta) key so that nuisance moves in sigma2 alone cost only scalar
    rescaling of cached bilinear pieces.
    """

    def __init__(
        self,
        design: SpatialDesign,
        X: np.ndarray | None,
        T: int,
        pmap: ParamMap,
        mc_size: int,
        seed: int,
    ):
        self.design = design
        self.T = T
        self.n = design.n
        self.pmap = pmap
        self.k = pmap.k
        self.mc = mc_size
        if X is None:
            X = np.zeros((T, self.n, self.k))
        X = np.asarray(X, dtype=float)
        if X.shape != (T, self.n, self.k):
            raise DimensionError(f"X must have shape ({T}, {self.n}, {self.k})")
        self.xtil = X - X.mean(axis=0, keepdims=True)
        rng = np.random.Generator(np.random.Philox(key=seed))
        z = rng.standard_normal((mc_size, T, self.n))
        self.ztil = z - z.mean(axis=1, keepdims=True)
        self._key = None
        self._parts = None

    def _structure(self, sim: SararParams, ev: SararParams):
        """Bilinear pieces of the unit scores, split by powers of sigma_sim."""
        key = (
            sim.lam, sim.rho, ev.lam, ev.rho,
            sim.beta.tobytes(), ev.beta.tobytes(),
        )
        if key == self._key:
            return self._parts
        ops_sim = self.design.ops(sim.lam, sim.rho)
        ops_ev = self.design.ops(ev.lam, ev.rho)
        w_mat = self.design.W.entries
        m_mat = self.design.M.entries
        T, n, k, mc = self.T, self.n, self.k, self.mc
        # ytil = yd + sigma_sim * yz
        yz = (self.ztil.reshape(mc * T, n) @ ops_sim.r_inv.T) @ ops_sim.s_inv.T
        if k:
            yd = (self.xtil @ sim.beta) @ ops_sim.s_inv.T  # (T, n)
        else:
            yd = np.zeros((T, n))
        wyz = yz @ w_mat.T
        wyd = yd @ w_mat.T
        uz = yz - ev.lam * wyz
        ud = yd - ev.lam * wyd
        if k:
            ud = ud - self.xtil @ ev.beta
        vz = uz - ev.rho * (uz @ m_mat.T)
        vd = ud - ev.rho * (ud @ m_mat.T)
        cz = uz @ m_mat.T
        cd = ud @ m_mat.T
        bz = wyz - ev.rho * (wyz @ m_mat.T)
        bd = wyd - ev.rho * (wyd @ m_mat.T)

        def restack(arr):
            return arr.reshape(mc, T, n)

        vz, cz, bz = restack(vz), restack(cz), restack(bz)

        def prod(dz, dd, ez, ed):
            """sum_t (dd + s*dz)(ed + s*ez) -> coefficient arrays in s^0, s^1, s^2."""
            c0 = np.einsum("tn,tn->n", dd, ed)[None, :] * np.ones((mc, 1))
            c1 = np.einsum("mtn,tn->mn", dz, ed) + np.einsum("mtn,tn->mn", ez, dd)
            c2 = np.einsum("mtn,mtn->mn", dz, ez)
            return c0, c1, c2

        parts = {
            "bv": prod(bz, bd, vz, vd),
            "cv": prod(cz, cd, vz, vd),
            "vv": prod(vz, vd, vz, vd),
        }
        if k:
            a = np.einsum("ij,tjk->tik", ops_ev.R, self.xtil)
            av0 = np.einsum("tnk,tn->nk", a, vd)[None, :, :] * np.ones((mc, 1, 1))
            av1 = np.einsum("tnk,mtn->mnk", a, vz)
            parts["av"] = (av0, av1, np.zeros_like(av1))
        parts["trace_g"] = self.design.trace_g(ev.lam)
        parts["diag_g"] = np.diag(ops_ev.G).copy()
        parts["diag_h"] = np.diag(ops_ev.H).copy()
        self._key = key
        self._parts = parts
        return parts

    def unit_scores(self, sim: SararParams, ev: SararParams) -> np.ndarray:
        """psi array of shape (mc, n, d_active) under P_sim evaluated at ev."""
        parts = self._structure(sim, ev)
        s_sim = np.sqrt(sim.sigma2)
        s2e = ev.sigma2
        T = self.T
        tm1 = T - 1

        def combine(tripple):
            c0, c1, c2 = tripple
            return c0 + s_sim * c1 + s_sim**2 * c2

        bv = combine(parts["bv"]) / s2e - tm1 * parts["diag_g"][None, :]
        cv = combine(parts["cv"]) / s2e - tm1 * parts["diag_h"][None, :]
        vv = 0.5 * combine(parts["vv"]) / s2e**2 - 0.5 * tm1 / s2e
        cols = [bv[..., None], cv[..., None], vv[..., None]]
        if self.k:
            cols.insert(0, combine(parts["av"]) / s2e)
        full = np.concatenate(cols, axis=2)
        return full[:, :, self.pmap.active]


def score_cgf(nu: np.ndarray, psi: np.ndarray) -> float:
    """MC score CGF: n^{-1} sum_i [logsumexp_j(nu' psi_ij) - log mc]."""
    mc, n, _ = psi.shape
    expo = psi @ nu  # (mc, n)
    top = expo.max(axis=0)
    if np.any(top - expo.min(axis=0) > 2 * _MAX_EXP):
        raise MonteCarloError("tilt too large for stable CGF evaluation")
    lse = top + np.log(np.mean(np.exp(expo - top[None, :]), axis=0))
    return float(np.mean(lse))


def _cgf_grad_hess(nu: np.ndarray, psi: np.ndarray):
    mc, n, d = psi.shape
    expo = psi @ nu
    expo -= expo.max(axis=0, keepdims=True)
    wts = np.exp(expo)
    wts /= wts.sum(axis=0, keepdims=True)  # (mc, n)
    mean_psi = np.einsum("mn,mnd->nd", wts, psi)  # per-unit tilted mean
    grad = mean_psi.mean(axis=0)
    second = np.einsum("mn,mnd,mne->de", wts, psi, psi) / n
    hess = second - (mean_psi.T @ mean_psi) / n
    return grad, hess


def _inner_sup(psi: np.ndarray, nu0: np.ndarray, tol: float, max_iter: int):
    """Maximize -K over nu (K convex): damped Newton with backtracking.

    Returns (value of sup(-K), nu_star, converged).
    """
    d = psi.shape[2]
    nu = np.asarray(nu0, dtype=float).copy()
    if nu.shape != (d,):
        nu = np.zeros(d)
    val = score_cgf(nu, psi)
    converged = False
    for _ in range(max_iter):
        grad, hess = _cgf_grad_hess(nu, psi)
        gnorm = np.linalg.norm(grad)
        if gnorm < tol * (1.0 + abs(val)):
            converged = True
            break
        try:
            step = -np.linalg.solve(hess + 1e-12 * np.eye(d), grad)
        except np.linalg.LinAlgError:
            step = -grad
        # backtracking line search on K
        t = 1.0
        for _ in range(60):
            cand = nu + t * step
            try:
                cand_val = score_cgf(cand, psi)
            except MonteCarloError:
                t *= 0.5
                continue
            if cand_val <= val + 1e-4 * t * (grad @ step):
                break
            t *= 0.5
        else:
            break
        if abs(cand_val - val) < 1e-15 * (1.0 + abs(val)) and t < 1e-8:
            nu, val = cand, cand_val
            converged = True
            break
        nu, val = cand, cand_val
    return -val, nu, converged


def _pack_theta2(values, kinds, bound=0.99):
    out = np.empty(len(values))
    for i, (v, kind) in enumerate(zip(values, kinds)):
        if kind == "sigma2":
            out[i] = np.log(v)
        elif kind == "spatial":
            out[i] = np.arctanh(np.clip(v / bound, -1 + 1e-12, 1 - 1e-12))
        else:
            out[i] = v
    return out


def _unpack_theta2(x, kinds, bound=0.99):
    out = np.empty(len(x))
    for i, (v, kind) in enumerate(zip(x, kinds)):
        if kind == "sigma2":
            out[i] = np.exp(np.clip(v, -60.0, 60.0))
        elif kind == "spatial":
            out[i] = bound * np.tanh(v)
        else:
            out[i] = v
    return out


def sad_statistic(
    fit: MleFit,
    design: SpatialDesign,
    X: np.ndarray | None,
    T: int,
    test_indices,
    null_values,
    opts: SadTestOptions | None = None,
) -> SadTestResult:
    """Nested inf-sup saddlepoint statistic for the composite null.

    ``test_indices`` are positions in the active-parameter ordering of
    ``fit.pmap``; the remaining active coordinates form the nuisance vector,
    searched by Nelder-Mead starting from the MLE (sigma2 on a log scale,
    spatial parameters through a bounded tanh map).  The inner tilt problem
    is solved by damped Newton on the convex MC CGF with warm starts.
    """
    opts = opts or SadTestOptions()
    pmap = fit.pmap
    test_indices = [int(i) for i in np.atleast_1d(test_indices)]
    null_values = np.atleast_1d(np.asarray(null_values, dtype=float))
    if len(test_indices) != null_values.size:
        raise DimensionError("one null value per tested coordinate")
    labels = pmap.labels()
    nuisance_idx = [i for i in range(pmap.d) if i not in test_indices]
    kinds = []
    for i in nuisance_idx:
        if labels[i] == "sigma2":
            kinds.append("sigma2")
        elif labels[i] in ("lambda", "rho"):
            kinds.append("spatial")
        else:
            kinds.append("free")

    sim = _ScoreSimulator(design, X, T, pmap, opts.mc_size, opts.seed)
    theta_hat_active = fit.params.to_vector()[pmap.active]

    def build_params(active_vals) -> SararParams:
        full = fit.params.to_vector().copy()
        full[pmap.active] = active_vals
        return SararParams.from_vector(full, pmap.k)

    state = {"nu": np.zeros(pmap.d), "evals": 0, "inner_ok": True}

    def objective(x):
        active_nuis = _unpack_theta2(x, kinds)
        ev_vals = theta_hat_active.copy()
        sim_vals = theta_hat_active.copy()
        for pos, val in zip(nuisance_idx, active_nuis):
            ev_vals[pos] = val
            sim_vals[pos] = val
        for pos, val in zip(test_indices, null_values):
            sim_vals[pos] = val
        psi = sim.unit_scores(build_params(sim_vals), build_params(ev_vals))
        sup, nu, ok = _inner_sup(psi, state["nu"], opts.inner_tol, opts.inner_max_iter)
        state["nu"] = nu
        state["evals"] += 1
        state["inner_ok"] = state["inner_ok"] and ok
        return sup

    if nuisance_idx:
        x0 = _pack_theta2(theta_hat_active[nuisance_idx], kinds)
        res = optimize.minimize(
            objective,
            x0,
            method="Nelder-Mead",
            options={
                "xatol": opts.outer_xatol,
                "fatol": opts.outer_fatol,
                "maxiter": opts.outer_max_iter * max(1, len(x0)),
            },
        )
        best_x = res.x
        best_val = res.fun
        outer_ok = bool(res.success)
    else:
        best_x = np.zeros(0)
        best_val = objective(best_x)
        outer_ok = True
    stat = 2.0 * design.n * max(best_val, 0.0)
    df = len(test_indices)
    return SadTestResult(
        stat=float(stat),
        p_value=float(stats.chi2.sf(stat, df=df)),
        df=df,
        theta2_star=_unpack_theta2(best_x, kinds),
        theta2_labels=[labels[i] for i in nuisance_idx],
        nu_star=state["nu"].copy(),
        mc_size=opts.mc_size,
        seed=opts.seed,
        inner_converged=state["inner_ok"],
        outer_converged=outer_ok,
        evaluations=state["evals"],
    )


def plugin_density(
    fit: MleFit,
    design: SpatialDesign,
    X: np.ndarray | None,
    T: int,
    q,
    test_index: int,
    null_value: float,
    grid=None,
    mc_size: int = 10_000,
    seed: int = 0,
    pilot=None,
):
    """Saddlepoint density with nuisances fixed at their MLE values.

    Runs the simple-null pipeline at the plug-in reference (tested coordinate
    at its null, every nuisance at its estimate).  Second-order guarantees do
    not carry over to this plug-in use; it is provided as the pragmatic
    alternative to the inf-sup test.
    """
    from .approx import density_grid

    pmap = fit.pmap
    active_vals = fit.params.to_vector()[pmap.active].copy()
    active_vals[test_index] = null_value
    full = fit.params.to_vector().copy()
    full[pmap.active] = active_vals
    ref = SararParams.from_vector(full, pmap.k)
    return density_grid(
        ref, design, X, T, pmap, q,
        grid=grid, mc_size=mc_size, seed=seed, pilot=pilot,
    )
