"""Second-order expansion of the MLE and approximate cumulants of its
U-statistic representation.

For a scalar function q of the estimator, the centered quantity
q(theta_hat) - q(theta0) equals, up to O(m^{-3/2}), an order-two U-statistic
with kernel h_ij = g_i + g_j + gamma_ij built from:

- per-unit influence vectors  IF_i = Minv_i * psi_bar_i,
- the unit-level expected score Jacobians  M_i  (nonsingular by assumption),
- pair kernels combining observed score Jacobians and the expected score
  curvature contracted twice with influence vectors.

Expectations defining M_i and the curvature terms are available in closed
form (the unit blocks are Gaussian with known means and covariances); a
seeded Monte Carlo estimator of the same quantities is kept as an oracle.
The g/gamma moments entering the cumulants are estimated by seeded Monte
Carlo over panels simulated at theta0 with common random numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import derivatives as der
from .errors import DimensionError, MonteCarloError, SingularityError
from .model import ParamMap, SararParams, SpatialDesign, TransformedPanel

# ---------------------------------------------------------------------------
# scalar functionals of the parameter vector
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QFunctional:
    """Scalar function of the active parameter vector with frozen derivatives.

    ``gradient`` and ``hessian`` are evaluated at the reference parameter;
    the gradient must be nonzero.
    """

    gradient: np.ndarray
    hessian: np.ndarray
    name: str = "q"

    def __post_init__(self):
        grad = np.asarray(self.gradient, dtype=float)
        hess = np.asarray(self.hessian, dtype=float)
        if grad.ndim != 1:
            raise DimensionError("gradient must be a vector")
        if hess.shape != (grad.size, grad.size):
            raise DimensionError("hessian must be square and match the gradient")
        if not np.any(grad != 0):
            raise ValueError("q must have a nonzero gradient at the reference point")
        object.__setattr__(self, "gradient", grad)
        object.__setattr__(self, "hessian", hess)

    @property
    def d(self) -> int:
        return self.gradient.size

    @classmethod
    def coordinate(cls, d: int, index: int, name: str | None = None) -> "QFunctional":
        grad = np.zeros(d)
        grad[index] = 1.0
        return cls(grad, np.zeros((d, d)), name=name or f"coord{index}")

    @classmethod
    def linear(cls, weights, name: str = "contrast") -> "QFunctional":
        w = np.asarray(weights, dtype=float)
        return cls(w, np.zeros((w.size, w.size)), name=name)


# ---------------------------------------------------------------------------
# unit-level expectations (closed form + MC oracle)
# ---------------------------------------------------------------------------


def _design_moments(params: SararParams, design: SpatialDesign, xtil: np.ndarray, T: int):
    """Deterministic per-unit quantities entering the expectations.

    Returns a dict with the design matrices at theta0, the means of the
    stochastic unit blocks, and the diagonal second-moment contractions.
    """
    ops = design.ops(params.lam, params.rho)
    n = design.n
    k = params.k
    gdd = ops.Gdd
    h = ops.H
    q_mat = h @ gdd  # M G R^-1
    g = ops.G
    g2 = g @ g
    h2 = h @ h
    mom = {
        "ops": ops,
        "n": n,
        "k": k,
        "T": T,
        "sigma2": params.sigma2,
        "s2til": params.sigma2 * (T - 1) / T,
        "gdd": gdd,
        "h": h,
        "q_mat": q_mat,
        "gdd_diag": np.diag(gdd).copy(),
        "h_diag": np.diag(h).copy(),
        "q_diag": np.diag(q_mat).copy(),
        "gg_diag": np.einsum("ij,ij->i", gdd, gdd),
        "hh_diag": np.einsum("ij,ij->i", h, h),
        "gh_diag": np.einsum("ij,ij->i", gdd, h),
        "gq_diag": np.einsum("ij,ij->i", gdd, q_mat),
        "hq_diag": np.einsum("ij,ij->i", h, q_mat),
        "g2_diag": np.diag(g2).copy(),
        "h2_diag": np.diag(h2).copy(),
        "g3_diag": np.einsum("ij,ji->i", g2, g),
        "h3_diag": np.einsum("ij,ji->i", h2, h),
    }
    if k:
        xdd = np.einsum("ij,tjk->tik", ops.R, xtil)  # (T, n, k)
        p = np.einsum("ij,tjk->tik", design.M.entries, xtil)
        mu_b = np.einsum("ij,tj->ti", gdd, xdd @ params.beta)
        mu_w = np.einsum("ij,tj->ti", h, mu_b)
        mom.update(a=xdd, p=p, mu_b=mu_b, mu_w=mu_w)
    else:
        mom.update(
            a=np.zeros((T, n, 0)),
            p=np.zeros((T, n, 0)),
            mu_b=np.zeros((T, n)),
            mu_w=np.zeros((T, n)),
        )
    return mom


def unit_information(
    params: SararParams, design: SpatialDesign, xtil: np.ndarray, T: int
) -> np.ndarray:
    """Closed-form M_i = E[-(T-1)^{-1} sum_t dpsi_{i,t}/dtheta], shape (n, d, d).

    For a SAR(1) design (k = 0, rho = 0) the (lambda, lambda) entry reduces to
    (T-1) * (diag(G G') + diag(G^2)).
    """
    mom = _design_moments(params, design, xtil, T)
    n, k, s2 = mom["n"], mom["k"], mom["sigma2"]
    tm1 = T - 1
    d = k + 3
    il, ir, isig = k, k + 1, k + 2
    out = np.zeros((n, d, d))
    mu_b = mom["mu_b"]
    if k:
        a = mom["a"]
        out[:, :k, :k] = np.einsum("tnj,tnl->njl", a, a) / s2
        out[:, :k, il] = np.einsum("tnj,tn->nj", a, mu_b) / s2
        out[:, il, :k] = out[:, :k, il]
    out[:, il, il] = np.einsum("tn->n", mu_b * mu_b) / s2 + tm1 * (
        mom["gg_diag"] + mom["g2_diag"]
    )
    out[:, il, ir] = out[:, ir, il] = tm1 * (mom["q_diag"] + mom["gh_diag"])
    out[:, il, isig] = out[:, isig, il] = tm1 * mom["gdd_diag"] / s2
    out[:, ir, ir] = tm1 * (mom["hh_diag"] + mom["h2_diag"])
    out[:, ir, isig] = out[:, isig, ir] = tm1 * mom["h_diag"] / s2
    out[:, isig, isig] = 0.5 * tm1 / s2**2
    return out


def unit_curvature_expectation(
    params: SararParams, design: SpatialDesign, xtil: np.ndarray, T: int
) -> np.ndarray:
    """Closed-form E[sum_t d2psi_{i,t,l}/dtheta dtheta'], shape (n, d, d, d).

    Axis 1 indexes the score component l; axes 2-3 the differentiation pair.
    """
    mom = _design_moments(params, design, xtil, T)
    n, k, s2 = mom["n"], mom["k"], mom["sigma2"]
    tm1 = T - 1
    kappa = tm1 / s2
    s2til = mom["s2til"]
    d = k + 3
    il, ir, isig = k, k + 1, k + 2
    a, p, mu_b, mu_w = mom["a"], mom["p"], mom["mu_b"], mom["mu_w"]
    sum_mu2 = np.einsum("tn,tn->n", mu_b, mu_b)
    sum_mubw = np.einsum("tn,tn->n", mu_b, mu_w)
    e_b2 = sum_mu2 + T * s2til * mom["gg_diag"]
    e_bw = sum_mubw + T * s2til * mom["gq_diag"]
    e_bc = T * s2til * mom["gh_diag"]
    e_bv = T * s2til * mom["gdd_diag"]
    e_cv = T * s2til * mom["h_diag"]
    e_wv = T * s2til * mom["q_diag"]
    e_c2 = T * s2til * mom["hh_diag"]
    e_wc = T * s2til * mom["hq_diag"]

    out = np.zeros((n, d, d, d))

    if k:
        sum_aa = np.einsum("tnj,tnl->njl", a, a)
        sum_ap_sym = np.einsum("tnj,tnl->njl", p, a) + np.einsum("tnj,tnl->njl", a, p)
        sum_amub = np.einsum("tnj,tn->nj", a, mu_b)
        sum_pmub = np.einsum("tnj,tn->nj", p, mu_b)
        sum_amuw = np.einsum("tnj,tn->nj", a, mu_w)
        # rows l = beta_j
        out[:, :k, :k, ir] = kappa * sum_ap_sym
        out[:, :k, ir, :k] = np.swapaxes(out[:, :k, :k, ir], 1, 2)
        mixed = kappa * (sum_pmub + sum_amuw)
        out[:, :k, il, ir] = out[:, :k, ir, il] = mixed
        out[:, :k, :k, isig] = (kappa / s2) * sum_aa
        out[:, :k, isig, :k] = np.swapaxes(out[:, :k, :k, isig], 1, 2)
        out[:, :k, il, isig] = out[:, :k, isig, il] = (kappa / s2) * sum_amub
        # row l = lambda, beta couplings
        out[:, il, :k, ir] = out[:, il, ir, :k] = kappa * (sum_amuw + sum_pmub)
        out[:, il, :k, isig] = out[:, il, isig, :k] = (kappa / s2) * sum_amub
        # row l = rho, beta couplings
        out[:, ir, :k, :k] = kappa * sum_ap_sym
        out[:, ir, :k, il] = out[:, ir, il, :k] = kappa * (sum_pmub + sum_amuw)
        # row l = sigma2, beta couplings
        out[:, isig, :k, :k] = (tm1 / s2**2) * sum_aa
        out[:, isig, :k, il] = out[:, isig, il, :k] = (tm1 / s2**2) * sum_amub

    # row l = lambda
    out[:, il, il, il] = -2.0 * tm1**2 * mom["g3_diag"]
    out[:, il, il, ir] = out[:, il, ir, il] = 2.0 * kappa * e_bw
    out[:, il, ir, ir] = 2.0 * kappa * e_wc
    out[:, il, il, isig] = out[:, il, isig, il] = (kappa / s2) * e_b2
    out[:, il, ir, isig] = out[:, il, isig, ir] = (kappa / s2) * (e_wv + e_bc)
    out[:, il, isig, isig] = (2.0 * kappa / s2**2) * e_bv

    # row l = rho
    out[:, ir, il, il] = 2.0 * kappa * e_bw
    out[:, ir, il, ir] = out[:, ir, ir, il] = 2.0 * kappa * e_wc
    out[:, ir, ir, ir] = -2.0 * tm1**2 * mom["h3_diag"]
    out[:, ir, il, isig] = out[:, ir, isig, il] = (kappa / s2) * (e_wv + e_bc)
    out[:, ir, ir, isig] = out[:, ir, isig, ir] = (kappa / s2) * e_c2
    out[:, ir, isig, isig] = (2.0 * kappa / s2**2) * e_cv

    # row l = sigma2
    out[:, isig, il, il] = (tm1 / s2**2) * e_b2
    out[:, isig, il, ir] = out[:, isig, ir, il] = (tm1 / s2**2) * (e_bc + e_wv)
    out[:, isig, ir, ir] = (tm1 / s2**2) * e_c2
    out[:, isig, il, isig] = out[:, isig, isig, il] = (2.0 * tm1 / s2**3) * e_bv
    out[:, isig, ir, isig] = out[:, isig, isig, ir] = (2.0 * tm1 / s2**3) * e_cv
    out[:, isig, isig, isig] = 2.0 * tm1**2 / s2**3
    return out


def unit_information_mc(
    params: SararParams,
    design: SpatialDesign,
    X: np.ndarray | None,
    T: int,
    mc_size: int,
    seed: int,
) -> np.ndarray:
    """Monte Carlo estimate of M_i over simulated panels (oracle path)."""
    ctx = KernelContext(
        params, design, X, T, ParamMap(k=params.k), QFunctional.coordinate(params.k + 3, params.k)
    )
    rng = np.random.Generator(np.random.Philox(key=seed))
    acc = np.zeros((design.n, ctx.pmap.d_full, ctx.pmap.d_full))
    for _ in range(mc_size):
        blocks = ctx.draw_blocks(rng)
        jac = der.unit_score_jacobians(params, design, ctx.panel_stub, blocks)
        acc -= jac.sum(axis=0) / (T - 1)
    return acc / mc_size


def unit_curvature_expectation_mc(
    params: SararParams,
    design: SpatialDesign,
    X: np.ndarray | None,
    T: int,
    mc_size: int,
    seed: int,
) -> np.ndarray:
    """Monte Carlo estimate of the per-unit curvature expectations (oracle)."""
    ctx = KernelContext(
        params, design, X, T, ParamMap(k=params.k), QFunctional.coordinate(params.k + 3, params.k)
    )
    rng = np.random.Generator(np.random.Philox(key=seed))
    d = ctx.pmap.d_full
    acc = np.zeros((design.n, d, d, d))
    for _ in range(mc_size):
        blocks = ctx.draw_blocks(rng)
        acc += der.unit_score_curvature(params, design, ctx.panel_stub, blocks).sum(axis=0)
    return acc / mc_size


# ---------------------------------------------------------------------------
# kernel evaluation on simulated panels
# ---------------------------------------------------------------------------


class KernelContext:
    """Precomputed design quantities for evaluating the expansion kernels.

    X (and hence xtil) is held fixed across simulated panels; only the
    innovations are redrawn.  All outputs live on the active parameter
    coordinates of ``pmap``; ``q`` must match that dimension.
    """

    def __init__(
        self,
        params: SararParams,
        design: SpatialDesign,
        X: np.ndarray | None,
        T: int,
        pmap: ParamMap,
        q: QFunctional,
    ):
        n = design.n
        if X is None:
            X = np.zeros((T, n, params.k))
        X = np.asarray(X, dtype=float)
        if X.shape != (T, n, params.k):
            raise DimensionError(f"X must have shape ({T}, {n}, {params.k})")
        if q.d != pmap.d:
            raise DimensionError(f"q has dimension {q.d}, active stack is {pmap.d}")
        self.params = params
        self.design = design
        self.T = T
        self.n = n
        self.pmap = pmap
        self.q = q
        self.xtil = X - X.mean(axis=0, keepdims=True)
        self.mom = _design_moments(params, design, self.xtil, T)
        # dummy panel carrying xtil/DIMS for the derivatives module
        self.panel_stub = TransformedPanel(ytil=np.zeros((T, n)), xtil=self.xtil)

        act = pmap.active
        m_full = unit_information(params, design, self.xtil, T)
        self.m_unit = m_full[np.ix_(np.arange(n), act, act)]
        conds = np.linalg.cond(self.m_unit)
        if not np.all(np.isfinite(conds)) or conds.max() > 1e12:
            raise SingularityError("a unit-level information matrix is singular")
        self.m_unit_inv = np.linalg.inv(self.m_unit)
        a_full = unit_curvature_expectation(params, design, self.xtil, T)
        self.a_unit = a_full[np.ix_(np.arange(n), act, act, act)]
        # e_i = Minv_i' dq ; B_i = sum_l e_i[l] A_i[l]; both enter gamma
        self.e_unit = np.einsum("nba,b->na", self.m_unit_inv, q.gradient)
        self.b_unit = np.einsum("nl,nlrs->nrs", self.e_unit, self.a_unit)

    # -- simulation ---------------------------------------------------------

    def draw_innovations(self, rng: np.random.Generator) -> np.ndarray:
        return np.sqrt(self.params.sigma2) * rng.standard_normal((self.T, self.n))

    def blocks_from_innovations(self, v_raw: np.ndarray) -> der.UnitBlocks:
        """Unit blocks at theta0 for a panel with the given innovations.

        Uses the identities v = vtil, b = mu_b + Gdd vtil, c = H vtil,
        w = mu_w + (H Gdd) vtil, avoiding panel reconstruction.
        """
        mom = self.mom
        vtil = v_raw - v_raw.mean(axis=0, keepdims=True)
        return der.UnitBlocks(
            params=self.params,
            T=self.T,
            n=self.n,
            k=self.params.k,
            v=vtil,
            b=mom["mu_b"] + vtil @ mom["gdd"].T,
            c=vtil @ mom["h"].T,
            w=mom["mu_w"] + vtil @ mom["q_mat"].T,
            a=mom["a"],
            p=mom["p"],
            g_diag=np.diag(mom["ops"].G).copy(),
            h_diag=np.diag(mom["ops"].H).copy(),
            g2_diag=mom["g2_diag"],
            h2_diag=mom["h2_diag"],
            g3_diag=mom["g3_diag"],
            h3_diag=mom["h3_diag"],
            trace_g=float(np.sum(np.diag(mom["ops"].G))),
            trace_h=float(np.sum(np.diag(mom["ops"].H))),
            trace_g2=float(np.sum(mom["g2_diag"])),
            trace_h2=float(np.sum(mom["h2_diag"])),
        )

    def draw_blocks(self, rng: np.random.Generator) -> der.UnitBlocks:
        return self.blocks_from_innovations(self.draw_innovations(rng))

    def blocks_for_panel(self, panel: TransformedPanel) -> der.UnitBlocks:
        return der.unit_blocks(self.params, self.design, panel)

    # -- kernels ------------------------------------------------------------

    def unit_stats(self, blocks: der.UnitBlocks):
        """(psi_bar, D): averaged unit scores and score Jacobians, active coords."""
        act = self.pmap.active
        psi = der.unit_scores(self.params, self.design, self.panel_stub, blocks)
        jac = der.unit_score_jacobians(self.params, self.design, self.panel_stub, blocks)
        tm1 = self.T - 1
        psi_bar = psi.sum(axis=0)[:, act] / tm1
        d_unit = jac.sum(axis=0)[np.ix_(np.arange(self.n), act, act)] / tm1
        return psi_bar, d_unit

    def influence(self, blocks: der.UnitBlocks) -> np.ndarray:
        """Influence vectors IF_i = Minv_i psi_bar_i, shape (n, d_active)."""
        psi_bar, _ = self.unit_stats(blocks)
        return np.einsum("nab,nb->na", self.m_unit_inv, psi_bar)

    def pair_kernel(self, blocks: der.UnitBlocks, i: int, j: int):
        """(phi_ij, Gamma_ij) for one ordered pair; the U-statistic uses i < j."""
        if i == j:
            raise ValueError("pair kernel is defined for distinct units only")
        psi_bar, d_unit = self.unit_stats(blocks)
        iff = np.einsum("nab,nb->na", self.m_unit_inv, psi_bar)
        gamma_vec = np.einsum("b,lba,a->l", iff[j], self.a_unit[i], iff[i])
        phi = (
            iff[i]
            + iff[j]
            + self.m_unit_inv[i] @ gamma_vec
            + self.m_unit_inv[i] @ (d_unit[j] @ iff[i] + d_unit[i] @ iff[j])
        )
        return phi, gamma_vec

    def g_gamma(self, blocks: der.UnitBlocks):
        """(g, gamma) kernels for one draw.

        ``g`` has shape (n,); ``gamma`` is the (n, n) matrix whose (i, j)
        entry, i < j, is the printed pair kernel; it is symmetrized across the
        diagonal (the kernel is defined on unordered pairs) with zero diagonal.
        """
        psi_bar, d_unit = self.unit_stats(blocks)
        iff = np.einsum("nab,nb->na", self.m_unit_inv, psi_bar)
        dq = self.q.gradient
        g = 0.5 * iff @ dq
        # gamma_ij = g_i + g_j + (t_Gamma + t_D1 + t_D2 + t_quad)/2
        c_vec = np.einsum("nrs,ns->nr", self.b_unit, iff)  # B_i IF_i
        t_gamma = c_vec @ iff.T  # [i, j] = IF_j' B_i IF_i
        p_flat = np.einsum("na,nb->nab", iff, self.e_unit).reshape(self.n, -1)
        d_flat = d_unit.reshape(self.n, -1)
        t_d1 = p_flat @ d_flat.T  # [i, j] = IF_i' D_j e_i
        r_vec = np.einsum("nab,na->nb", d_unit, self.e_unit)  # D_i' e_i
        t_d2 = r_vec @ iff.T  # [i, j] = IF_j' D_i e_i
        t_quad = iff @ self.q.hessian @ iff.T
        gamma = g[:, None] + g[None, :] + 0.5 * (t_gamma + t_d1 + t_d2 + t_quad)
        upper = np.triu(gamma, k=1)
        gamma = upper + upper.T
        return g, gamma

    def u_statistic(self, blocks: der.UnitBlocks) -> float:
        """Order-two U-statistic approximating q(theta_hat) - q(theta0)."""
        g, gamma = self.g_gamma(blocks)
        n = self.n
        pair_sum = 0.5 * gamma.sum()  # gamma is symmetric with zero diagonal
        return float(2.0 / n * g.sum() + 2.0 / (n * (n - 1)) * pair_sum)


# ---------------------------------------------------------------------------
# cumulants of the U-statistic
# ---------------------------------------------------------------------------


@dataclass
class CumulantSet:
    """Approximate cumulants of the order-two U-statistic for a functional q.

    ``sigma_nT2`` is the variance of the U-statistic itself (both summands);
    ``kappa3``/``kappa4`` are the n-free standardized third/fourth cumulant
    constants, to be scaled by n^{-1/2} and n^{-1} respectively.
    """

    n: int
    T: int
    mu: float
    sigma_g2: float
    sigma_nT2: float
    kappa3: float
    kappa4: float
    mc_size: int
    seed: int
    q_name: str = "q"
    moments: dict = field(default_factory=dict)

    @property
    def sigma_nT(self) -> float:
        return float(np.sqrt(self.sigma_nT2))

    def to_json(self, path=None) -> str:
        payload = {
            "n": self.n,
            "T": self.T,
            "mu": self.mu,
            "sigma_g2": self.sigma_g2,
            "sigma_nT2": self.sigma_nT2,
            "kappa3": self.kappa3,
            "kappa4": self.kappa4,
            "mc_size": self.mc_size,
            "seed": self.seed,
            "q_name": self.q_name,
            "moments": self.moments,
        }
        text = json.dumps(payload, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, text: str) -> "CumulantSet":
        data = json.loads(text)
        return cls(**data)


def moments_from_kernels(g_draws: np.ndarray, gamma_draws: np.ndarray) -> dict:
    """Reduce per-draw kernels to the bar-moments the cumulants need.

    ``g_draws``: (reps, n); ``gamma_draws``: (reps, n, n) symmetric, zero
    diagonal.  Pure function so synthetic kernels can be fed in tests.
    """
    reps, n = g_draws.shape
    iu = np.triu_indices(n, k=1)
    g2 = float(np.mean(np.sum(g_draws**2, axis=1)) / n)
    g3 = float(np.mean(np.sum(g_draws**3, axis=1)) / n)
    g4 = float(np.mean(np.sum(g_draws**4, axis=1)) / n)
    gam_u = gamma_draws[:, iu[0], iu[1]]  # (reps, npairs)
    sum_gamma2 = float(np.mean(np.sum(gam_u**2, axis=1)))
    gg = g_draws[:, iu[0]] * g_draws[:, iu[1]]
    g1g2gam = float(np.mean(np.sum(gg * gam_u, axis=1)))
    g1sqg2gam = float(
        np.mean(np.sum((g_draws[:, iu[0]] + g_draws[:, iu[1]]) * gg * gam_u, axis=1))
    )
    # triple sum over k of pairs (i<j), both != k, of g_i g_j gamma_ik gamma_jk
    s_k = np.einsum("ri,rik->rk", g_draws, gamma_draws)
    q_k = np.einsum("ri,rik->rk", g_draws**2, gamma_draws**2)
    triple = float(np.mean(0.5 * np.sum(s_k**2 - q_k, axis=1)))
    return {
        "g2_bar": g2,
        "g3_bar": g3,
        "g4_bar": g4,
        "sum_gamma2": sum_gamma2,
        "sum_g1g2gamma12": g1g2gam,
        "sum_g1sqg2gamma12": g1sqg2gam,
        "sum_triple": triple,
    }


def cumulants_from_moments(n: int, T: int, moments: dict, mc_size: int, seed: int, q_name="q") -> CumulantSet:
    sigma_g2 = moments["g2_bar"]
    if sigma_g2 <= 0:
        raise MonteCarloError("estimated sigma_g^2 is nonpositive; increase mc_size")
    sigma_nT2 = 4.0 / n * sigma_g2 + 4.0 / (n**2 * (n - 1) ** 2) * moments["sum_gamma2"]
    g1g2gam_bar = 2.0 / (n * (n - 1)) * moments["sum_g1g2gamma12"]
    g1sqg2gam_bar = 1.0 / (n * (n - 1)) * moments["sum_g1sqg2gamma12"]
    triple_bar = 2.0 / (n * (n - 1) * (n - 2)) * moments["sum_triple"]
    kappa3 = sigma_g2 ** (-1.5) * (moments["g3_bar"] + 3.0 * g1g2gam_bar)
    kappa4 = sigma_g2 ** (-2.0) * (moments["g4_bar"] + 12.0 * triple_bar + 12.0 * g1sqg2gam_bar) - 3.0
    return CumulantSet(
        n=n,
        T=T,
        mu=0.0,
        sigma_g2=float(sigma_g2),
        sigma_nT2=float(sigma_nT2),
        kappa3=float(kappa3),
        kappa4=float(kappa4),
        mc_size=mc_size,
        seed=seed,
        q_name=q_name,
        moments=moments,
    )


def cumulants(
    params: SararParams,
    design: SpatialDesign,
    X: np.ndarray | None,
    T: int,
    pmap: ParamMap,
    q: QFunctional,
    mc_size: int = 10_000,
    seed: int = 0,
    batch: int = 256,
) -> CumulantSet:
    """Estimate the U-statistic cumulants by seeded MC at the reference theta.

    Draws use common random numbers derived from ``seed`` by counter, and the
    reduction runs in fixed index order, so results are reproducible and
    independent of batching.
    """
    if mc_size < 1000:
        raise MonteCarloError("mc_size must be at least 1000")
    ctx = KernelContext(params, design, X, T, pmap, q)
    rng = np.random.Generator(np.random.Philox(key=seed))
    acc: dict = {}
    done = 0
    while done < mc_size:
        nb = min(batch, mc_size - done)
        g_list = np.empty((nb, ctx.n))
        gam_list = np.empty((nb, ctx.n, ctx.n))
        for r in range(nb):
            blocks = ctx.draw_blocks(rng)
            g_list[r], gam_list[r] = ctx.g_gamma(blocks)
        part = moments_from_kernels(g_list, gam_list)
        for key, val in part.items():
            acc[key] = acc.get(key, 0.0) + val * nb
        done += nb
    moments = {key: val / done for key, val in acc.items()}
    return cumulants_from_moments(ctx.n, T, moments, mc_size, seed, q_name=q.name)


# ---------------------------------------------------------------------------
# approximate CGF
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ApproxCgf:
    """Quartic approximate CGF K(nu) = c2 nu^2/2 + c3 nu^3/6 + c4 nu^4/24.

    Behaves like the per-unit CGF of a mean of n terms: the density and tail
    formulas downstream carry the explicit factor n.  ``nu_lo``/``nu_hi``
    bound the maximal interval around 0 on which K'' > 0.
    """

    n: int
    c2: float
    c3: float
    c4: float
    sigma_nT2: float
    nu_lo: float
    nu_hi: float

    def value(self, nu):
        nu = np.asarray(nu, dtype=float)
        return 0.5 * self.c2 * nu**2 + self.c3 * nu**3 / 6.0 + self.c4 * nu**4 / 24.0

    def d1(self, nu):
        nu = np.asarray(nu, dtype=float)
        return self.c2 * nu + 0.5 * self.c3 * nu**2 + self.c4 * nu**3 / 6.0

    def d2(self, nu):
        nu = np.asarray(nu, dtype=float)
        return self.c2 + self.c3 * nu + 0.5 * self.c4 * nu**2

    def z_range(self):
        """Attainable z-interval (image of the convex domain under K')."""
        lo = -np.inf if np.isinf(self.nu_lo) else float(self.d1(self.nu_lo))
        hi = np.inf if np.isinf(self.nu_hi) else float(self.d1(self.nu_hi))
        return lo, hi


def approx_cgf(cset: CumulantSet) -> ApproxCgf:
    """Build the quartic CGF from a cumulant set.

    Coefficients: c2 = n sigma2, c3 = n^{3/2} kappa3 sigma^3,
    c4 = n^2 kappa4 sigma^4, with sigma2 the U-statistic variance.
    """
    n = cset.n
    sig = cset.sigma_nT
    c2 = n * cset.sigma_nT2
    c3 = n**1.5 * cset.kappa3 * sig**3
    c4 = n**2 * cset.kappa4 * sig**4
    # convex domain: roots of K''(nu) = c2 + c3 nu + c4 nu^2 / 2
    nu_lo, nu_hi = -np.inf, np.inf
    if c4 != 0.0:
        disc = c3**2 - 2.0 * c4 * c2
        if disc >= 0:
            r1 = (-c3 - np.sqrt(disc)) / c4
            r2 = (-c3 + np.sqrt(disc)) / c4
            roots = sorted((r1, r2))
            neg = [r for r in roots if r < 0]
            pos = [r for r in roots if r > 0]
            if neg:
                nu_lo = max(neg)
            if pos:
                nu_hi = min(pos)
    elif c3 != 0.0:
        root = -c2 / c3
        if root > 0:
            nu_hi = root
        else:
            nu_lo = root
    return ApproxCgf(
        n=n, c2=float(c2), c3=float(c3), c4=float(c4),
        sigma_nT2=cset.sigma_nT2, nu_lo=float(nu_lo), nu_hi=float(nu_hi),
    )
