"""Analytic derivatives of the log-likelihood and their per-unit decomposition.

All arrays use the full parameter stack (beta_1..beta_k, lambda, rho, sigma2)
of length d = k + 3, regardless of which coordinates a given model treats as
free; callers slice with a :class:`~sarpanel.model.ParamMap`.

The per-unit score psi[t, i, :] satisfies the aggregation identity

    score(theta) = (T-1)^{-1} * sum_{t, i} psi[t, i, :],

its Jacobian dpsi[t, i, :, :] aggregates to the Hessian the same way, and the
per-unit curvature d2psi[t, i, l, :, :] aggregates to the third-derivative
tensor.  The aggregate Hessian is also implemented directly from its
closed-form blocks, so the two routes cross-check each other in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SararParams, SpatialDesign, TransformedPanel, residuals


@dataclass
class UnitBlocks:
    """Per-(t, i) building blocks for the score and its derivatives.

    With u_t = S ytil_t - xtil_t beta:

    - ``v``  (T, n): residuals R u_t
    - ``b``  (T, n): (R W ytil_t)_i
    - ``c``  (T, n): (M u_t)_i, equal to (H v_t)_i
    - ``w``  (T, n): (M W ytil_t)_i
    - ``a``  (T, n, k): rows of R xtil_t
    - ``p``  (T, n, k): rows of M xtil_t
    - diagonals of G, H, G^2, H^2, G^3, H^3 at (lambda, rho)
    """

    params: SararParams
    T: int
    n: int
    k: int
    v: np.ndarray
    b: np.ndarray
    c: np.ndarray
    w: np.ndarray
    a: np.ndarray
    p: np.ndarray
    g_diag: np.ndarray
    h_diag: np.ndarray
    g2_diag: np.ndarray
    h2_diag: np.ndarray
    g3_diag: np.ndarray
    h3_diag: np.ndarray
    trace_g: float
    trace_h: float
    trace_g2: float
    trace_h2: float

    @property
    def d(self) -> int:
        return self.k + 3


def unit_blocks(params: SararParams, design: SpatialDesign, panel: TransformedPanel) -> UnitBlocks:
    ops = design.ops(params.lam, params.rho)
    w_mat = design.W.entries
    m_mat = design.M.entries
    ytil, xtil = panel.ytil, panel.xtil
    u = ytil @ ops.S.T
    if params.k:
        u = u - xtil @ params.beta
    v = u @ ops.R.T
    wy = ytil @ w_mat.T
    b = wy @ ops.R.T
    c = u @ m_mat.T
    w = wy @ m_mat.T
    if params.k:
        a = np.einsum("ij,tjk->tik", ops.R, xtil)
        p = np.einsum("ij,tjk->tik", m_mat, xtil)
    else:
        a = np.zeros(xtil.shape)
        p = np.zeros(xtil.shape)
    g = ops.G
    h = ops.H
    g2 = g @ g
    h2 = h @ h
    return UnitBlocks(
        params=params,
        T=panel.T,
        n=panel.n,
        k=params.k,
        v=v,
        b=b,
        c=c,
        w=w,
        a=a,
        p=p,
        g_diag=np.diag(g).copy(),
        h_diag=np.diag(h).copy(),
        g2_diag=np.diag(g2).copy(),
        h2_diag=np.diag(h2).copy(),
        g3_diag=np.einsum("ij,ji->i", g2, g),
        h3_diag=np.einsum("ij,ji->i", h2, h),
        trace_g=float(np.trace(g)),
        trace_h=float(np.trace(h)),
        trace_g2=float(np.trace(g2)),
        trace_h2=float(np.trace(h2)),
    )


def score(
    params: SararParams,
    design: SpatialDesign,
    panel: TransformedPanel,
    blocks: UnitBlocks | None = None,
) -> np.ndarray:
    """Gradient of the log-likelihood, full stack (beta, lambda, rho, sigma2)."""
    bl = blocks if blocks is not None else unit_blocks(params, design, panel)
    s2 = params.sigma2
    tm1 = panel.T - 1
    m = panel.m
    out = np.empty(bl.d)
    if bl.k:
        out[: bl.k] = np.einsum("tnj,tn->j", bl.a, bl.v) / s2
    out[bl.k] = -tm1 * bl.trace_g + np.sum(bl.b * bl.v) / s2
    out[bl.k + 1] = -tm1 * bl.trace_h + np.sum(bl.c * bl.v) / s2
    out[bl.k + 2] = -0.5 * m / s2 + 0.5 * np.sum(bl.v * bl.v) / s2**2
    return out


def hessian(
    params: SararParams,
    design: SpatialDesign,
    panel: TransformedPanel,
    blocks: UnitBlocks | None = None,
) -> np.ndarray:
    """Second derivative of the log-likelihood, assembled block by block."""
    bl = blocks if blocks is not None else unit_blocks(params, design, panel)
    s2 = params.sigma2
    tm1 = panel.T - 1
    m = panel.m
    k, d = bl.k, bl.d
    il, ir, isig = k, k + 1, k + 2
    out = np.zeros((d, d))
    if k:
        out[:k, :k] = -np.einsum("tnj,tnl->jl", bl.a, bl.a) / s2
        out[:k, il] = -np.einsum("tnj,tn->j", bl.a, bl.b) / s2
        out[:k, ir] = -(
            np.einsum("tnj,tn->j", bl.p, bl.v) + np.einsum("tnj,tn->j", bl.a, bl.c)
        ) / s2
        out[:k, isig] = -np.einsum("tnj,tn->j", bl.a, bl.v) / s2**2
    out[il, il] = -tm1 * bl.trace_g2 - np.sum(bl.b * bl.b) / s2
    out[il, ir] = -(np.sum(bl.w * bl.v) + np.sum(bl.b * bl.c)) / s2
    out[il, isig] = -np.sum(bl.b * bl.v) / s2**2
    out[ir, ir] = -tm1 * bl.trace_h2 - np.sum(bl.c * bl.c) / s2
    out[ir, isig] = -np.sum(bl.c * bl.v) / s2**2
    out[isig, isig] = 0.5 * m / s2**2 - np.sum(bl.v * bl.v) / s2**3
    lower = np.tril_indices(d, -1)
    out[lower] = out.T[lower]
    return out


def _stacked_s(bl: UnitBlocks) -> np.ndarray:
    """Stack (a_1..a_k, b, c) along the last axis: shape (T, n, k+2)."""
    return np.concatenate([bl.a, bl.b[..., None], bl.c[..., None]], axis=2)


def _stacked_ds(bl: UnitBlocks) -> np.ndarray:
    """ds[t, n, x, y] = d s_x / d theta_y for the stacked s = (a, b, c).

    Nonzero entries: da_j/drho = -p_j, db/drho = -w, dc/dbeta_j = -p_j,
    dc/dlambda = -w.
    """
    T, n, k, d = bl.T, bl.n, bl.k, bl.d
    ds = np.zeros((T, n, k + 2, d))
    ir = k + 1
    if k:
        ds[:, :, :k, ir] = -bl.p
        ds[:, :, k + 1, :k] = -bl.p
    ds[:, :, k, ir] = -bl.w
    ds[:, :, k + 1, k] = -bl.w
    return ds


def unit_scores(
    params: SararParams,
    design: SpatialDesign,
    panel: TransformedPanel,
    blocks: UnitBlocks | None = None,
) -> np.ndarray:
    """Per-unit score psi[t, i, :]; sums to (T-1) * score over (t, i)."""
    bl = blocks if blocks is not None else unit_blocks(params, design, panel)
    s2 = params.sigma2
    T, tm1 = bl.T, bl.T - 1
    kappa = tm1 / s2
    tau = tm1**2 / T
    psi = np.empty((T, bl.n, bl.d))
    if bl.k:
        psi[:, :, : bl.k] = kappa * bl.a * bl.v[..., None]
    psi[:, :, bl.k] = kappa * bl.b * bl.v - tau * bl.g_diag[None, :]
    psi[:, :, bl.k + 1] = kappa * bl.c * bl.v - tau * bl.h_diag[None, :]
    psi[:, :, bl.k + 2] = 0.5 * tm1 / s2**2 * (bl.v**2 - tm1 / T * s2)
    return psi


def unit_score_jacobians(
    params: SararParams,
    design: SpatialDesign,
    panel: TransformedPanel,
    blocks: UnitBlocks | None = None,
) -> np.ndarray:
    """Per-unit score Jacobians dpsi[t, i, :, :] (symmetric in the two axes)."""
    bl = blocks if blocks is not None else unit_blocks(params, design, panel)
    s2 = params.sigma2
    T, tm1 = bl.T, bl.T - 1
    k, d = bl.k, bl.d
    il, ir, isig = k, k + 1, k + 2
    kappa = tm1 / s2
    tau = tm1**2 / T
    s = _stacked_s(bl)
    ds = _stacked_ds(bl)
    v = bl.v
    out = np.zeros((T, bl.n, d, d))
    # rows x in (beta, lambda, rho): kappa * (ds_x * v - s_x s_y) plus traces
    out[:, :, : k + 2, :] = kappa * (ds * v[..., None, None])
    out[:, :, : k + 2, : k + 2] -= kappa * np.einsum("tnx,tny->tnxy", s, s)
    out[:, :, il, il] -= tau * bl.g2_diag[None, :]
    out[:, :, ir, ir] -= tau * bl.h2_diag[None, :]
    # sigma2 couplings
    sv = kappa / s2 * s * v[..., None]
    out[:, :, : k + 2, isig] = -sv
    out[:, :, isig, : k + 2] = -sv
    out[:, :, isig, isig] = -tm1 / s2**3 * v**2 + 0.5 * tm1**2 / (T * s2**2)
    return out


def unit_score_curvature(
    params: SararParams,
    design: SpatialDesign,
    panel: TransformedPanel,
    blocks: UnitBlocks | None = None,
) -> np.ndarray:
    """Per-unit second derivatives d2psi[t, i, l, r, s] of each score component.

    Component l of psi[t, i] is differentiated twice with respect to the full
    stack; aggregation over (t, i) with weight (T-1)^{-1} gives the third
    derivative of the log-likelihood.
    """
    bl = blocks if blocks is not None else unit_blocks(params, design, panel)
    s2 = params.sigma2
    T, tm1 = bl.T, bl.T - 1
    k, d = bl.k, bl.d
    il, ir, isig = k, k + 1, k + 2
    kappa = tm1 / s2
    tau = tm1**2 / T
    s = _stacked_s(bl)  # (T, n, k+2)
    ds = _stacked_ds(bl)  # (T, n, k+2, d)
    v = bl.v

    # d2v[t, n, y, z]: second derivative of v; nonzero at (beta_j, rho) = p_j
    # and (lambda, rho) = w, symmetrized.
    d2v = np.zeros((T, bl.n, d, d))
    if k:
        d2v[:, :, :k, ir] = bl.p
        d2v[:, :, ir, :k] = bl.p
    d2v[:, :, il, ir] = bl.w
    d2v[:, :, ir, il] = bl.w

    out = np.zeros((T, bl.n, d, d, d))

    # --- rows l in (beta, lambda, rho): psi_l = kappa * s_l * v - trace_l ---
    # (y, z) both spatial-side: kappa * (ds_l[y](-s_z) + ds_l[z](-s_y) + s_l d2v[y, z])
    blk = np.zeros((T, bl.n, k + 2, k + 2, k + 2))
    dss = ds[:, :, :, : k + 2]  # derivative wrt spatial-side coords only
    blk -= np.einsum("tnxy,tnz->tnxyz", dss, s)
    blk -= np.einsum("tnxz,tny->tnxyz", dss, s)
    blk += np.einsum("tnx,tnyz->tnxyz", s, d2v[:, :, : k + 2, : k + 2])
    out[:, :, : k + 2, : k + 2, : k + 2] = kappa * blk
    # trace curvature: only (lambda,lambda,lambda) and (rho,rho,rho)
    out[:, :, il, il, il] -= 2.0 * tau * bl.g3_diag[None, :]
    out[:, :, ir, ir, ir] -= 2.0 * tau * bl.h3_diag[None, :]
    # (y spatial, z = sigma2): -(1/s2) * d(s_l v)/dy = -(1/s2)*(ds_l[y] v - s_l s_y)
    dv_part = ds[:, :, :, : k + 2] * v[..., None, None] - np.einsum(
        "tnx,tny->tnxy", s, s
    )
    mixed = -(kappa / s2) * dv_part
    out[:, :, : k + 2, : k + 2, isig] = mixed
    out[:, :, : k + 2, isig, : k + 2] = mixed
    # (sigma2, sigma2): 2 kappa / s2^2 * s_l * v
    out[:, :, : k + 2, isig, isig] = 2.0 * kappa / s2**2 * s * v[..., None]

    # --- row l = sigma2: psi = (tm1/2)(v^2/s2^2 - tm1/(T s2)) ---
    sig = np.zeros((T, bl.n, d, d))
    sig[:, :, : k + 2, : k + 2] = (tm1 / s2**2) * (
        np.einsum("tny,tnz->tnyz", s, s) + v[..., None, None] * d2v[:, :, : k + 2, : k + 2]
    )
    grad_v = 2.0 * tm1 / s2**3 * s * v[..., None]
    sig[:, :, : k + 2, isig] = grad_v
    sig[:, :, isig, : k + 2] = grad_v
    sig[:, :, isig, isig] = 3.0 * tm1 / s2**4 * v**2 - tm1**2 / (T * s2**3)
    out[:, :, isig, :, :] = sig
    return out


def third_tensor(
    params: SararParams,
    design: SpatialDesign,
    panel: TransformedPanel,
    blocks: UnitBlocks | None = None,
) -> np.ndarray:
    """Third derivative of the log-likelihood, shape (d, d, d)."""
    bl = blocks if blocks is not None else unit_blocks(params, design, panel)
    d2psi = unit_score_curvature(params, design, panel, bl)
    return d2psi.sum(axis=(0, 1)) / (panel.T - 1)


def fd_gradient(f, theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, relative steps."""
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.asarray(theta, dtype=float)
    grad = np.empty(theta.size)
    for j in range(theta.size):
        h = step * (1.0 + abs(theta[j]))
        up = theta.copy()
        dn = theta.copy()
        up[j] += h
        dn[j] -= h
        grad[j] = (f(up) - f(dn)) / (2.0 * h)
    return grad


def fd_jacobian(f, theta: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian of a vector function, relative steps."""
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.asarray(theta, dtype=float)
    cols = []
    for j in range(theta.size):
        h = step * (1.0 + abs(theta[j]))
        up = theta.copy()
        dn = theta.copy()
        up[j] += h
        dn[j] -= h
        cols.append((np.asarray(f(up)) - np.asarray(f(dn))) / (2.0 * h))
    return np.stack(cols, axis=-1)
