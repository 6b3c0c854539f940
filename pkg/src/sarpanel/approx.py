"""Edgeworth and saddlepoint distribution approximations.

Everything here approximates the law of the centered scalar
Delta = q(theta_hat) - q(theta0) from the quartic CGF built in
:mod:`sarpanel.expansion`.  The CGF behaves like the per-unit CGF of a mean
of n terms, so density and tail formulas carry explicit factors of n:

- density          p(z) = sqrt(n / (2 pi K''(nu))) exp(n [K(nu) - nu z])
- tail (right)     1 - Phi(r) + phi(r) (1/c - 1/r)
                   r = sign(nu) sqrt(2 n [nu z - K(nu)]),
                   c = nu sqrt(n K''(nu))

with K'(nu) = z the saddlepoint equation.  The Edgeworth expansion for the
standardized CDF uses the third/fourth cumulant constants directly and can
leave [0, 1] in the tails; the saddlepoint density is positive by
construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import CoverageError
from .expansion import ApproxCgf, CumulantSet

FLAG_OK = "ok"
FLAG_OUTSIDE = "outside-convex-domain"
FLAG_NOCONV = "solver-failed"

_NORM = stats.norm


def edgeworth_cdf(z, cset: CumulantSet):
    """Edgeworth CDF of the standardized quantity Delta / sigma at z.

    Polynomial correction terms use Hermite-type polynomials in z with the
    squared skewness constant in the n^{-1} term.  Values may fall outside
    [0, 1] far in the tails; they are returned unclipped.
    """
    z = np.asarray(z, dtype=float)
    n = cset.n
    k3, k4 = cset.kappa3, cset.kappa4
    corr = (
        n**-0.5 * k3 / 6.0 * (z**2 - 1.0)
        + 1.0 / n * k4 / 24.0 * (z**3 - 3.0 * z)
        + 1.0 / n * k3**2 / 72.0 * (z**5 - 10.0 * z**3 + 15.0 * z)
    )
    out = _NORM.cdf(z) - _NORM.pdf(z) * corr
    return out if out.ndim else float(out)


def solve_saddlepoint(
    z: float,
    cgf: ApproxCgf,
    nu0: float = 0.0,
    tol: float = 1e-10,
    max_iter: int = 100,
):
    """Solve K'(nu) = z on the convex domain.

    Newton iteration from ``nu0`` with a bisection fallback whenever a step
    leaves the domain; roots are therefore continuous in z through nu(0) = 0.
    Returns (nu, flag).
    """
    z_lo, z_hi = cgf.z_range()
    if not (z_lo < z < z_hi):
        return np.nan, FLAG_OUTSIDE
    scale = max(abs(z), np.sqrt(cgf.c2))
    nu = float(np.clip(nu0, cgf.nu_lo, cgf.nu_hi))
    if not np.isfinite(nu):
        nu = 0.0
    lo, hi = cgf.nu_lo, cgf.nu_hi  # bracketing interval, shrunk as we go
    for _ in range(max_iter):
        resid = cgf.d1(nu) - z
        if abs(resid) < tol * scale:
            return float(nu), FLAG_OK
        if resid < 0:
            lo = max(lo, nu)
        else:
            hi = min(hi, nu)
        step = -resid / cgf.d2(nu)
        cand = nu + step
        if not (lo < cand < hi):
            # bisection fallback on the current bracket
            b_lo = lo if np.isfinite(lo) else nu - max(1.0, abs(nu)) * 2.0
            b_hi = hi if np.isfinite(hi) else nu + max(1.0, abs(nu)) * 2.0
            cand = 0.5 * (b_lo + b_hi)
        nu = cand
    resid = cgf.d1(nu) - z
    if abs(resid) < 1e-6 * scale:
        return float(nu), FLAG_OK
    return float(nu), FLAG_NOCONV


def saddlepoint_density(z: float, cgf: ApproxCgf, nu: float | None = None) -> float:
    """Saddlepoint density of Delta at z; strictly positive on the domain."""
    if nu is None:
        nu, flag = solve_saddlepoint(z, cgf)
        if flag != FLAG_OK:
            return np.nan
    n = cgf.n
    kpp = cgf.d2(nu)
    return float(np.sqrt(n / (2.0 * np.pi * kpp)) * np.exp(n * (cgf.value(nu) - nu * z)))


def _lr_pair(z: float, cgf: ApproxCgf, nu: float):
    """(right tail, left tail) from the Lugannani-Rice pair (r, c) at nu != 0."""
    n = cgf.n
    arg = 2.0 * n * (nu * z - cgf.value(nu))
    r = np.sign(nu) * np.sqrt(max(arg, 0.0))
    c = nu * np.sqrt(n * cgf.d2(nu))
    right = 1.0 - _NORM.cdf(r) + _NORM.pdf(r) * (1.0 / c - 1.0 / r)
    left = _NORM.cdf(r) + _NORM.pdf(r) * (1.0 / r - 1.0 / c)
    return right, left


def _tails(z: float, cgf: ApproxCgf, nu: float | None = None):
    """(right, left, flag); removable nu=0 singularity handled by interpolation."""
    if nu is None:
        nu, flag = solve_saddlepoint(z, cgf)
        if flag != FLAG_OK:
            return np.nan, np.nan, flag
    eps = 1e-4 / np.sqrt(cgf.c2)
    if abs(nu) >= eps:
        right, left = _lr_pair(z, cgf, nu)
        return right, left, FLAG_OK
    # interpolate linearly in z through the two boundary points of the window
    z_m, z_p = float(cgf.d1(-eps)), float(cgf.d1(eps))
    r_m, l_m = _lr_pair(z_m, cgf, -eps)
    r_p, l_p = _lr_pair(z_p, cgf, eps)
    w = (z - z_m) / (z_p - z_m)
    return (1 - w) * r_m + w * r_p, (1 - w) * l_m + w * l_p, FLAG_OK


def tail_area(z: float, cgf: ApproxCgf, nu: float | None = None) -> float:
    """P{Delta > z} by the Lugannani-Rice formula, clamped to [0, 1]."""
    right, _, flag = _tails(z, cgf, nu)
    if flag != FLAG_OK:
        return np.nan
    return float(np.clip(right, 0.0, 1.0))


def left_tail_area(z: float, cgf: ApproxCgf, nu: float | None = None) -> float:
    """P{Delta <= z}; computed from the left Lugannani-Rice branch."""
    _, left, flag = _tails(z, cgf, nu)
    if flag != FLAG_OK:
        return np.nan
    return float(np.clip(left, 0.0, 1.0))


def saddlepoint_cdf(z: float, cgf: ApproxCgf) -> float:
    return left_tail_area(z, cgf)


def saddlepoint_quantile(prob: float, cgf: ApproxCgf, bracket_sd: float = 12.0) -> float:
    """Inverse of the saddlepoint CDF by bisection on the attainable range."""
    from scipy import optimize

    sd = np.sqrt(cgf.sigma_nT2)
    z_lo, z_hi = cgf.z_range()
    lo = max(-bracket_sd * sd, z_lo + 1e-9 * sd if np.isfinite(z_lo) else -bracket_sd * sd)
    hi = min(bracket_sd * sd, z_hi - 1e-9 * sd if np.isfinite(z_hi) else bracket_sd * sd)
    fun = lambda z: left_tail_area(z, cgf) - prob
    flo, fhi = fun(lo), fun(hi)
    if not (flo < 0 < fhi):
        return lo if abs(flo) < abs(fhi) else hi
    return float(optimize.brentq(fun, lo, hi, xtol=1e-12 * max(sd, 1e-12)))


@dataclass
class ApproxResult:
    """Saddlepoint/Edgeworth evaluations on a z-grid for Delta = q - q0."""

    grid: np.ndarray
    nu: np.ndarray
    density: np.ndarray
    density_norm: np.ndarray
    cdf_edgeworth: np.ndarray
    tail: np.ndarray
    flags: list
    norm_const: float
    cset: CumulantSet | None = None
    cgf: ApproxCgf | None = field(default=None, repr=False)

    def ok(self) -> np.ndarray:
        return np.asarray([f == FLAG_OK for f in self.flags])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["z", "nu", "density", "density_norm", "edgeworth_cdf", "tail", "flag"])
            for row in zip(
                self.grid, self.nu, self.density, self.density_norm,
                self.cdf_edgeworth, self.tail, self.flags,
            ):
                writer.writerow(list(row[:-1]) + [row[-1]])


def evaluate_grid(cset: CumulantSet, grid, cgf: ApproxCgf | None = None) -> ApproxResult:
    """Per-point saddlepoint density/tails and Edgeworth CDF on a grid.

    Saddlepoints are warm-started along the (sorted) grid; warm starting only
    changes iteration counts, not the solutions.
    """
    from .expansion import approx_cgf

    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    cgf = cgf or approx_cgf(cset)
    npts = grid.size
    nu = np.full(npts, np.nan)
    dens = np.full(npts, np.nan)
    tail = np.full(npts, np.nan)
    flags = [FLAG_OK] * npts
    warm = 0.0
    for idx, z in enumerate(grid):
        nu_i, flag = solve_saddlepoint(z, cgf, nu0=warm)
        flags[idx] = flag
        if flag != FLAG_OK:
            continue
        warm = nu_i
        nu[idx] = nu_i
        dens[idx] = saddlepoint_density(z, cgf, nu_i)
        tail[idx] = tail_area(z, cgf, nu_i)
    sigma = cset.sigma_nT
    edge = edgeworth_cdf(grid / sigma, cset)
    result = ApproxResult(
        grid=grid,
        nu=nu,
        density=dens,
        density_norm=np.full(npts, np.nan),
        cdf_edgeworth=np.asarray(edge),
        tail=tail,
        flags=flags,
        norm_const=np.nan,
        cset=cset,
        cgf=cgf,
    )
    return result


def normalize_density(result: ApproxResult, coverage_tol: float = 1e-3) -> ApproxResult:
    """Divide the density by its trapezoid integral over the grid.

    Raises :class:`CoverageError` when the grid visibly truncates mass
    (endpoint density above ``coverage_tol`` of the peak).
    """
    ok = result.ok() & np.isfinite(result.density)
    if ok.sum() < 3:
        raise CoverageError("too few valid grid points to normalize")
    z = result.grid[ok]
    p = result.density[ok]
    peak = p.max()
    if p[0] > coverage_tol * peak or p[-1] > coverage_tol * peak:
        span = z[-1] - z[0]
        raise CoverageError(
            "density grid truncates mass; extend the grid",
            suggested_bounds=(z[0] - 0.5 * span, z[-1] + 0.5 * span),
        )
    integral = float(np.trapezoid(p, z))
    result.norm_const = integral
    result.density_norm = result.density / integral
    return result


def default_grid(lo: float, hi: float, npoints: int = 301, pad: float = 0.10) -> np.ndarray:
    """Equispaced grid spanning [lo, hi] expanded by ``pad`` on each side."""
    if hi <= lo:
        raise ValueError("need hi > lo")
    span = hi - lo
    return np.linspace(lo - pad * span, hi + pad * span, npoints)


def density_grid(
    params,
    design,
    X,
    T: int,
    pmap,
    q,
    grid=None,
    mc_size: int = 10_000,
    seed: int = 0,
    cset: CumulantSet | None = None,
    normalize: bool = True,
    pilot=None,
) -> ApproxResult:
    """End-to-end pipeline: cumulants -> CGF -> grid -> density/tails.

    ``grid`` may be explicit; otherwise ``pilot`` must supply (lo, hi) bounds
    (e.g. min/max of a pilot MC of the estimator) which are padded by 10%.
    """
    from .expansion import approx_cgf, cumulants

    if cset is None:
        cset = cumulants(params, design, X, T, pmap, q, mc_size=mc_size, seed=seed)
    cgf = approx_cgf(cset)
    if grid is None:
        if pilot is None:
            raise ValueError("need either an explicit grid or pilot bounds")
        grid = default_grid(pilot[0], pilot[1])
    result = evaluate_grid(cset, grid, cgf)
    if normalize:
        result = normalize_density(result)
    return result
