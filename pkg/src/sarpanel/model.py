"""SARAR(1,1)/SAR(1) panel model: transforms, simulation, likelihood.

Model for t = 1..T:

    Y_t = lambda * W Y_t + X_t beta + c + E_t,      E_t = rho * M E_t + V_t,

with V_t ~ N(0, sigma2 * I_n) i.i.d. across units and periods, c a vector of
unit fixed effects.  Writing S(lambda) = I - lambda*W and R(rho) = I - rho*M,
the fixed effects are removed by subtracting unit-level time means (the
"within" transform, marked with a tilde), and the Gaussian log-likelihood is

    l(theta) = -(m/2) log(2 pi sigma2) + (T-1)[log|S| + log|R|]
               - (1/(2 sigma2)) sum_t Vt~' Vt~,

where Vt~ = R [S Yt~ - Xt~ beta] and m = n(T-1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, SingularityError
from .weights import WeightMatrix

SPATIAL_PARAM_BOUND = 0.99


@dataclass(frozen=True)
class SararParams:
    """Full parameter vector theta = (beta', lambda, rho, sigma2)'."""

    beta: np.ndarray
    lam: float
    rho: float
    sigma2: float

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if beta.ndim != 1:
            raise DimensionError("beta must be a vector")
        if not np.all(np.isfinite(beta)):
            raise DomainError("beta must be finite")
        if not (abs(self.lam) < 1 and abs(self.rho) < 1):
            raise DomainError("lambda and rho must lie in (-1, 1)")
        if not self.sigma2 > 0:
            raise DomainError("sigma2 must be positive")
        object.__setattr__(self, "beta", beta)

    @property
    def k(self) -> int:
        return self.beta.shape[0]

    @property
    def d(self) -> int:
        return self.k + 3

    def to_vector(self) -> np.ndarray:
        """Stack as (beta_1..beta_k, lambda, rho, sigma2)."""
        return np.concatenate([self.beta, [self.lam, self.rho, self.sigma2]])

    @classmethod
    def from_vector(cls, vec, k: int) -> "SararParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (k + 3,):
            raise DimensionError(f"expected vector of length {k + 3}, got {vec.shape}")
        return cls(beta=vec[:k], lam=float(vec[k]), rho=float(vec[k + 1]), sigma2=float(vec[k + 2]))

    def replace(self, **kwargs) -> "SararParams":
        fields = {"beta": self.beta, "lam": self.lam, "rho": self.rho, "sigma2": self.sigma2}
        fields.update(kwargs)
        return SararParams(**fields)


@dataclass(frozen=True)
class ParamMap:
    """Which coordinates of the full (beta, lambda, rho, sigma2) stack are free.

    ``has_rho=False`` pins rho at its value (SAR models); ``has_sigma2=False``
    treats sigma2 as known.  lambda is always free, beta is free iff k > 0.
    """

    k: int
    has_rho: bool = True
    has_sigma2: bool = True

    @property
    def d_full(self) -> int:
        return self.k + 3

    @property
    def i_lam(self) -> int:
        return self.k

    @property
    def i_rho(self) -> int:
        return self.k + 1

    @property
    def i_sigma2(self) -> int:
        return self.k + 2

    @property
    def active(self) -> np.ndarray:
        idx = list(range(self.k)) + [self.i_lam]
        if self.has_rho:
            idx.append(self.i_rho)
        if self.has_sigma2:
            idx.append(self.i_sigma2)
        return np.asarray(idx, dtype=int)

    @property
    def d(self) -> int:
        return self.active.size

    def labels(self):
        names = [f"beta{j + 1}" for j in range(self.k)] + ["lambda", "rho", "sigma2"]
        return [names[i] for i in self.active]


@dataclass(frozen=True)
class PanelData:
    """Balanced panel: Y has shape (T, n), X has shape (T, n, k), k may be 0."""

    Y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.Y, dtype=float)
        x = np.asarray(self.X, dtype=float)
        if y.ndim != 2:
            raise DimensionError("Y must have shape (T, n)")
        if x.ndim != 3 or x.shape[:2] != y.shape:
            raise DimensionError("X must have shape (T, n, k) matching Y")
        if y.shape[0] < 2:
            raise DimensionError("panel needs T >= 2 periods")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("panel entries must be finite")
        object.__setattr__(self, "Y", y)
        object.__setattr__(self, "X", x)

    @property
    def T(self) -> int:
        return self.Y.shape[0]

    @property
    def n(self) -> int:
        return self.Y.shape[1]

    @property
    def k(self) -> int:
        return self.X.shape[2]


@dataclass(frozen=True)
class TransformedPanel:
    """Within-transformed panel (unit time-means removed)."""

    ytil: np.ndarray  # (T, n)
    xtil: np.ndarray  # (T, n, k)

    @property
    def T(self) -> int:
        return self.ytil.shape[0]

    @property
    def n(self) -> int:
        return self.ytil.shape[1]

    @property
    def k(self) -> int:
        return self.xtil.shape[2]

    @property
    def m(self) -> int:
        return self.n * (self.T - 1)


def within_transform(data: PanelData) -> TransformedPanel:
    """Subtract unit-level time means from Y and every column of X."""
    ytil = data.Y - data.Y.mean(axis=0, keepdims=True)
    xtil = data.X - data.X.mean(axis=0, keepdims=True)
    return TransformedPanel(ytil=ytil, xtil=xtil)


def helmert_basis(T: int) -> np.ndarray:
    """Orthonormal (T, T-1) matrix whose columns are orthogonal to the ones vector.

    Column j has entries 1/sqrt(j(j+1)) for the first j rows and -j/sqrt(j(j+1))
    at row j+1.  These are the unit-eigenvalue eigenvectors of the demeaning
    projector I - 11'/T.
    """
    if T < 2:
        raise DimensionError("need T >= 2")
    f = np.zeros((T, T - 1))
    for j in range(1, T):
        scale = 1.0 / np.sqrt(j * (j + 1))
        f[:j, j - 1] = scale
        f[j, j - 1] = -j * scale
    return f


def orthonormal_transform(data: PanelData) -> TransformedPanel:
    """Map the T-period panel to T-1 orthonormal contrasts (Helmert basis).

    The transformed innovations are i.i.d. N(0, sigma2 I); the result is
    stored in a :class:`TransformedPanel` with T-1 "periods".
    """
    f = helmert_basis(data.T)
    # einsum over the time axis: Z*_s = sum_t Z_t f[t, s]
    ystar = np.einsum("tn,ts->sn", data.Y, f)
    xstar = np.einsum("tnk,ts->snk", data.X, f)
    return TransformedPanel(ytil=ystar, xtil=xstar)


class SpatialDesign:
    """Pair of weight matrices plus cached derived operators.

    For each (lambda, rho) the design hands out a :class:`DesignOperators`
    bundle with S, R, their log-determinants, and lazily computed
    G = W S^-1, H = M R^-1, Gdd = R G R^-1.  Log-determinants use the
    precomputed eigenvalues of W and M (sum of log|1 - lambda mu_i|), with a
    sign-tracked LU factorization available as `logdet_lu` for verification.
    Instances are immutable apart from the internal cache and safe to share.
    """

    def __init__(self, W: WeightMatrix, M: WeightMatrix | None = None):
        if M is None:
            M = W
        if W.n != M.n:
            raise DimensionError("W and M must have the same dimension")
        self.W = W
        self.M = M
        self.n = W.n
        self._eig_w = np.linalg.eigvals(W.entries)
        self._eig_m = self._eig_w if M is W else np.linalg.eigvals(M.entries)
        self._cache: dict = {}

    def logdet_s(self, lam: float) -> float:
        return float(np.log(np.abs(1.0 - lam * self._eig_w)).sum().real)

    def logdet_r(self, rho: float) -> float:
        return float(np.log(np.abs(1.0 - rho * self._eig_m)).sum().real)

    def trace_g(self, lam: float) -> float:
        """tr(G(lambda)) = sum_i mu_i / (1 - lambda mu_i) from the eigenvalues of W."""
        return float(np.sum(self._eig_w / (1.0 - lam * self._eig_w)).real)

    def trace_h(self, rho: float) -> float:
        return float(np.sum(self._eig_m / (1.0 - rho * self._eig_m)).real)

    def ops(self, lam: float, rho: float) -> "DesignOperators":
        key = (float(lam), float(rho))
        ops = self._cache.get(key)
        if ops is None:
            ops = DesignOperators(self, float(lam), float(rho))
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = ops
        return ops


def logdet_lu(a: np.ndarray) -> float:
    """Log |det A| via LU with sign tracking; raises on singular A."""
    sign, logdet = np.linalg.slogdet(a)
    if sign == 0 or not np.isfinite(logdet):
        raise SingularityError("matrix is numerically singular")
    return float(logdet)


class DesignOperators:
    """Derived matrices for one (lambda, rho); heavier products are lazy."""

    def __init__(self, design: SpatialDesign, lam: float, rho: float):
        self.design = design
        self.lam = lam
        self.rho = rho
        n = design.n
        self.S = np.eye(n) - lam * design.W.entries
        self.R = np.eye(n) - rho * design.M.entries
        self.logdet_s = design.logdet_s(lam)
        self.logdet_r = design.logdet_r(rho)
        self._g = None
        self._h = None
        self._gdd = None
        self._s_inv = None
        self._r_inv = None

    @property
    def s_inv(self) -> np.ndarray:
        if self._s_inv is None:
            self._s_inv = np.linalg.inv(self.S)
        return self._s_inv

    @property
    def r_inv(self) -> np.ndarray:
        if self._r_inv is None:
            self._r_inv = np.linalg.inv(self.R)
        return self._r_inv

    @property
    def G(self) -> np.ndarray:
        """G = W S^-1."""
        if self._g is None:
            self._g = self.design.W.entries @ self.s_inv
        return self._g

    @property
    def H(self) -> np.ndarray:
        """H = M R^-1."""
        if self._h is None:
            self._h = self.design.M.entries @ self.r_inv
        return self._h

    @property
    def Gdd(self) -> np.ndarray:
        """Gdd = R G R^-1."""
        if self._gdd is None:
            self._gdd = self.R @ self.G @ self.r_inv
        return self._gdd


def simulate(
    params: SararParams,
    design: SpatialDesign,
    X: np.ndarray | None,
    c: np.ndarray | None,
    T: int,
    seed: int,
) -> PanelData:
    """Draw a panel: Y_t = S^-1 (X_t beta + c + R^-1 V_t), V_t ~ N(0, sigma2 I).

    Deterministic for a fixed seed (counter-based Philox generator).
    """
    n = design.n
    if X is None:
        X = np.zeros((T, n, 0))
    X = np.asarray(X, dtype=float)
    if X.shape[:2] != (T, n) or X.shape[2] != params.k:
        raise DimensionError(f"X must have shape ({T}, {n}, {params.k})")
    if c is None:
        c = np.zeros(n)
    c = np.asarray(c, dtype=float)
    ops = design.ops(params.lam, params.rho)
    rng = np.random.Generator(np.random.Philox(key=seed))
    v = np.sqrt(params.sigma2) * rng.standard_normal((T, n))
    e = v @ ops.r_inv.T
    mean = X @ params.beta + c[None, :]
    y = (mean + e) @ ops.s_inv.T
    return PanelData(Y=y, X=X)


def residuals(params: SararParams, design: SpatialDesign, panel: TransformedPanel) -> np.ndarray:
    """Vt~(zeta) = R(rho) [S(lambda) Yt~ - Xt~ beta], shape (T, n)."""
    if panel.k != params.k:
        raise DimensionError(f"panel has k={panel.k} but params have k={params.k}")
    ops = design.ops(params.lam, params.rho)
    u = panel.ytil @ ops.S.T
    if params.k:
        u = u - panel.xtil @ params.beta
    return u @ ops.R.T


def log_likelihood(params: SararParams, design: SpatialDesign, panel: TransformedPanel) -> float:
    """Gaussian log-likelihood of the within-transformed panel."""
    if params.sigma2 <= 0:
        raise DomainError("sigma2 must be positive")
    ops = design.ops(params.lam, params.rho)
    if not (np.isfinite(ops.logdet_s) and np.isfinite(ops.logdet_r)):
        raise SingularityError("S(lambda) or R(rho) is singular")
    vt = residuals(params, design, panel)
    m = panel.m
    rss = float(np.sum(vt * vt))
    return (
        -0.5 * m * np.log(2.0 * np.pi * params.sigma2)
        + (panel.T - 1) * (ops.logdet_s + ops.logdet_r)
        - 0.5 * rss / params.sigma2
    )
