"""Spatial weight matrices: construction, normalization, diagnostics.

Supported constructions: Rook and Queen lattice contiguity (with optional
torus wrap for Queen), great-circle inverse distance, and k-nearest
neighbors.  All constructors return raw (un-normalized) matrices; apply
:func:`row_normalize` to obtain row-stochastic weights.

The diagonal-homogeneity report quantifies how far the diagonals of powers
W^k (and of mixed products W^{k1} (W^{k2})') are from being constant, which
is the numeric diagnostic for the unit-level information homogeneity the
higher-order theory requires.
"""

from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDistanceError, DimensionError, IngestionError

EARTH_RADIUS_KM = 6371.0


class WeightKind(enum.Enum):
    ROOK = "rook"
    QUEEN = "queen"
    QUEEN_TORUS = "queen_torus"
    INVERSE_DISTANCE = "inverse_distance"
    KNEAREST = "knearest"
    CUSTOM = "custom"


@dataclass(frozen=True)
class WeightMatrix:
    """Dense n-by-n spatial weight matrix with zero diagonal.

    Attributes
    ----------
    entries : ndarray
        Dense (n, n) array of nonnegative weights, zero on the diagonal.
    kind : WeightKind
        How the matrix was built.
    row_normalized : bool
        True when each row with at least one neighbor sums to one.
    zero_rows : tuple of int
        Indices of all-zero rows left untouched by normalization.
    """

    entries: np.ndarray
    kind: WeightKind = WeightKind.CUSTOM
    row_normalized: bool = False
    zero_rows: tuple = field(default=())

    def __post_init__(self):
        w = np.asarray(self.entries, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DimensionError(f"weight matrix must be square, got {w.shape}")
        if w.shape[0] < 2:
            raise DimensionError("weight matrix needs at least 2 units")
        if not np.all(np.isfinite(w)):
            raise ValueError("weight matrix entries must be finite")
        if np.any(w < 0):
            raise ValueError("weight matrix entries must be nonnegative")
        if np.any(np.abs(np.diag(w)) > 0):
            raise ValueError("weight matrix diagonal must be exactly zero")
        if self.row_normalized:
            sums = w.sum(axis=1)
            live = sums > 0
            if not np.allclose(sums[live], 1.0, atol=1e-12):
                raise ValueError("row_normalized matrix has rows not summing to 1")
        object.__setattr__(self, "entries", w)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def to_csv(self, path) -> None:
        """Write as CSV: header ``n,kind,row_normalized``, then dense rows."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([self.n, self.kind.value, int(self.row_normalized)])
            for row in self.entries:
                writer.writerow([repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path) -> "WeightMatrix":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                n_str, kind_str, norm_str = next(reader)
                n = int(n_str)
                kind = WeightKind(kind_str)
                normalized = bool(int(norm_str))
                rows = [[float(x) for x in row] for row in reader]
            except (StopIteration, ValueError) as exc:
                raise IngestionError(f"malformed weight-matrix CSV {path}: {exc}") from exc
        w = np.asarray(rows, dtype=float)
        if w.shape != (n, n):
            raise IngestionError(
                f"weight-matrix CSV {path}: header says n={n} but body is {w.shape}"
            )
        zero_rows = tuple(np.flatnonzero(w.sum(axis=1) == 0)) if normalized else ()
        return cls(w, kind=kind, row_normalized=normalized, zero_rows=zero_rows)


def _lattice_checks(rows: int, cols: int) -> None:
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise DimensionError(f"lattice {rows}x{cols} must contain at least 2 units")


def build_rook(rows: int, cols: int) -> WeightMatrix:
    """Binary edge-contiguity matrix on a rows-by-cols lattice (row-major order)."""
    _lattice_checks(rows, cols)
    n = rows * cols
    w = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if r + 1 < rows:
                j = (r + 1) * cols + c
                w[i, j] = w[j, i] = 1.0
            if c + 1 < cols:
                j = r * cols + (c + 1)
                w[i, j] = w[j, i] = 1.0
    return WeightMatrix(w, kind=WeightKind.ROOK)


def build_queen(rows: int, cols: int, torus: bool = False) -> WeightMatrix:
    """Binary edge-or-vertex contiguity, optionally wrapping both lattice axes.

    On a torus every unit has exactly 8 neighbors (requires rows, cols >= 3
    for the 8 wrapped offsets to be distinct).
    """
    _lattice_checks(rows, cols)
    if torus and (rows < 3 or cols < 3):
        raise DimensionError("queen torus needs rows >= 3 and cols >= 3")
    n = rows * cols
    w = np.zeros((n, n))
    offsets = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            for dr, dc in offsets:
                rr, cc = r + dr, c + dc
                if torus:
                    rr %= rows
                    cc %= cols
                elif not (0 <= rr < rows and 0 <= cc < cols):
                    continue
                j = rr * cols + cc
                if j != i:
                    w[i, j] = 1.0
    kind = WeightKind.QUEEN_TORUS if torus else WeightKind.QUEEN
    return WeightMatrix(w, kind=kind)


def arc_distances(coords) -> np.ndarray:
    """Pairwise great-circle distances (km) via the spherical law of cosines.

    ``coords`` holds (lat, lon) pairs in decimal degrees.
    """
    pts = np.asarray(coords, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionError("coords must be a sequence of (lat, lon) pairs")
    lat = np.radians(pts[:, 0])[:, None]
    lon = np.radians(pts[:, 1])[:, None]
    cosang = np.sin(lat) * np.sin(lat.T) + np.cos(lat) * np.cos(lat.T) * np.cos(lon - lon.T)
    d = EARTH_RADIUS_KM * np.arccos(np.clip(cosang, -1.0, 1.0))
    np.fill_diagonal(d, 0.0)
    return d


def build_inverse_distance(coords) -> WeightMatrix:
    """Raw weights 1/d_ij with d_ij the great-circle distance between units."""
    d = arc_distances(coords)
    n = d.shape[0]
    if n < 2:
        raise DimensionError("need at least 2 coordinates")
    off = ~np.eye(n, dtype=bool)
    # spherical law of cosines resolves ~1e-4 km at double precision; anything
    # below one meter is treated as a duplicate point
    if np.any(d[off] <= 1e-3):
        raise DegenerateDistanceError("duplicate coordinates give zero distance")
    w = np.zeros_like(d)
    w[off] = 1.0 / d[off]
    return WeightMatrix(w, kind=WeightKind.INVERSE_DISTANCE)


def build_knn(coords, k: int) -> WeightMatrix:
    """Binary k-nearest-neighbor weights by arc distance.

    Ties in distance are broken by the smaller unit index, so the matrix is
    deterministic.  Not symmetric in general.
    """
    d = arc_distances(coords)
    n = d.shape[0]
    if not 1 <= k < n:
        raise DimensionError(f"k must satisfy 1 <= k < n, got k={k}, n={n}")
    w = np.zeros_like(d)
    idx = np.arange(n)
    for i in range(n):
        cand = idx[idx != i]
        # lexsort: primary key distance, secondary key unit index
        order = cand[np.lexsort((cand, d[i, cand]))]
        w[i, order[:k]] = 1.0
    return WeightMatrix(w, kind=WeightKind.KNEAREST)


def row_normalize(raw: WeightMatrix) -> WeightMatrix:
    """Divide each row by its sum; all-zero rows are kept and flagged."""
    w = raw.entries.copy()
    sums = w.sum(axis=1)
    zero = sums == 0
    if np.any(zero):
        warnings.warn(
            f"{int(zero.sum())} all-zero row(s) left unnormalized", stacklevel=2
        )
    live = ~zero
    w[live] /= sums[live, None]
    return WeightMatrix(
        w, kind=raw.kind, row_normalized=True, zero_rows=tuple(np.flatnonzero(zero))
    )


def load_coordinates(path):
    """Read a ``name,lat,lon`` CSV; returns (names, coords array)."""
    names, coords = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:3]] != ["name", "lat", "lon"]:
            raise IngestionError(f"{path}: expected header 'name,lat,lon'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                names.append(row[0])
                coords.append((float(row[1]), float(row[2])))
            except (IndexError, ValueError) as exc:
                raise IngestionError(f"{path}:{lineno}: bad coordinate row {row}") from exc
    if len(names) < 2:
        raise IngestionError(f"{path}: need at least 2 coordinate rows")
    return names, np.asarray(coords)


@dataclass(frozen=True)
class DiagHomogeneityReport:
    """Maximum spread among diagonal entries of powers of W.

    ``power_spread[k]`` is max_i,j |(W^k)_ii - (W^k)_jj| for k = 2..max_power;
    ``pair_spread[(k1, k2)]`` is the same for W^{k1} (W^{k2})'.  ``benchmark``
    is 1/n, the order the homogeneity condition demands.
    """

    n: int
    benchmark: float
    power_spread: dict
    pair_spread: dict
    power_diagonals: dict

    def max_spread(self) -> float:
        return max(
            max(self.power_spread.values()), max(self.pair_spread.values())
        )


def diag_homogeneity_report(w: WeightMatrix, max_power: int = 4) -> DiagHomogeneityReport:
    """Diagonal spread of W^k and W^{k1}(W^{k2})' for the homogeneity check."""
    if max_power < 2:
        raise ValueError("max_power must be >= 2")
    if not w.row_normalized:
        raise ValueError("diagnostic expects a row-normalized matrix")
    mat = w.entries
    n = w.n
    powers = {1: mat}
    for k in range(2, max_power + 1):
        powers[k] = powers[k - 1] @ mat

    def spread(m):
        d = np.diag(m)
        return float(d.max() - d.min())

    power_spread = {k: spread(powers[k]) for k in range(2, max_power + 1)}
    power_diagonals = {k: np.diag(powers[k]).copy() for k in range(2, max_power + 1)}
    half = max(1, max_power // 2)
    pair_spread = {
        (k1, k2): spread(powers[k1] @ powers[k2].T)
        for k1 in range(1, half + 1)
        for k2 in range(1, half + 1)
    }
    return DiagHomogeneityReport(
        n=n,
        benchmark=1.0 / n,
        power_spread=power_spread,
        pair_spread=pair_spread,
        power_diagonals=power_diagonals,
    )


def spectral_radius(w: WeightMatrix, tol: float = 1e-10, max_iter: int = 10000) -> float:
    """Spectral radius via power iteration.

    Starting from a strictly positive vector, iteration on a nonnegative
    matrix converges to its Perron root, which is the spectral radius.
    """
    mat = w.entries
    x = np.full(w.n, 1.0 / np.sqrt(w.n))
    lam = 0.0
    for _ in range(max_iter):
        y = mat @ x
        norm = np.linalg.norm(y)
        if norm == 0:
            return 0.0
        x_new = y / norm
        if abs(norm - lam) < tol * max(1.0, norm):
            return float(norm)
        x, lam = x_new, norm
    return float(lam)
