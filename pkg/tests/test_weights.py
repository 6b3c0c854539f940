"""Weight-matrix construction, normalization, and diagnostics."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from sarpanel import weights
from sarpanel.errors import DegenerateDistanceError, DimensionError


class TestRook:
    def test_two_node_line(self):
        w = weights.row_normalize(weights.build_rook(1, 2))
        assert_allclose(w.entries, [[0, 1], [1, 0]])

    def test_rook_4x6_normalized_entries(self):
        # lattice of the n=24 experiments: distinct nonzero weights 1/2, 1/3, 1/4
        w = weights.row_normalize(weights.build_rook(4, 6))
        vals = np.unique(np.round(w.entries[w.entries > 0], 12))
        assert_allclose(sorted(vals), [0.25, 1 / 3, 0.5])

    def test_3x3_neighbor_counts(self):
        w = weights.build_rook(3, 3)
        counts = (w.entries > 0).sum(axis=1)
        # corners 2, edges 3, center 4 on a 3x3 lattice
        assert sorted(counts) == [2, 2, 2, 2, 3, 3, 3, 3, 4]

    def test_invalid_dimension(self):
        with pytest.raises(DimensionError):
            weights.build_rook(1, 1)


class TestQueen:
    def test_torus_uniform_eighth(self):
        w = weights.row_normalize(weights.build_queen(4, 6, torus=True))
        nz = w.entries[w.entries > 0]
        assert_allclose(nz, 1 / 8)
        assert_allclose(w.entries, w.entries.T)

    def test_torus_w2_constant_diagonal(self):
        w = weights.row_normalize(weights.build_queen(4, 6, torus=True))
        diag = np.diag(w.entries @ w.entries)
        assert diag.max() - diag.min() < 1e-14

    def test_2x2_all_adjacent(self):
        w = weights.row_normalize(weights.build_queen(2, 2))
        expect = (np.ones((4, 4)) - np.eye(4)) / 3
        assert_allclose(w.entries, expect)

    def test_rook_subset_of_queen(self):
        rook = weights.build_rook(4, 6).entries > 0
        queen = weights.build_queen(4, 6).entries > 0
        assert np.all(queen[rook])


class TestInverseDistance:
    def test_antipodal_pair(self):
        w = weights.build_inverse_distance([(90.0, 0.0), (-90.0, 0.0)])
        expect = 1.0 / (np.pi * weights.EARTH_RADIUS_KM)
        assert_allclose(w.entries[0, 1], expect)
        assert_allclose(w.entries[1, 0], expect)

    def test_equidistant_triangle(self):
        # three points on the equator, 120 degrees apart
        coords = [(0.0, 0.0), (0.0, 120.0), (0.0, -120.0)]
        raw = weights.build_inverse_distance(coords)
        off = raw.entries[~np.eye(3, dtype=bool)]
        assert_allclose(off, off[0])
        norm = weights.row_normalize(raw)
        assert_allclose(norm.entries[~np.eye(3, dtype=bool)], 0.5)

    def test_duplicate_coordinates_rejected(self):
        with pytest.raises(DegenerateDistanceError):
            weights.build_inverse_distance([(10.0, 20.0), (10.0, 20.0)])

    def test_symmetric_raw_row_stochastic_normalized(self):
        rng = np.random.Generator(np.random.Philox(key=13))
        coords = np.column_stack(
            [rng.uniform(-60, 60, size=24), rng.uniform(-180, 180, size=24)]
        )
        raw = weights.build_inverse_distance(coords)
        assert_allclose(raw.entries, raw.entries.T)
        norm = weights.row_normalize(raw)
        assert_allclose(norm.entries.sum(axis=1), 1.0, atol=1e-12)


class TestKnn:
    def test_seven_neighbors_each(self):
        rng = np.random.Generator(np.random.Philox(key=14))
        coords = np.column_stack(
            [rng.uniform(-60, 60, size=24), rng.uniform(-180, 180, size=24)]
        )
        w = weights.row_normalize(weights.build_knn(coords, 7))
        assert np.all((w.entries > 0).sum(axis=1) == 7)
        assert_allclose(w.entries[w.entries > 0], 1 / 7)

    def test_complete_graph_when_k_is_n_minus_1(self):
        coords = [(0.0, 0.0), (0.0, 10.0), (10.0, 0.0), (5.0, 5.0)]
        w = weights.row_normalize(weights.build_knn(coords, 3))
        assert_allclose(w.entries, (np.ones((4, 4)) - np.eye(4)) / 3)

    def test_tie_break_by_smaller_index(self):
        # middle point of a symmetric line: both ends equidistant -> index 0 wins
        coords = [(0.0, -10.0), (0.0, 0.0), (0.0, 10.0)]
        w = weights.build_knn(coords, 1)
        assert w.entries[1, 0] == 1.0
        assert w.entries[1, 2] == 0.0

    def test_invalid_k(self):
        with pytest.raises(DimensionError):
            weights.build_knn([(0.0, 0.0), (1.0, 1.0)], 2)


class TestRowNormalize:
    def test_zero_matrix_flagged(self):
        raw = weights.WeightMatrix(np.zeros((3, 3)))
        with pytest.warns(UserWarning):
            norm = weights.row_normalize(raw)
        assert norm.zero_rows == (0, 1, 2)
        assert_allclose(norm.entries, 0.0)

    def test_simple_row(self):
        raw = weights.WeightMatrix(np.array([[0.0, 2.0, 2.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]))
        norm = weights.row_normalize(raw)
        assert_allclose(norm.entries[0], [0, 0.5, 0.5])


class TestDiagHomogeneity:
    def test_rook_n24_paper_values(self):
        w = weights.row_normalize(weights.build_rook(4, 6))
        rep = weights.diag_homogeneity_report(w, max_power=4)
        diag2 = np.unique(np.round(rep.power_diagonals[2], 2))
        assert_allclose(sorted(diag2), [0.27, 0.29, 0.31, 0.33, 0.36])
        assert_allclose(rep.power_diagonals[3], 0.0, atol=1e-14)
        assert rep.benchmark == pytest.approx(1 / 24)

    def test_rook_n24_pair_product_spreads(self):
        w = weights.row_normalize(weights.build_rook(4, 6))
        rep = weights.diag_homogeneity_report(w, max_power=4)
        # independent oracle: elementwise loop for diag(W^2 (W^2)')
        mat = np.linalg.matrix_power(w.entries, 2)
        diag = np.array([mat[i] @ mat[i] for i in range(24)])
        assert rep.pair_spread[(2, 2)] == pytest.approx(diag.max() - diag.min())
        assert all(v >= 0 for v in rep.pair_spread.values())
        assert_allclose(sorted(np.unique(np.round(diag, 2))), [0.16, 0.18, 0.20, 0.25, 0.28])

    def test_queen_n24_max_spread(self):
        w = weights.row_normalize(weights.build_queen(4, 6))
        rep = weights.diag_homogeneity_report(w, max_power=2)
        assert round(rep.power_spread[2], 3) == 0.044

    def test_queen_torus_spreads_vanish(self):
        w = weights.row_normalize(weights.build_queen(4, 6, torus=True))
        rep = weights.diag_homogeneity_report(w, max_power=6)
        assert rep.max_spread() < 1e-12


class TestInvariants:
    @pytest.mark.parametrize(
        "build",
        [
            lambda: weights.build_rook(4, 6),
            lambda: weights.build_queen(4, 6),
            lambda: weights.build_queen(4, 6, torus=True),
        ],
    )
    def test_row_sums_and_spectral_radius(self, build):
        w = weights.row_normalize(build())
        assert_allclose(w.entries.sum(axis=1), 1.0, atol=1e-12)
        assert weights.spectral_radius(w) <= 1.0 + 1e-8

    def test_knn_spectral_radius(self):
        rng = np.random.Generator(np.random.Philox(key=15))
        coords = np.column_stack(
            [rng.uniform(-60, 60, size=20), rng.uniform(-180, 180, size=20)]
        )
        w = weights.row_normalize(weights.build_knn(coords, 5))
        assert weights.spectral_radius(w) <= 1.0 + 1e-8


class TestCsvRoundTrip:
    def test_weight_matrix_round_trip(self, tmp_path):
        w = weights.row_normalize(weights.build_rook(3, 4))
        path = tmp_path / "w.csv"
        w.to_csv(path)
        back = weights.WeightMatrix.from_csv(path)
        assert back.kind == w.kind
        assert back.row_normalized
        assert_allclose(back.entries, w.entries)

    def test_coordinates_csv(self, tmp_path):
        path = tmp_path / "coords.csv"
        path.write_text("name,lat,lon\nA,10.0,20.0\nB,-5.0,30.0\n")
        names, coords = weights.load_coordinates(path)
        assert names == ["A", "B"]
        assert_allclose(coords, [[10.0, 20.0], [-5.0, 30.0]])
