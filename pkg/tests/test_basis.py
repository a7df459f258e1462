"""Bisquare basis functions and the sparse basis matrix."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from smefrk.basis import BasisSpec, bandwidth, bisquare, build_basis_matrix, dump_coo
from smefrk.geometry import KnotLayout, Metric, pairwise_distance, place_knots


def dense_oracle(locs, layout, metric, b):
    """Brute force: every location against every knot."""
    D = pairwise_distance(locs, layout.knots, metric)
    S = np.zeros_like(D)
    for level in layout.levels:
        cols = layout.res == level
        pts = layout.knots[cols]
        K = pairwise_distance(pts, pts, metric)
        K[np.diag_indices_from(K)] = np.inf
        r = b * K.min()
        u = D[:, cols] / r
        S[:, cols] = np.where(u <= 1, (1 - u ** 2) ** 2, 0.0)
    return S


class TestBisquare:
    def test_values(self):
        np.testing.assert_allclose(bisquare([0.0, 0.5, 1.0, 1.5]),
                                   [1.0, 0.5625, 0.0, 0.0])

    @given(st.floats(0, 10, allow_nan=False))
    def test_range(self, d):
        v = float(bisquare(d))
        assert 0.0 <= v <= 1.0
        if d >= 1:
            assert v == 0.0

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            bisquare(-0.1)


class TestBandwidth:
    def test_scales_min_distance(self):
        lay = place_knots((1, 256), [5], discrete=True)
        assert bandwidth(lay, 1, 1.5) == pytest.approx(96.0)

    def test_nonpositive_b(self):
        lay = place_knots((0, 1), [3])
        with pytest.raises(ValueError):
            bandwidth(lay, 1, 0.0)
        with pytest.raises(ValueError):
            BasisSpec(lay).radii(-1.0)

    def test_radii_per_knot(self):
        lay = place_knots((0, 12), [3, 5])
        r = BasisSpec(lay).radii(2.0)
        np.testing.assert_allclose(r, [12.0] * 3 + [6.0] * 5)


class TestBasisMatrix:
    @pytest.mark.parametrize("b", [0.3, 1.0, 1.5, 3.7])
    def test_euclidean_1d_matches_oracle(self, rng, b):
        lay = place_knots((0, 50), [4, 9])
        locs = rng.uniform(-5, 55, 200)
        S = build_basis_matrix(locs, BasisSpec(lay), b)
        np.testing.assert_allclose(S.toarray(), dense_oracle(locs, lay, Metric(), b),
                                   rtol=1e-13, atol=1e-15)

    def test_euclidean_2d_matches_oracle(self, rng):
        lay = place_knots(((0, 1), (0, 1)), [9, 30], "regular_triangular_2d")
        locs = rng.uniform(size=(300, 2))
        S = build_basis_matrix(locs, BasisSpec(lay), 1.2).toarray()
        np.testing.assert_allclose(S, dense_oracle(locs, lay, Metric(), 1.2),
                                   rtol=1e-13, atol=1e-15)

    @pytest.mark.parametrize("b", [0.8, 1.5, 40.0])
    def test_great_circle_matches_oracle(self, rng, b):
        m = Metric("great_circle", 6371.0)
        knots = np.column_stack([rng.uniform(-180, 180, 12), rng.uniform(-80, 80, 12)])
        lay = KnotLayout(knots, [1] * 6 + [2] * 6)
        locs = np.column_stack([rng.uniform(-180, 180, 400), rng.uniform(-90, 90, 400)])
        locs[:5] = [[179.9, 0], [-179.9, 0], [0, 90], [0, -90], [45, 89.99]]
        S = build_basis_matrix(locs, BasisSpec(lay, m), b).toarray()
        np.testing.assert_allclose(S, dense_oracle(locs, lay, m, b),
                                   rtol=1e-10, atol=1e-14)

    def test_entries_and_support(self, rng):
        lay = place_knots((0, 10), [6])
        spec = BasisSpec(lay)
        locs = rng.uniform(0, 10, 500)
        S = build_basis_matrix(locs, spec, 1.0)
        assert S.shape == (500, 6)
        assert np.all((S.data > 0) & (S.data <= 1))
        D = pairwise_distance(locs, lay.knots)
        assert np.all(S.toarray()[D > spec.radii(1.0)[None, :]] == 0)

    def test_one_at_knot(self):
        lay = place_knots((0, 4), [5])
        S = build_basis_matrix(lay.knots, BasisSpec(lay), 1.0).toarray()
        np.testing.assert_allclose(S, np.eye(5), atol=0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="1-D"):
            build_basis_matrix(np.zeros((3, 2)), BasisSpec(place_knots((0, 1), [3])), 1.0)

    def test_dump_coo(self, tmp_path):
        lay = place_knots((0, 4), [5])
        S = build_basis_matrix([0.5, 2.0], BasisSpec(lay), 1.0)
        path = tmp_path / "S.csv"
        dump_coo(S, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "row,col,value"
        assert len(lines) == S.nnz + 1
        r, c, v = lines[1].split(",")
        assert S[int(r), int(c)] == float(v)
