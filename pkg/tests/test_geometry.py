import math

import numpy as np
import pytest
from shapely.geometry import Polygon as ShapelyPolygon

from cutflux.geometry import (
    Feature,
    Polygon,
    clip_triangle,
    feature_segments_in_triangle,
    features_overlap,
    make_feature,
    point_in_polygon,
    polygon_area,
    regular_polygon,
    segment_triangle_interval,
)

UNIT_SQUARE = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])


def random_feature(rng, fid=1, status="included"):
    center = rng.uniform(0.25, 0.75, size=2)
    radius = rng.uniform(0.02, 0.2)
    n = rng.integers(3, 17)
    theta = rng.uniform(0, 360)
    return make_feature(fid, regular_polygon(center, radius, int(n), theta),
                        domain=(0, 0, 1, 1), status=status)


class TestRegularPolygon:
    def test_square_vertices(self):
        poly = regular_polygon((0, 0), 1.0, 4, 0.0)
        expected = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]], float)
        assert np.allclose(poly.vertices, expected, atol=1e-15)

    def test_reference_vertex_on_positive_axis(self):
        poly = regular_polygon((0.2, 0.2), 0.04, 20, 0.0)
        assert np.allclose(poly.vertices[0], [0.24, 0.2])

    def test_rotation_in_degrees(self):
        poly = regular_polygon((0, 0), 1.0, 4, 90.0)
        assert np.allclose(poly.vertices[0], [0, 1], atol=1e-15)

    def test_closed_form_area(self):
        # shoelace against (1/2) n r^2 sin(2 pi / n)
        poly = regular_polygon((0.2, 0.2), 0.04, 20, 0.0)
        exact = 0.5 * 20 * 0.04 ** 2 * math.sin(2 * math.pi / 20)
        assert polygon_area(poly) == pytest.approx(exact, rel=1e-14)
        assert exact == pytest.approx(4.9443e-3, rel=1e-4)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            regular_polygon((0, 0), 1.0, 2, 0.0)
        with pytest.raises(ValueError):
            regular_polygon((0, 0), -1.0, 5, 0.0)


class TestPolygonArea:
    def test_unit_square(self):
        assert polygon_area(UNIT_SQUARE) == pytest.approx(1.0)

    def test_triangle(self):
        assert polygon_area([(0, 0), (1, 0), (0, 1)]) == pytest.approx(0.5)

    def test_clockwise_rejected(self):
        with pytest.raises(ValueError):
            polygon_area([(0, 0), (0, 1), (1, 0)])


class TestPointInPolygon:
    def test_center_inside(self):
        assert point_in_polygon((0.5, 0.5), UNIT_SQUARE) == "inside"

    def test_vertex_on_boundary(self):
        assert point_in_polygon((0, 0), UNIT_SQUARE) == "boundary"

    def test_far_point_outside(self):
        assert point_in_polygon((2, 2), UNIT_SQUARE) == "outside"

    def test_random_points_against_shapely(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            poly = regular_polygon(rng.uniform(0, 1, 2), rng.uniform(0.05, 0.3),
                                   int(rng.integers(3, 12)), rng.uniform(0, 360))
            sh = ShapelyPolygon(poly.vertices)
            for _ in range(20):
                p = rng.uniform(-0.2, 1.2, 2)
                got = point_in_polygon(p, poly)
                if got == "boundary":
                    continue
                assert (got == "inside") == sh.contains(
                    ShapelyPolygon([(p[0], p[1])] * 3).centroid)


class TestClipTriangle:
    def test_disjoint_triangle_untouched(self):
        tri = [(0.8, 0.8), (0.9, 0.8), (0.8, 0.9)]
        feat = make_feature(1, regular_polygon((0.2, 0.2), 0.05, 8), status="included")
        pieces = clip_triangle(tri, [feat])
        assert len(pieces) == 1
        assert pieces[0].area == pytest.approx(0.005, rel=1e-12)

    def test_triangle_inside_feature_vanishes(self):
        tri = [(0.19, 0.19), (0.21, 0.19), (0.2, 0.21)]
        feat = make_feature(1, regular_polygon((0.2, 0.2), 0.05, 16), status="included")
        assert clip_triangle(tri, [feat]) == []

    def test_monte_carlo_overlap_area(self):
        tri = np.array([(0, 0), (1, 0), (0, 1)], float)
        feat = make_feature(1, Polygon([(0, 0), (0.5, 0), (0.5, 0.5), (0, 0.5)]),
                            status="included")
        pieces = clip_triangle(tri, [feat])
        got = sum(p.area for p in pieces)
        rng = np.random.default_rng(42)
        n = 400_000
        pts = rng.uniform(0, 1, size=(n, 2))
        in_tri = pts.sum(axis=1) <= 1.0
        in_feat = (pts[:, 0] <= 0.5) & (pts[:, 1] <= 0.5)
        overlap = 1.0 * np.count_nonzero(in_tri & in_feat) / n
        assert got == pytest.approx(0.5 - overlap, abs=1e-3)

    def test_degenerate_triangle_rejected(self):
        with pytest.raises(ValueError):
            clip_triangle([(0, 0), (1, 0), (2, 0)], [])

    def test_area_identity_against_shapely(self):
        # acceptance: 1000 random triangle/feature pairs, 1e-12 relative
        rng = np.random.default_rng(2024)
        for k in range(1000):
            a = rng.uniform(0, 1, 2)
            tri = np.array([a, a + rng.uniform(0.05, 0.5, 2) * [1, 0],
                            a + rng.uniform(0.05, 0.5, 2) * [0, 1]])
            feat = random_feature(rng)
            pieces = clip_triangle(tri, [feat])
            got = sum(p.area for p in pieces)
            sh_tri = ShapelyPolygon(tri)
            overlap = sh_tri.intersection(ShapelyPolygon(feat.shape.vertices)).area
            assert got == pytest.approx(sh_tri.area - overlap, rel=1e-12, abs=1e-13), \
                f"pair {k}"

    def test_pieces_counter_clockwise(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            tri = np.array([(0, 0), (1, 0), (0, 1)], float) + rng.uniform(-0.1, 0.1, (3, 2))
            feat = random_feature(rng)
            for p in clip_triangle(tri, [feat]):
                assert p.area > 0.0


class TestFeatureSegments:
    def test_disjoint_triangle_empty(self):
        feat = make_feature(1, regular_polygon((0.2, 0.2), 0.05, 8), status="included")
        assert feature_segments_in_triangle([(0.8, 0.8), (0.9, 0.8), (0.8, 0.9)], feat) == []

    def test_edge_inside_triangle_unchanged(self):
        feat = make_feature(1, regular_polygon((0.5, 0.5), 0.05, 4), status="included")
        tri = [(0, 0), (1, 0), (0.5, 1.5)]
        segs = feature_segments_in_triangle(tri, feat)
        assert len(segs) == 4
        total = sum(s.length for s in segs)
        assert total == pytest.approx(feat.boundary_length, rel=1e-13)

    def test_partial_crossing_length(self):
        # feature edge from (0.4,0.5) against a triangle cutting it midway
        feat = make_feature(1, regular_polygon((0.5, 0.5), 0.1, 4, 0.0), status="included")
        tri = [(0.5, 0.0), (1.2, 0.0), (0.5, 1.2)]
        segs = feature_segments_in_triangle(tri, feat)
        # solve the crossing parameters directly from the two cut edges
        expected = 0.0
        for a, b in feat.shape.edges():
            iv = segment_triangle_interval(a, b, tri)
            if iv is not None:
                expected += (iv[1] - iv[0]) * np.hypot(*(b - a))
        got = sum(s.length for s in segs)
        assert got == pytest.approx(expected, rel=1e-13)
        assert 0.0 < got < feat.boundary_length

    def test_normals_point_into_feature(self):
        feat = make_feature(1, regular_polygon((0.5, 0.5), 0.1, 8), status="included")
        for seg in feat.gamma_tilde:
            assert np.hypot(*seg.outward_normal) == pytest.approx(1.0, rel=1e-14)
            probe = seg.midpoint + 1e-6 * seg.outward_normal
            assert point_in_polygon(probe, feat.shape) == "inside"

    def test_segment_cover_identity(self):
        # acceptance: random mesh-like triangle covers conserve total length
        rng = np.random.default_rng(11)
        for _ in range(50):
            feat = random_feature(rng)
            n = int(rng.integers(3, 9))
            xs = np.linspace(0, 1, n + 1)
            total = 0.0
            for i in range(n):
                for j in range(n):
                    for tri in (
                        [(xs[i], xs[j]), (xs[i + 1], xs[j]), (xs[i + 1], xs[j + 1])],
                        [(xs[i], xs[j]), (xs[i + 1], xs[j + 1]), (xs[i], xs[j + 1])],
                    ):
                        total += sum(s.length for s in
                                     feature_segments_in_triangle(tri, feat))
            assert total == pytest.approx(feat.boundary_length, rel=1e-12)


class TestFeatureConstruction:
    def test_boundary_feature_gets_lid(self):
        # theta = 0 puts vertices of the 8-gon exactly on the x = 0 side, so
        # the lid is the full vertical diameter
        poly = regular_polygon((0.0, 0.5), 0.1, 8, 0.0)
        feat = make_feature(3, poly, domain=(0, 0, 1, 1))
        assert feat.gamma_zero, "lid segments expected for a boundary feature"
        assert feat.gamma_tilde
        lid = sum(s.length for s in feat.gamma_zero)
        assert lid == pytest.approx(0.2, rel=1e-9)
        half_area = 0.5 * 0.5 * 8 * 0.1 ** 2 * math.sin(2 * math.pi / 8)
        assert feat.shape.area == pytest.approx(half_area, rel=1e-9)

    def test_internal_feature_has_no_lid(self):
        feat = make_feature(1, regular_polygon((0.5, 0.5), 0.1, 6), domain=(0, 0, 1, 1))
        assert feat.gamma_zero == ()

    def test_status_transitions(self):
        feat = make_feature(1, regular_polygon((0.5, 0.5), 0.1, 6))
        assert not feat.included
        assert feat.with_status("included").included
        with pytest.raises(ValueError):
            feat.with_status("gone")

    def test_overlap_detection(self):
        f1 = make_feature(1, regular_polygon((0.5, 0.5), 0.1, 8))
        f2 = make_feature(2, regular_polygon((0.55, 0.5), 0.1, 8))
        f3 = make_feature(3, regular_polygon((0.8, 0.8), 0.05, 8))
        assert features_overlap(f1, f2)
        assert not features_overlap(f1, f3)
