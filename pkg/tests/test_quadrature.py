import math

import numpy as np
import pytest

from cutflux.geometry import Polygon, clip_triangle, make_feature, regular_polygon
from cutflux.quadrature import QuadratureRule, cut_rule, segment_rule, triangle_rule

REF_TRI = np.array([(0, 0), (1, 0), (0, 1)], float)


def exact_moment(m, n):
    # int over the reference triangle of x^m y^n = m! n! / (m + n + 2)!
    return math.factorial(m) * math.factorial(n) / math.factorial(m + n + 2)


class TestTriangleRule:
    def test_constant(self):
        rule = triangle_rule(REF_TRI, 1)
        assert rule.measure == pytest.approx(0.5, rel=1e-15)

    def test_linear_moment(self):
        rule = triangle_rule(REF_TRI, 2)
        assert rule.integrate(rule.points[:, 0]) == pytest.approx(1 / 6, rel=1e-14)

    def test_x2y2_moment(self):
        rule = triangle_rule(REF_TRI, 4)
        vals = rule.points[:, 0] ** 2 * rule.points[:, 1] ** 2
        assert rule.integrate(vals) == pytest.approx(1 / 180, rel=1e-13)
        assert exact_moment(2, 2) == pytest.approx(1 / 180)

    @pytest.mark.parametrize("degree", [1, 2, 3, 4, 5, 6])
    def test_full_exactness(self, degree):
        rule = triangle_rule(REF_TRI, degree)
        assert np.all(rule.weights > 0)
        for m in range(degree + 1):
            for n in range(degree + 1 - m):
                vals = rule.points[:, 0] ** m * rule.points[:, 1] ** n
                assert rule.integrate(vals) == pytest.approx(
                    exact_moment(m, n), rel=1e-12), (degree, m, n)

    def test_unsupported_degree(self):
        with pytest.raises(ValueError):
            triangle_rule(REF_TRI, 7)


class TestCutRule:
    def test_full_triangle_matches_triangle_rule(self):
        rule = cut_rule([Polygon(REF_TRI, validate=False)], 4)
        ref = triangle_rule(REF_TRI, 4)
        assert rule.measure == pytest.approx(ref.measure, rel=1e-14)
        vals = rule.points[:, 0] ** 2 * rule.points[:, 1]
        assert rule.integrate(vals) == pytest.approx(exact_moment(2, 1), rel=1e-13)

    def test_empty_input(self):
        rule = cut_rule([], 4)
        assert rule.measure == 0.0
        assert len(rule.points) == 0

    def test_half_square_weight_sum(self):
        poly = Polygon([(0, 0), (1, 0), (1, 0.5), (0, 0.5)])
        rule = cut_rule([poly], 3)
        assert rule.measure == pytest.approx(0.5, rel=1e-14)

    def test_clipped_pieces_polynomial_exactness(self):
        tri = np.array([(0, 0), (1, 0), (0, 1)], float)
        feat = make_feature(1, regular_polygon((0.3, 0.3), 0.15, 9), status="included")
        pieces = clip_triangle(tri, [feat])
        rule = cut_rule(pieces, 4)
        # linear integrand over the clipped region, independent rectangle sum
        full = triangle_rule(tri, 4)
        hole = cut_rule([Polygon(t, validate=False) for t in
                         _fan(feat.shape.vertices)], 4)
        for f in (lambda x, y: 1.0 + 0 * x, lambda x, y: x, lambda x, y: x * y):
            got = rule.integrate(f(rule.points[:, 0], rule.points[:, 1]))
            want = (full.integrate(f(full.points[:, 0], full.points[:, 1]))
                    - hole.integrate(f(hole.points[:, 0], hole.points[:, 1])))
            assert got == pytest.approx(want, rel=1e-12, abs=1e-14)


def _fan(verts):
    return [np.array([verts[0], verts[k], verts[k + 1]]) for k in range(1, len(verts) - 1)]


class TestSegmentRule:
    def test_unit_length(self):
        rule = segment_rule(((0, 0), (1, 0)), 1)
        assert rule.measure == pytest.approx(1.0, rel=1e-15)

    def test_linear(self):
        rule = segment_rule(((0, 0), (1, 0)), 2)
        assert rule.integrate(rule.points[:, 0]) == pytest.approx(0.5, rel=1e-14)

    def test_cubic_with_two_points(self):
        rule = segment_rule(((0, 0), (1, 0)), 3)
        assert len(rule.weights) == 2
        assert rule.integrate(rule.points[:, 0] ** 3) == pytest.approx(0.25, rel=1e-14)

    def test_oblique_segment_measure(self):
        rule = segment_rule(((0.2, 0.1), (0.5, 0.7)), 3)
        assert rule.measure == pytest.approx(math.hypot(0.3, 0.6), rel=1e-13)
