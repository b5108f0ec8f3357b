"""Quadrature on triangles, clipped polygonal regions, and boundary segments.

Triangle rules are symmetric Gauss rules with positive weights, exact up to
the declared polynomial degree.  Clipped regions are integrated by fanning
each polygonal piece from its centroid (ear clipping first when a piece is
not star-shaped from the centroid, which cannot happen for convex pieces).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Polygon, Segment, triangulate

DEFAULT_VOLUME_DEGREE = 4
DEFAULT_SEGMENT_DEGREE = 3


@dataclass(frozen=True)
class QuadratureRule:
    """Physical-space points with weights summing to the region measure."""

    points: np.ndarray  # (n, 2)
    weights: np.ndarray  # (n,)

    @property
    def measure(self) -> float:
        return float(self.weights.sum())

    def integrate(self, values) -> float:
        return float(np.dot(np.asarray(values, float), self.weights))


def _sym3(b):
    a = 1.0 - 2.0 * b
    return [(a, b, b), (b, a, b), (b, b, a)]


def _sym6(a, b):
    c = 1.0 - a - b
    return [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]


# Barycentric points and weights (normalized to sum 1), positive weights only.
_TRI_RULES = {
    1: ([(1 / 3, 1 / 3, 1 / 3)], [1.0]),
    2: (_sym3(1 / 6), [1 / 3] * 3),
    4: (
        _sym3(0.445948490915965) + _sym3(0.091576213509771),
        [0.223381589678011] * 3 + [0.109951743655322] * 3,
    ),
    5: (
        [(1 / 3, 1 / 3, 1 / 3)]
        + _sym3(0.470142064105115)
        + _sym3(0.101286507323456),
        [0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3,
    ),
    6: (
        _sym3(0.249286745170910)
        + _sym3(0.063089014491502)
        + _sym6(0.053145049844817, 0.310352451033784),
        [0.116786275726379] * 3 + [0.050844906370207] * 3 + [0.082851075618374] * 6,
    ),
}
_DEGREE_ALIAS = {1: 1, 2: 2, 3: 4, 4: 4, 5: 5, 6: 6}


def triangle_rule(tri, degree: int) -> QuadratureRule:
    """Symmetric rule on a triangle, exact for polynomials up to ``degree``."""
    if degree not in _DEGREE_ALIAS:
        raise ValueError(f"unsupported quadrature degree {degree} (supported: 1..6)")
    bary, w = _TRI_RULES[_DEGREE_ALIAS[degree]]
    pts = np.asarray(tri, float)
    if pts.shape != (3, 2):
        raise ValueError("triangle_rule expects a (3, 2) vertex array")
    area = 0.5 * abs(
        (pts[1, 0] - pts[0, 0]) * (pts[2, 1] - pts[0, 1])
        - (pts[1, 1] - pts[0, 1]) * (pts[2, 0] - pts[0, 0])
    )
    bary = np.asarray(bary)
    points = bary @ pts
    weights = np.asarray(w) * area
    return QuadratureRule(points, weights)


def cut_rule(active_polygons, degree: int) -> QuadratureRule:
    """Rule over a union of polygonal pieces via centroid-fan subtriangulation."""
    pts_list, w_list = [], []
    for poly in active_polygons:
        verts = poly.vertices if isinstance(poly, Polygon) else np.asarray(poly, float)
        wrapper = poly if isinstance(poly, Polygon) else Polygon(verts, validate=False)
        # pieces at the shoelace noise floor cannot be integrated meaningfully
        if abs(wrapper.area) <= 1e-15 * max(float(np.abs(verts).max()), 1.0) ** 2:
            continue
        if wrapper.is_convex(tol=1e-14):
            c = wrapper.centroid
            tris = [np.array([c, verts[k], verts[(k + 1) % len(verts)]])
                    for k in range(len(verts))]
        else:
            tris = triangulate(wrapper)
        for t in tris:
            rule = triangle_rule(t, degree)
            pts_list.append(rule.points)
            w_list.append(rule.weights)
    if not pts_list:
        return QuadratureRule(np.empty((0, 2)), np.empty(0))
    return QuadratureRule(np.vstack(pts_list), np.concatenate(w_list))


_GAUSS01: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss01(npts: int):
    """Cached Gauss nodes/weights on [0, 1]."""
    if npts not in _GAUSS01:
        nodes, w = np.polynomial.legendre.leggauss(npts)
        _GAUSS01[npts] = (0.5 * (nodes + 1.0), 0.5 * w)
    return _GAUSS01[npts]


def segment_rule(seg, degree: int) -> QuadratureRule:
    """Gauss rule along a segment; weights sum to the segment length."""
    if isinstance(seg, Segment):
        a, b = seg.a, seg.b
    else:
        a, b = np.asarray(seg[0], float), np.asarray(seg[1], float)
    t, w = gauss01(max(1, (degree + 2) // 2))
    points = a[None, :] + t[:, None] * (b - a)[None, :]
    length = float(np.hypot(*(b - a)))
    return QuadratureRule(points, w * length)
