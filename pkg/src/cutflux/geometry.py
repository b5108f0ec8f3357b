"""Polygonal holes and cut-cell geometry in the plane.

A rectangular background domain has polygonal "features" carved out of it.
This module provides the plane-geometry layer for that setting: membership
tests, clipping of a triangle against a set of holes (producing the polygonal
pieces that remain), and extraction of the hole-boundary segments crossing a
triangle.  Everything here is a pure function of immutable inputs, so the
routines are safe to call concurrently.

Conventions
-----------
* Polygons are counter-clockwise and simple; points are length-2 arrays.
* Hole boundaries are oriented so that the hole interior lies to the left of
  each directed edge.  The normal stored on a boundary segment points *into*
  the hole, which is the outward direction of the surrounding material.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

# Relative tolerance for on-boundary classification (scaled by a diameter).
GEOM_REL_TOL = 1e-12
# Clip pieces below this fraction of the parent area are discarded as slivers.
CLIP_DROP_REL = 1e-14

NEGLECTED = "neglected"
INCLUDED = "included"


def _as_points(vertices) -> np.ndarray:
    pts = np.asarray(vertices, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) vertex array, got shape {pts.shape}")
    return pts


def _signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


class Polygon:
    """Simple counter-clockwise polygon with at least three vertices."""

    __slots__ = ("vertices",)

    def __init__(self, vertices, validate: bool = True):
        pts = _as_points(vertices)
        if validate:
            if len(pts) < 3:
                raise ValueError("a polygon needs at least 3 vertices")
            if not np.all(np.isfinite(pts)):
                raise ValueError("polygon coordinates must be finite")
            if _signed_area(pts) <= 0.0:
                raise ValueError("polygon must be counter-clockwise with positive area")
        self.vertices = pts

    @property
    def area(self) -> float:
        return _signed_area(self.vertices)

    @property
    def centroid(self) -> np.ndarray:
        v = self.vertices
        nxt = np.roll(v, -1, axis=0)
        cross = v[:, 0] * nxt[:, 1] - v[:, 1] * nxt[:, 0]
        a = cross.sum() / 2.0
        cx = ((v[:, 0] + nxt[:, 0]) * cross).sum() / (6.0 * a)
        cy = ((v[:, 1] + nxt[:, 1]) * cross).sum() / (6.0 * a)
        return np.array([cx, cy])

    @property
    def diameter(self) -> float:
        v = self.vertices
        return float(np.max(v.max(axis=0) - v.min(axis=0))) * math.sqrt(2.0)

    def bbox(self):
        v = self.vertices
        return v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max()

    def edges(self):
        v = self.vertices
        for k in range(len(v)):
            yield v[k], v[(k + 1) % len(v)]

    def is_convex(self, tol: float = 0.0) -> bool:
        v = self.vertices
        d = np.roll(v, -1, axis=0) - v
        cross = d[:, 0] * np.roll(d, -1, axis=0)[:, 1] - d[:, 1] * np.roll(d, -1, axis=0)[:, 0]
        return bool(np.all(cross >= -tol * self.diameter ** 2))

    def is_simple(self) -> bool:
        """Edge-pair intersection scan; adjacent edges may share endpoints only."""
        v = self.vertices
        n = len(v)
        for i in range(n):
            a, b = v[i], v[(i + 1) % n]
            for j in range(i + 1, n):
                if j == i or (j + 1) % n == i or (i + 1) % n == j:
                    continue
                c, d = v[j], v[(j + 1) % n]
                if _segments_cross(a, b, c, d):
                    return False
        return True

    def __repr__(self):
        return f"Polygon({len(self.vertices)} vertices, area={self.area:.6g})"


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _segments_cross(a, b, c, d) -> bool:
    o1, o2 = _orient(a, b, c), _orient(a, b, d)
    o3, o4 = _orient(c, d, a), _orient(c, d, b)
    return (o1 * o2 < 0.0) and (o3 * o4 < 0.0)


@dataclass(frozen=True)
class Segment:
    """Directed piece of a feature boundary with the material-side outward normal."""

    a: np.ndarray
    b: np.ndarray
    owner_feature: int
    outward_normal: np.ndarray

    @property
    def length(self) -> float:
        return float(np.hypot(*(self.b - self.a)))

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.a + self.b)


def _segment_from_edge(a, b, owner: int) -> Segment:
    d = np.asarray(b, float) - np.asarray(a, float)
    ln = np.hypot(d[0], d[1])
    if ln <= 0.0:
        raise ValueError("zero-length boundary segment")
    # hole interior is left of a->b, which is the outward side of the material
    normal = np.array([-d[1], d[0]]) / ln
    return Segment(np.asarray(a, float).copy(), np.asarray(b, float).copy(), owner, normal)


@dataclass(frozen=True)
class Feature:
    """Polygonal hole with its boundary split into interior and domain-edge parts.

    ``gamma_tilde`` holds the boundary pieces interior to the background
    domain (the physical hole surface); ``gamma_zero`` holds the pieces lying
    on the domain boundary (empty for internal features).
    """

    id: int
    shape: Polygon
    status: str = NEGLECTED
    gamma_tilde: tuple = field(default_factory=tuple)
    gamma_zero: tuple = field(default_factory=tuple)

    @property
    def included(self) -> bool:
        return self.status == INCLUDED

    def with_status(self, status: str) -> "Feature":
        if status not in (NEGLECTED, INCLUDED):
            raise ValueError(f"unknown feature status {status!r}")
        return replace(self, status=status)

    @property
    def boundary_length(self) -> float:
        return sum(s.length for s in self.gamma_tilde)


def regular_polygon(center, radius: float, n_edges: int, theta_deg: float = 0.0) -> Polygon:
    """Regular ``n_edges``-gon inscribed in a circle.

    The rotation reference places one vertex at ``center + (radius, 0)``;
    ``theta_deg`` rotates the whole polygon counter-clockwise, in degrees.
    """
    if n_edges < 3:
        raise ValueError("a polygon needs n_edges >= 3")
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    cx, cy = float(center[0]), float(center[1])
    theta = math.radians(theta_deg)
    angles = theta + 2.0 * math.pi * np.arange(n_edges) / n_edges
    verts = np.column_stack([cx + radius * np.cos(angles), cy + radius * np.sin(angles)])
    return Polygon(verts)


def polygon_area(poly) -> float:
    """Shoelace area of a counter-clockwise polygon."""
    pts = poly.vertices if isinstance(poly, Polygon) else _as_points(poly)
    area = _signed_area(pts)
    if area <= 0.0:
        raise ValueError("polygon_area expects a counter-clockwise polygon")
    return area


def point_in_polygon(point, poly, tol: float | None = None) -> str:
    """Classify a point against a polygon: 'inside', 'boundary' or 'outside'.

    Points within ``tol`` of an edge are reported as 'boundary'.  The default
    tolerance is ``GEOM_REL_TOL`` times the polygon diameter (at least 1).
    """
    pts = poly.vertices if isinstance(poly, Polygon) else _as_points(poly)
    p = np.asarray(point, float)
    if tol is None:
        diam = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
        tol = GEOM_REL_TOL * max(1.0, diam)
    # distance to each edge
    a = pts
    b = np.roll(pts, -1, axis=0)
    d = b - a
    lens2 = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", p - a, d) / np.maximum(lens2, 1e-300), 0.0, 1.0)
    proj = a + t[:, None] * d
    dist = np.hypot(*(p - proj).T)
    if float(dist.min()) <= tol:
        return "boundary"
    # even-odd ray crossing, robust away from the boundary
    x, y = p
    inside = False
    for k in range(len(pts)):
        x1, y1 = pts[k]
        x2, y2 = pts[(k + 1) % len(pts)]
        if (y1 > y) != (y2 > y):
            xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if xi > x:
                inside = not inside
    return "inside" if inside else "outside"


# ---------------------------------------------------------------------------
# half-plane clipping
# ---------------------------------------------------------------------------

def _clip_half_plane(verts: np.ndarray, a, b, keep_left: bool) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon against the line a->b."""
    if len(verts) == 0:
        return verts
    sign = 1.0 if keep_left else -1.0
    out = []
    n = len(verts)
    side = np.empty(n)
    for i in range(n):
        side[i] = sign * _orient(a, b, verts[i])
    for i in range(n):
        p, q = verts[i], verts[(i + 1) % n]
        sp, sq = side[i], side[(i + 1) % n]
        if sp >= 0.0:
            out.append(p)
        if (sp > 0.0 and sq < 0.0) or (sp < 0.0 and sq > 0.0):
            t = sp / (sp - sq)
            out.append(p + t * (q - p))
    if len(out) < 3:
        return np.empty((0, 2))
    return np.asarray(out)


def clip_polygon_to_box(verts, box) -> np.ndarray:
    """Intersection of a convex polygon with an axis-aligned rectangle."""
    x0, y0, x1, y1 = box
    corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    out = _as_points(verts)
    for k in range(4):
        a, b = np.asarray(corners[k], float), np.asarray(corners[(k + 1) % 4], float)
        out = _clip_half_plane(out, a, b, keep_left=True)
        if len(out) < 3:
            return np.empty((0, 2))
    return out


def triangulate(poly) -> list[np.ndarray]:
    """Split a polygon into triangles: fan if convex, ear clipping otherwise."""
    pts = poly.vertices if isinstance(poly, Polygon) else _as_points(poly)
    wrapper = poly if isinstance(poly, Polygon) else Polygon(pts, validate=False)
    if wrapper.is_convex(tol=1e-14):
        return [np.array([pts[0], pts[k], pts[k + 1]]) for k in range(1, len(pts) - 1)]
    return _ear_clip(pts)


def _ear_clip(pts: np.ndarray) -> list[np.ndarray]:
    idx = list(range(len(pts)))
    tris = []
    guard = 0
    while len(idx) > 3:
        guard += 1
        if guard > 10 * len(pts) ** 2:
            raise ValueError("ear clipping failed; polygon may be non-simple")
        n = len(idx)
        for k in range(n):
            i0, i1, i2 = idx[(k - 1) % n], idx[k], idx[(k + 1) % n]
            a, b, c = pts[i0], pts[i1], pts[i2]
            if _orient(a, b, c) <= 0.0:
                continue
            ear = True
            for j in idx:
                if j in (i0, i1, i2):
                    continue
                p = pts[j]
                if (_orient(a, b, p) >= 0.0 and _orient(b, c, p) >= 0.0
                        and _orient(c, a, p) >= 0.0):
                    ear = False
                    break
            if ear:
                tris.append(np.array([a, b, c]))
                del idx[k]
                break
        else:
            raise ValueError("no ear found; polygon may be non-simple")
    tris.append(np.array([pts[idx[0]], pts[idx[1]], pts[idx[2]]]))
    return tris


def _dedupe_ring(verts: np.ndarray, eps: float) -> np.ndarray:
    """Collapse consecutive near-identical vertices of a polygon ring."""
    if len(verts) == 0:
        return verts
    out = [verts[0]]
    for p in verts[1:]:
        if np.hypot(p[0] - out[-1][0], p[1] - out[-1][1]) > eps:
            out.append(p)
    while len(out) > 1 and np.hypot(out[0][0] - out[-1][0], out[0][1] - out[-1][1]) <= eps:
        out.pop()
    return np.asarray(out) if len(out) >= 3 else np.empty((0, 2))


def _subtract_convex(piece: np.ndarray, clipper: np.ndarray, drop_area: float,
                     eps_len: float) -> list[np.ndarray]:
    """Convex difference piece \\ clipper as a list of disjoint convex parts."""
    rest = piece
    out = []
    n = len(clipper)
    for k in range(n):
        a, b = clipper[k], clipper[(k + 1) % n]
        kept = _dedupe_ring(_clip_half_plane(rest, a, b, keep_left=False), eps_len)
        if len(kept) >= 3 and abs(_signed_area(kept)) > drop_area:
            out.append(kept)
        rest = _dedupe_ring(_clip_half_plane(rest, a, b, keep_left=True), eps_len)
        if len(rest) < 3 or abs(_signed_area(rest)) <= drop_area:
            break
    return out


def clip_triangle(tri, included, drop_rel: float = CLIP_DROP_REL) -> list[Polygon]:
    """Polygonal pieces of a triangle minus the closures of the given holes.

    Returns a disjoint decomposition into convex counter-clockwise pieces
    whose total area equals the triangle area minus the covered area.  Input
    holes must be pairwise disjoint.
    """
    pts = _as_points(tri)
    if pts.shape[0] != 3:
        raise ValueError("clip_triangle expects a 3-vertex triangle")
    area = _signed_area(pts)
    diam2 = float(np.max(pts.max(axis=0) - pts.min(axis=0))) ** 2
    if abs(area) <= 1e-12 * max(diam2, 1e-300):
        raise ValueError("degenerate (near-zero-area) triangle")
    if area < 0.0:
        pts = pts[::-1]
        area = -area
    # floor the sliver threshold at the shoelace rounding noise, which scales
    # with the squared coordinate magnitude rather than the triangle size
    coord_scale = float(np.abs(pts).max())
    drop_area = max(drop_rel * area, 1e-16 * max(coord_scale, 1.0) ** 2)
    eps_len = 1e-14 * math.sqrt(max(diam2, 1e-300))

    tx0, ty0 = pts.min(axis=0)
    tx1, ty1 = pts.max(axis=0)
    pieces = [pts]
    for feat in included:
        shape = feat.shape if isinstance(feat, Feature) else feat
        fx0, fy0, fx1, fy1 = shape.bbox() if isinstance(shape, Polygon) else Polygon(shape).bbox()
        if fx1 < tx0 or fx0 > tx1 or fy1 < ty0 or fy0 > ty1:
            continue
        for sub in triangulate(shape):
            nxt = []
            for piece in pieces:
                nxt.extend(_subtract_convex(piece, sub, drop_area, eps_len))
            pieces = nxt
            if not pieces:
                return []
    out = []
    for piece in pieces:
        if _signed_area(piece) < 0.0:
            piece = piece[::-1]
        out.append(Polygon(piece, validate=False))
    return out


# ---------------------------------------------------------------------------
# boundary segments against a triangle
# ---------------------------------------------------------------------------

def segment_convex_interval(a, b, verts, tol: float = 0.0):
    """Parameter interval [t0, t1] of segment a->b inside a convex CCW polygon.

    Returns ``None`` when the intersection is empty or has zero length.
    Solved by walking the polygon's half-planes.
    """
    pts = _as_points(verts)
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    d = b - a
    t0, t1 = 0.0, 1.0
    n = len(pts)
    for k in range(n):
        p, q = pts[k], pts[(k + 1) % n]
        nx, ny = -(q[1] - p[1]), (q[0] - p[0])  # inward normal direction
        denom = nx * d[0] + ny * d[1]
        num = nx * (p[0] - a[0]) + ny * (p[1] - a[1])
        if abs(denom) < 1e-300:
            # segment parallel to this side: -num = n.(a - p) < 0 puts the
            # whole segment strictly outside the half-plane
            if -num < -tol:
                return None
            continue
        t_hit = num / denom
        if denom > 0.0:
            t0 = max(t0, t_hit)
        else:
            t1 = min(t1, t_hit)
        if t0 >= t1:
            return None
    if t1 - t0 <= 1e-14:
        return None
    return t0, t1


def segment_triangle_interval(a, b, tri, tol: float = 0.0):
    """Parameter interval of segment a->b inside a closed triangle."""
    pts = _as_points(tri)
    if _signed_area(pts) < 0.0:
        pts = pts[::-1]
    return segment_convex_interval(a, b, pts, tol)


def feature_segments_in_triangle(tri, feature: Feature) -> list[Segment]:
    """Pieces of a feature's interior boundary clipped to a closed triangle."""
    out = []
    for seg in feature.gamma_tilde:
        interval = segment_triangle_interval(seg.a, seg.b, tri)
        if interval is None:
            continue
        t0, t1 = interval
        p = seg.a + t0 * (seg.b - seg.a)
        q = seg.a + t1 * (seg.b - seg.a)
        out.append(Segment(p, q, feature.id, seg.outward_normal))
    return out


# ---------------------------------------------------------------------------
# feature construction
# ---------------------------------------------------------------------------

def _on_box_side(p, box, tol) -> bool:
    x0, y0, x1, y1 = box
    x, y = p
    return (abs(x - x0) <= tol or abs(x - x1) <= tol
            or abs(y - y0) <= tol or abs(y - y1) <= tol)


def make_feature(fid: int, polygon: Polygon, domain=None, status: str = NEGLECTED) -> Feature:
    """Build a feature from a polygon, clipping it to the background domain.

    ``domain`` is an axis-aligned box ``(x0, y0, x1, y1)`` or ``None`` for a
    feature known to be interior.  Boundary edges of the clipped shape lying
    on the domain boundary are separated out (they are the "lid" closing the
    hole when the feature touches the domain edge).
    """
    if not polygon.is_simple():
        raise ValueError(f"feature {fid}: polygon is self-intersecting")
    shape_pts = polygon.vertices
    if domain is not None:
        shape_pts = clip_polygon_to_box(shape_pts, domain)
        if len(shape_pts) < 3 or _signed_area(shape_pts) <= 0.0:
            raise ValueError(f"feature {fid} lies outside the domain")
        x0, y0, x1, y1 = domain
        tol = GEOM_REL_TOL * max(1.0, x1 - x0, y1 - y0)
    else:
        tol = GEOM_REL_TOL * max(1.0, Polygon(shape_pts, validate=False).diameter)
    shape = Polygon(shape_pts)

    tilde, zero = [], []
    for a, b in shape.edges():
        seg = _segment_from_edge(a, b, fid)
        on_domain = (domain is not None and _on_box_side(a, domain, tol)
                     and _on_box_side(b, domain, tol)
                     and _on_box_side(seg.midpoint, domain, tol))
        (zero if on_domain else tilde).append(seg)
    if not tilde:
        raise ValueError(f"feature {fid} has no boundary interior to the domain")
    return Feature(fid, shape, status, tuple(tilde), tuple(zero))


def features_overlap(f1: Feature, f2: Feature) -> bool:
    """True when two feature closures intersect (edge crossing or containment)."""
    p1, p2 = f1.shape.vertices, f2.shape.vertices
    x0, y0, x1, y1 = f1.shape.bbox()
    u0, v0, u1, v1 = f2.shape.bbox()
    if x1 < u0 or u1 < x0 or y1 < v0 or v1 < y0:
        return False
    for i in range(len(p1)):
        a, b = p1[i], p1[(i + 1) % len(p1)]
        for j in range(len(p2)):
            c, d = p2[j], p2[(j + 1) % len(p2)]
            if _segments_cross(a, b, c, d):
                return True
    if point_in_polygon(p1[0], f2.shape) != "outside":
        return True
    if point_in_polygon(p2[0], f1.shape) != "outside":
        return True
    return False
