"""Conforming triangulations with bisection refinement and cut classification.

The mesh covers the filled-in background domain and never conforms to the
holes: triangles crossed by an included feature boundary are handled by the
cut-cell layer.  Refinement is newest-vertex bisection (NVB) with the longest
edge as the initial refinement edge, which keeps meshes conforming and shape
regular under arbitrary adaptive marking.

Storage convention: triangle ``(v0, v1, v2)`` has its refinement edge between
``v0`` and ``v1`` and its newest vertex at ``v2``; all triangles are
counter-clockwise.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    GEOM_REL_TOL,
    Feature,
    Polygon,
    Segment,
    clip_triangle,
    point_in_polygon,
    segment_convex_interval,
    segment_triangle_interval,
)

DIRICHLET = "dirichlet"
NEUMANN = "neumann0"

UNCUT = 0
CUT = 1
INACTIVE = 2

# Active-area fraction below which a crossed triangle counts as fully covered.
INACTIVE_AREA_REL = 1e-12


class FullyTrimmedVertexError(ValueError):
    """Raised for a vertex with no active incident triangle."""


class Mesh:
    """Immutable conforming triangulation with tagged boundary edges."""

    def __init__(self, vertices, triangles, boundary_tag, generation=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self.boundary_tag = dict(boundary_tag)
        nt = len(self.triangles)
        self.generation = (np.zeros(nt, dtype=np.int64) if generation is None
                           else np.asarray(generation, dtype=np.int64))
        self._build_tables()

    # -- derived connectivity -------------------------------------------------
    def _build_tables(self):
        tris = self.triangles
        nt = len(tris)
        # local edge k is opposite vertex k
        raw = np.stack([tris[:, [1, 2]], tris[:, [2, 0]], tris[:, [0, 1]]], axis=1)
        raw = raw.reshape(-1, 2)
        raw_sorted = np.sort(raw, axis=1)
        self.edges, inv = np.unique(raw_sorted, axis=0, return_inverse=True)
        self.tri_edges = inv.reshape(nt, 3)
        ne = len(self.edges)
        edge_tris = np.full((ne, 2), -1, dtype=np.int64)
        counts = np.zeros(ne, dtype=np.int64)
        for t in range(nt):
            for e in self.tri_edges[t]:
                if counts[e] < 2:
                    edge_tris[e, counts[e]] = t
                counts[e] += 1
        if counts.max(initial=0) > 2:
            raise ValueError("non-conforming mesh: an edge has more than 2 triangles")
        self.edge_tris = edge_tris
        self.edge_count = counts
        vt: list[list[int]] = [[] for _ in range(len(self.vertices))]
        for t in range(nt):
            for v in tris[t]:
                vt[v].append(t)
        self.vertex_tris = [np.asarray(lst, dtype=np.int64) for lst in vt]

        coords = self.vertices[tris]  # (nt, 3, 2)
        d01 = coords[:, 1] - coords[:, 0]
        d02 = coords[:, 2] - coords[:, 0]
        self.areas = 0.5 * (d01[:, 0] * d02[:, 1] - d01[:, 1] * d02[:, 0])
        if np.any(self.areas <= 0.0):
            raise ValueError("mesh has non-positively-oriented triangles")
        e0 = np.linalg.norm(coords[:, 2] - coords[:, 1], axis=1)
        e1 = np.linalg.norm(coords[:, 0] - coords[:, 2], axis=1)
        e2 = np.linalg.norm(coords[:, 1] - coords[:, 0], axis=1)
        self.diameters = np.maximum(np.maximum(e0, e1), e2)

    # -- basic queries ---------------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def tri_coords(self, t: int) -> np.ndarray:
        return self.vertices[self.triangles[t]]

    def edge_key(self, e: int) -> tuple[int, int]:
        a, b = self.edges[e]
        return int(a), int(b)

    def edge_tag(self, e: int) -> str | None:
        return self.boundary_tag.get(self.edge_key(e))

    def boundary_edges(self, tag: str | None = None) -> np.ndarray:
        ids = [e for e in range(len(self.edges)) if self.edge_count[e] == 1]
        if tag is not None:
            ids = [e for e in ids if self.edge_tag(e) == tag]
        return np.asarray(ids, dtype=np.int64)

    def vertex_boundary_tags(self, v: int) -> set[str]:
        tags = set()
        for (a, b), tag in self.boundary_tag.items():
            if v == a or v == b:
                tags.add(tag)
        return tags

    def dirichlet_vertices(self) -> np.ndarray:
        flags = np.zeros(self.n_vertices, dtype=bool)
        for (a, b), tag in self.boundary_tag.items():
            if tag == DIRICHLET:
                flags[a] = flags[b] = True
        return flags

    def domain_bbox(self):
        v = self.vertices
        return v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max()

    def min_angle(self) -> float:
        """Smallest interior angle over all triangles, in degrees."""
        coords = self.vertices[self.triangles]
        worst = math.pi
        a = coords[:, 0] - coords[:, 1]
        b = coords[:, 2] - coords[:, 1]
        for i, j, k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
            u = coords[:, j] - coords[:, i]
            w = coords[:, k] - coords[:, i]
            cosang = np.einsum("ij,ij->i", u, w) / (
                np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1))
            worst = min(worst, float(np.arccos(np.clip(cosang, -1, 1)).min()))
        return math.degrees(worst)

    def barycentric(self, t: int, points) -> np.ndarray:
        """Barycentric coordinates of points w.r.t. triangle ``t`` (n, 3)."""
        pts = np.atleast_2d(np.asarray(points, float))
        v = self.tri_coords(t)
        T = np.column_stack([v[1] - v[0], v[2] - v[0]])
        sol = np.linalg.solve(T, (pts - v[0]).T).T
        lam = np.column_stack([1.0 - sol[:, 0] - sol[:, 1], sol[:, 0], sol[:, 1]])
        return lam

    def hat_gradients(self, t: int) -> np.ndarray:
        """Gradients of the three vertex hat functions on triangle ``t`` (3, 2)."""
        v = self.tri_coords(t)
        area2 = 2.0 * self.areas[t]
        g = np.empty((3, 2))
        for i in range(3):
            p, q = v[(i + 1) % 3], v[(i + 2) % 3]
            g[i] = np.array([p[1] - q[1], q[0] - p[0]]) / area2
        return g

    def hat_gradients_all(self) -> np.ndarray:
        """Hat-function gradients on every triangle at once, (nt, 3, 2)."""
        coords = self.vertices[self.triangles]
        g = np.empty((self.n_triangles, 3, 2))
        for i in range(3):
            p = coords[:, (i + 1) % 3]
            q = coords[:, (i + 2) % 3]
            g[:, i, 0] = p[:, 1] - q[:, 1]
            g[:, i, 1] = q[:, 0] - p[:, 0]
        return g / (2.0 * self.areas)[:, None, None]

    def dump(self) -> str:
        """Plain-text snapshot: ``v x y``, ``t i j k tag`` (tag = generation),
        and ``e i j tag`` lines for tagged boundary edges."""
        buf = io.StringIO()
        for x, y in self.vertices:
            buf.write(f"v {float(x)!r} {float(y)!r}\n")
        for t, (i, j, k) in enumerate(self.triangles):
            buf.write(f"t {i} {j} {k} {self.generation[t]}\n")
        for (a, b), tag in sorted(self.boundary_tag.items()):
            buf.write(f"e {a} {b} {tag}\n")
        return buf.getvalue()

    @staticmethod
    def parse(text: str) -> "Mesh":
        verts, tris, gens, tags = [], [], [], {}
        for line in text.splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append((float(parts[1]), float(parts[2])))
            elif parts[0] == "t":
                tris.append(tuple(int(p) for p in parts[1:4]))
                gens.append(int(parts[4]))
            elif parts[0] == "e":
                tags[(int(parts[1]), int(parts[2]))] = parts[3]
        return Mesh(verts, tris, tags, gens)


def build_structured_mesh(domain, h_target: float,
                          dirichlet_sides=("left", "right", "bottom", "top")) -> Mesh:
    """Uniform triangulation of an axis-aligned square by diagonal-split cells.

    The cell count is the smallest making every triangle diameter at most
    ``h_target * (1 + 1e-9)``.  Boundary edges on the named sides are tagged
    Dirichlet, the remaining sides homogeneous-Neumann.
    """
    if h_target <= 0.0:
        raise ValueError("h_target must be positive")
    x0, y0, x1, y1 = (float(c) for c in domain)
    lx, ly = x1 - x0, y1 - y0
    if lx <= 0 or ly <= 0:
        raise ValueError("domain must have positive extent")
    n = int(math.ceil(math.sqrt(2.0) * max(lx, ly) / (h_target * (1.0 + 1e-9)) - 1e-12))
    n = max(n, 1)
    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)

    def vid(i, j):
        return j * (n + 1) + i

    verts = np.array([(x, y) for y in ys for x in xs])
    tris = []
    for j in range(n):
        for i in range(n):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            # refinement edge = the cell diagonal (longest edge)
            tris.append((v00, v11, v01))
            tris.append((v11, v00, v10))

    side_of = {"bottom": lambda a, b: a[1] == y0 and b[1] == y0,
               "top": lambda a, b: a[1] == y1 and b[1] == y1,
               "left": lambda a, b: a[0] == x0 and b[0] == x0,
               "right": lambda a, b: a[0] == x1 and b[0] == x1}
    tags = {}
    for j in range(n):
        for side, (va, vb) in (("left", (vid(0, j), vid(0, j + 1))),
                               ("right", (vid(n, j), vid(n, j + 1)))):
            tag = DIRICHLET if side in dirichlet_sides else NEUMANN
            tags[(min(va, vb), max(va, vb))] = tag
    for i in range(n):
        for side, (va, vb) in (("bottom", (vid(i, 0), vid(i + 1, 0))),
                               ("top", (vid(i, n), vid(i + 1, n)))):
            tag = DIRICHLET if side in dirichlet_sides else NEUMANN
            tags[(min(va, vb), max(va, vb))] = tag
    del side_of
    return Mesh(verts, tris, tags)


def refine(mesh: Mesh, marked) -> Mesh:
    """Newest-vertex bisection of the marked triangles with conformity closure."""
    marked = np.asarray(sorted(set(int(t) for t in marked)), dtype=np.int64)
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_triangles:
        raise ValueError("marked triangle index out of range")

    nt = mesh.n_triangles
    edge_marked = np.zeros(len(mesh.edges), dtype=bool)
    edge_marked[mesh.tri_edges[marked, 2]] = True
    # closure: any triangle touching a marked edge must have its refinement
    # edge marked too; NVB guarantees this loop terminates
    changed = True
    while changed:
        changed = False
        tri_any = edge_marked[mesh.tri_edges].any(axis=1)
        need = tri_any & ~edge_marked[mesh.tri_edges[:, 2]]
        if need.any():
            edge_marked[mesh.tri_edges[need, 2]] = True
            changed = True

    n_old = mesh.n_vertices
    new_ids = np.full(len(mesh.edges), -1, dtype=np.int64)
    which = np.flatnonzero(edge_marked)
    new_ids[which] = n_old + np.arange(len(which))
    midpoints = 0.5 * (mesh.vertices[mesh.edges[which, 0]] + mesh.vertices[mesh.edges[which, 1]])
    vertices = np.vstack([mesh.vertices, midpoints])

    tris_out, gen_out = [], []

    def emit(a, b, c, g):
        tris_out.append((a, b, c))
        gen_out.append(g)

    for t in range(nt):
        a, b, c = (int(v) for v in mesh.triangles[t])
        e0, e1, e2 = mesh.tri_edges[t]
        g = int(mesh.generation[t])
        if not edge_marked[e2]:
            emit(a, b, c, g)
            continue
        m = int(new_ids[e2])
        # child containing a, refinement edge (c, a)
        if edge_marked[e1]:
            m1 = int(new_ids[e1])
            emit(m, c, m1, g + 2)
            emit(a, m, m1, g + 2)
        else:
            emit(c, a, m, g + 1)
        # child containing b, refinement edge (b, c)
        if edge_marked[e0]:
            m0 = int(new_ids[e0])
            emit(m, b, m0, g + 2)
            emit(c, m, m0, g + 2)
        else:
            emit(b, c, m, g + 1)

    # boundary tags: split tagged edges at their midpoint when marked
    tags = {}
    edge_lookup = {mesh.edge_key(e): e for e in range(len(mesh.edges))}
    for (a, b), tag in mesh.boundary_tag.items():
        e = edge_lookup[(a, b)]
        if edge_marked[e]:
            m = int(new_ids[e])
            tags[(min(a, m), max(a, m))] = tag
            tags[(min(m, b), max(m, b))] = tag
        else:
            tags[(a, b)] = tag
    return Mesh(vertices, tris_out, tags, gen_out)


def uniform_refine(mesh: Mesh, rounds: int = 1) -> Mesh:
    for _ in range(rounds):
        mesh = refine(mesh, np.arange(mesh.n_triangles))
    return mesh


def conformity_audit(mesh: Mesh) -> None:
    """Raise when an interior edge is not shared by exactly two triangles or a
    boundary edge is untagged."""
    for e in range(len(mesh.edges)):
        cnt = mesh.edge_count[e]
        if cnt == 2:
            continue
        if cnt == 1:
            if mesh.edge_tag(e) is None:
                raise AssertionError(f"untagged boundary edge {mesh.edge_key(e)}")
        else:
            raise AssertionError(f"edge {mesh.edge_key(e)} has {cnt} incident triangles")


# ---------------------------------------------------------------------------
# active-mesh classification
# ---------------------------------------------------------------------------

@dataclass
class ActiveClassification:
    """Per-triangle cut status against the included features.

    ``pieces`` maps cut triangles to their active polygonal parts and
    ``segments`` to the feature-boundary segments assigned to them; every
    boundary piece of an included feature is assigned to exactly one triangle,
    so summed segment lengths reproduce the boundary length.
    """

    status: np.ndarray
    active_area: np.ndarray
    pieces: dict = field(default_factory=dict)
    segments: dict = field(default_factory=dict)
    features: tuple = ()

    @property
    def active_tris(self) -> np.ndarray:
        return np.flatnonzero(self.status != INACTIVE)

    @property
    def cut_tris(self) -> np.ndarray:
        return np.flatnonzero(self.status == CUT)

    @property
    def is_active(self) -> np.ndarray:
        return self.status != INACTIVE

    def included_features(self):
        return [f for f in self.features if f.included]

    def neglected_features(self):
        return [f for f in self.features if not f.included]


def _tri_bboxes(mesh: Mesh) -> np.ndarray:
    coords = mesh.vertices[mesh.triangles]
    return np.concatenate([coords.min(axis=1), coords.max(axis=1)], axis=1)


def _point_in_tri(mesh: Mesh, t: int, p, tol: float) -> bool:
    lam = mesh.barycentric(t, p)[0]
    return bool(np.all(lam >= -tol))


def assign_feature_boundary(mesh: Mesh, feature: Feature, active_area=None):
    """Split a feature's interior boundary at mesh-edge crossings and assign
    each piece to the unique containing triangle.

    Returns a list of ``(triangle_index, Segment)``; when ``active_area`` is
    given, triangles that are essentially fully covered are skipped in favour
    of an active one containing the same piece.
    """
    boxes = _tri_bboxes(mesh)
    out = []
    for seg in feature.gamma_tilde:
        lo = np.minimum(seg.a, seg.b)
        hi = np.maximum(seg.a, seg.b)
        cand = np.flatnonzero((boxes[:, 0] <= hi[0]) & (boxes[:, 2] >= lo[0])
                              & (boxes[:, 1] <= hi[1]) & (boxes[:, 3] >= lo[1]))
        cuts = {0.0, 1.0}
        hits = []
        for t in cand:
            interval = segment_triangle_interval(seg.a, seg.b, mesh.tri_coords(t))
            if interval is None:
                continue
            hits.append(int(t))
            cuts.add(interval[0])
            cuts.add(interval[1])
        if not hits:
            raise ValueError(
                f"feature {feature.id} boundary leaves the mesh near {seg.a}")
        ts = np.array(sorted(cuts))
        keep = np.concatenate([[True], np.diff(ts) > 1e-13])
        ts = ts[keep]
        for t0, t1 in zip(ts[:-1], ts[1:]):
            if (t1 - t0) * seg.length <= 1e-14 * max(1.0, seg.length):
                continue
            mid = seg.a + 0.5 * (t0 + t1) * (seg.b - seg.a)
            owners = [t for t in hits if _point_in_tri(mesh, t, mid, 1e-10)]
            if not owners:
                raise ValueError(
                    f"feature {feature.id} boundary piece not inside any triangle")
            if active_area is not None:
                live = [t for t in owners
                        if active_area[t] > INACTIVE_AREA_REL * mesh.areas[t]]
                owners = live or owners
            owner = min(owners)
            piece = Segment(seg.a + t0 * (seg.b - seg.a), seg.a + t1 * (seg.b - seg.a),
                            feature.id, seg.outward_normal)
            out.append((owner, piece))
    return out


def classify_active(mesh: Mesh, features) -> ActiveClassification:
    """Split triangles into uncut-active, cut and inactive against the
    included features, recording clipped active polygons and boundary pieces."""
    features = tuple(features)
    included = [f for f in features if f.included]
    nt = mesh.n_triangles
    status = np.zeros(nt, dtype=np.int8)
    active_area = mesh.areas.copy()
    pieces: dict[int, list[Polygon]] = {}
    segments: dict[int, list[Segment]] = {}
    if not included:
        return ActiveClassification(status, active_area, pieces, segments, features)

    boxes = _tri_bboxes(mesh)
    cand_lists: dict[int, list[Feature]] = {}
    for f in included:
        fx0, fy0, fx1, fy1 = f.shape.bbox()
        hit = np.flatnonzero((boxes[:, 0] <= fx1) & (boxes[:, 2] >= fx0)
                             & (boxes[:, 1] <= fy1) & (boxes[:, 3] >= fy0))
        for t in hit:
            cand_lists.setdefault(int(t), []).append(f)

    for t, cands in cand_lists.items():
        coords = mesh.tri_coords(t)
        covered = False
        touching = []
        for f in cands:
            kinds = [point_in_polygon(v, f.shape) for v in coords]
            if all(k == "inside" for k in kinds):
                # features are convex, so vertex containment settles it
                covered = True
                break
            if any(k != "outside" for k in kinds):
                touching.append(f)
                continue
            crosses = any(
                segment_convex_interval(coords[k], coords[(k + 1) % 3],
                                        f.shape.vertices) is not None
                for k in range(3))
            lam = mesh.barycentric(t, f.shape.vertices[0])[0]
            if crosses or np.all(lam >= -1e-12):
                touching.append(f)
        if covered:
            status[t] = INACTIVE
            active_area[t] = 0.0
            continue
        if not touching:
            continue
        polys = clip_triangle(coords, touching)
        area = sum(p.area for p in polys)
        active_area[t] = area
        if area <= INACTIVE_AREA_REL * mesh.areas[t]:
            status[t] = INACTIVE
            active_area[t] = 0.0
        elif area < mesh.areas[t] * (1.0 - 1e-12):
            status[t] = CUT
            pieces[t] = polys

    for f in included:
        for t, seg in assign_feature_boundary(mesh, f, active_area):
            if status[t] == INACTIVE:
                raise ValueError(
                    f"boundary of feature {f.id} assigned to covered triangle {t}")
            segments.setdefault(t, []).append(seg)
            if status[t] == UNCUT:
                # grazing contact: positive boundary length, full area
                status[t] = CUT
                pieces.setdefault(t, [Polygon(mesh.tri_coords(t), validate=False)])
    # crossed triangles that received no boundary piece keep their clipped
    # quadrature but are equilibrated as uncut ones; this only happens when a
    # feature edge lies exactly along mesh edges
    return ActiveClassification(status, active_area, pieces, segments, features)


# ---------------------------------------------------------------------------
# vertex patches
# ---------------------------------------------------------------------------

PATCH_INTERIOR = "interior"
PATCH_NEUMANN = "neumann_exterior"
PATCH_NEUMANN_CORNER = "neumann_corner"
PATCH_DIRICHLET = "dirichlet"


@dataclass
class Patch:
    """Active triangles around a vertex with the split of the patch boundary.

    ``boundary_zero`` are edges where the vertex hat function vanishes;
    ``boundary_psi`` the remaining patch-boundary edges (those containing the
    center vertex)."""

    center_vertex: int
    elements: np.ndarray
    boundary_zero: np.ndarray
    boundary_psi: np.ndarray
    kind: str

    @property
    def size(self) -> int:
        return len(self.elements)


def patch(mesh: Mesh, vertex: int, classification: ActiveClassification | None = None) -> Patch:
    if classification is None:
        tris = mesh.vertex_tris[vertex]
    else:
        tris = np.asarray([t for t in mesh.vertex_tris[vertex]
                           if classification.status[t] != INACTIVE], dtype=np.int64)
    if len(tris) == 0:
        raise FullyTrimmedVertexError(f"vertex {vertex} has no active triangle")

    counts: dict[int, int] = {}
    for t in tris:
        for e in mesh.tri_edges[t]:
            counts[int(e)] = counts.get(int(e), 0) + 1
    boundary = [e for e, c in counts.items() if c == 1]
    bz, bp = [], []
    for e in boundary:
        a, b = mesh.edges[e]
        (bp if vertex in (a, b) else bz).append(e)

    tags = mesh.vertex_boundary_tags(vertex)
    kind = PATCH_INTERIOR
    if tags:
        inside_feature = False
        if classification is not None:
            p = mesh.vertices[vertex]
            for f in classification.included_features():
                if point_in_polygon(p, f.shape) == "inside":
                    inside_feature = True
                    break
        if inside_feature:
            kind = PATCH_INTERIOR
        elif DIRICHLET in tags and NEUMANN in tags:
            kind = PATCH_NEUMANN_CORNER
        elif DIRICHLET in tags:
            kind = PATCH_DIRICHLET
        else:
            kind = PATCH_NEUMANN
    return Patch(int(vertex), tris, np.asarray(sorted(bz), dtype=np.int64),
                 np.asarray(sorted(bp), dtype=np.int64), kind)


def hat_function(mesh: Mesh, vertex: int, point):
    """Value and gradient of the vertex hat function at a point of its patch."""
    p = np.asarray(point, float)
    for t in mesh.vertex_tris[vertex]:
        lam = mesh.barycentric(t, p)[0]
        if np.all(lam >= -1e-12):
            local = list(mesh.triangles[t]).index(vertex)
            return float(lam[local]), mesh.hat_gradients(t)[local]
    raise ValueError(f"point {point} lies outside the patch of vertex {vertex}")
