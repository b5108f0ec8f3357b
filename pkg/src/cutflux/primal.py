"""P1 diffusion solve on the active part of a cut background mesh.

Integrals are restricted to the active region of every triangle: full
triangles use standard rules, crossed ones the clipped-polygon rules.  The
hole-boundary Neumann datum enters the right hand side along the assigned
boundary segments; Dirichlet values are interpolated at boundary vertices and
eliminated.  Vertices whose basis function has (almost) no active support are
dropped from the system.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import quadrature as quad
from .geometry import segment_convex_interval
from .linalg import solve_spd
from .mesh import DIRICHLET, INACTIVE, NEUMANN, ActiveClassification, Mesh

# Active-support fraction below which a vertex is removed from the system.
DELTA_CUT = 1e-10


def _const(value: float):
    def fn(x, y):
        return np.full_like(np.asarray(x, float), value, dtype=float)
    fn.__name__ = f"const_{value}"
    return fn


@dataclass
class ProblemSpec:
    """Problem data as vectorized callables of (x, y) arrays.

    ``g_neumann`` is the conforming outer-boundary Neumann datum,
    ``g_feature`` the datum on hole boundaries, ``kappa`` the (piecewise
    constant, mesh-aligned) diffusion coefficient.
    """

    f: callable = field(default_factory=lambda: _const(0.0))
    g_dirichlet: callable = field(default_factory=lambda: _const(0.0))
    g_neumann: callable = field(default_factory=lambda: _const(0.0))
    g_feature: callable = field(default_factory=lambda: _const(0.0))
    kappa: callable = field(default_factory=lambda: _const(1.0))

    def kappa_element(self, mesh: Mesh, t: int) -> float:
        c = mesh.tri_coords(t).mean(axis=0)
        return float(np.asarray(self.kappa(c[0], c[1])))


@dataclass
class DiscreteSolution:
    """Nodal coefficients over the background mesh vertices.

    ``free`` flags the vertices actually solved for; Dirichlet vertices carry
    the interpolated boundary datum; removed or fully inactive vertices carry
    zero and are excluded from everything.
    """

    mesh: Mesh
    classification: ActiveClassification
    values: np.ndarray
    free: np.ndarray
    dirichlet: np.ndarray

    @property
    def n_dofs(self) -> int:
        return int(self.free.sum())

    def gradients(self) -> np.ndarray:
        """Per-triangle constant gradient of the P1 field, (nt, 2)."""
        mesh = self.mesh
        grads = np.zeros((mesh.n_triangles, 2))
        for t in range(mesh.n_triangles):
            g = mesh.hat_gradients(t)
            grads[t] = self.values[mesh.triangles[t]] @ g
        return grads


def element_rules(mesh: Mesh, cls: ActiveClassification,
                  degree: int = quad.DEFAULT_VOLUME_DEGREE) -> dict:
    """Cut-aware volume quadrature for every active triangle."""
    rules = {}
    for t in cls.active_tris:
        t = int(t)
        if t in cls.pieces:
            rules[t] = quad.cut_rule(cls.pieces[t], degree)
        else:
            rules[t] = quad.triangle_rule(mesh.tri_coords(t), degree)
    return rules


def segment_active_spans(a, b, included_features):
    """Sub-intervals of segment a->b outside the given (convex) holes."""
    spans = [(0.0, 1.0)]
    for f in included_features:
        sub = []
        for t0, t1 in spans:
            p = a + t0 * (b - a)
            q = a + t1 * (b - a)
            cover = segment_convex_interval(p, q, f.shape.vertices)
            if cover is None:
                sub.append((t0, t1))
                continue
            c0 = t0 + cover[0] * (t1 - t0)
            c1 = t0 + cover[1] * (t1 - t0)
            if c0 - t0 > 1e-14:
                sub.append((t0, c0))
            if t1 - c1 > 1e-14:
                sub.append((c1, t1))
        spans = sub
        if not spans:
            break
    return spans


def neumann_intervals(mesh: Mesh, cls: ActiveClassification, e: int):
    """Sub-intervals of a Neumann boundary edge outside the included holes."""
    a = mesh.vertices[mesh.edges[e][0]]
    b = mesh.vertices[mesh.edges[e][1]]
    return a, b, segment_active_spans(a, b, cls.included_features())


def vertex_masks(mesh: Mesh, cls: ActiveClassification, delta_cut: float = DELTA_CUT):
    """Active vertices and the ones removed for vanishing active support."""
    nv = mesh.n_vertices
    support = np.zeros(nv)
    full = np.zeros(nv)
    for t in range(mesh.n_triangles):
        if cls.status[t] == INACTIVE:
            continue
        for v in mesh.triangles[t]:
            support[v] += cls.active_area[t]
            full[v] += mesh.areas[t]
    active = full > 0.0
    kept = active & (support >= delta_cut * np.maximum(full, 1e-300))
    return active, kept


def assemble_primal(mesh: Mesh, cls: ActiveClassification, spec: ProblemSpec,
                    degree: int = quad.DEFAULT_VOLUME_DEGREE,
                    segment_degree: int = quad.DEFAULT_SEGMENT_DEGREE):
    """Stiffness and load over the active region, plus the vertex masks.

    Returns ``(A, b, free, dirichlet, values0)`` where ``A`` and ``b`` are the
    full-size symmetric system before elimination, ``values0`` holds the
    boundary data at Dirichlet vertices and zeros elsewhere.
    """
    nv = mesh.n_vertices
    rows, cols, data = [], [], []
    b = np.zeros(nv)
    rules = element_rules(mesh, cls, degree)

    for t, rule in rules.items():
        tri = mesh.triangles[t]
        grads = mesh.hat_gradients(t)
        kap = spec.kappa_element(mesh, t)
        area = float(rule.weights.sum())
        ke = kap * area * (grads @ grads.T)
        for i in range(3):
            for j in range(3):
                rows.append(tri[i]); cols.append(tri[j]); data.append(ke[i, j])
        if len(rule.weights):
            fvals = np.asarray(spec.f(rule.points[:, 0], rule.points[:, 1]), float)
            lam = mesh.barycentric(t, rule.points)
            b[tri] += lam.T @ (fvals * rule.weights)

    # hole-boundary Neumann datum over the assigned segments
    for t, segs in cls.segments.items():
        tri = mesh.triangles[t]
        for seg in segs:
            rule = quad.segment_rule(seg, segment_degree)
            gvals = np.asarray(spec.g_feature(rule.points[:, 0], rule.points[:, 1]), float)
            lam = mesh.barycentric(t, rule.points)
            b[tri] += lam.T @ (gvals * rule.weights)

    # conforming Neumann edges, clipped to the part outside included holes
    for e in mesh.boundary_edges(NEUMANN):
        t_adj = mesh.edge_tris[e][0]
        if t_adj < 0 or cls.status[t_adj] == INACTIVE:
            continue
        a, bb, spans = neumann_intervals(mesh, cls, int(e))
        va, vb = mesh.edges[e]
        for t0, t1 in spans:
            p, q = a + t0 * (bb - a), a + t1 * (bb - a)
            rule = quad.segment_rule((p, q), segment_degree)
            gvals = np.asarray(spec.g_neumann(rule.points[:, 0], rule.points[:, 1]), float)
            # hat values along the edge are linear in the edge parameter
            s = np.linalg.norm(rule.points - a, axis=1) / max(np.linalg.norm(bb - a), 1e-300)
            b[va] += np.sum((1.0 - s) * gvals * rule.weights)
            b[vb] += np.sum(s * gvals * rule.weights)

    A = sp.coo_matrix((data, (rows, cols)), shape=(nv, nv)).tocsr()

    active, kept = vertex_masks(mesh, cls)
    dirichlet = mesh.dirichlet_vertices() & active
    free = kept & ~dirichlet
    values0 = np.zeros(nv)
    if dirichlet.any():
        xy = mesh.vertices[dirichlet]
        values0[dirichlet] = np.asarray(spec.g_dirichlet(xy[:, 0], xy[:, 1]), float)
    return A, b, free, dirichlet, values0


def solve_primal(spec: ProblemSpec, mesh: Mesh, cls: ActiveClassification,
                 degree: int = quad.DEFAULT_VOLUME_DEGREE) -> DiscreteSolution:
    A, b, free, dirichlet, values = assemble_primal(mesh, cls, spec, degree)
    idx = np.flatnonzero(free)
    if len(idx):
        rhs = b - A @ values
        Aff = A[idx][:, idx]
        values[idx] = solve_spd(Aff, rhs[idx])
    return DiscreteSolution(mesh, cls, values, free, dirichlet)


# ---------------------------------------------------------------------------
# energy error against a nested reference
# ---------------------------------------------------------------------------

class _Locator:
    """Uniform-grid point locator over a triangulation."""

    def __init__(self, mesh: Mesh, cells: int = 64):
        self.mesh = mesh
        x0, y0, x1, y1 = mesh.domain_bbox()
        self.origin = np.array([x0, y0])
        self.size = np.array([max(x1 - x0, 1e-300), max(y1 - y0, 1e-300)])
        self.n = cells
        self.bins: dict[tuple[int, int], list[int]] = {}
        coords = mesh.vertices[mesh.triangles]
        lo = (coords.min(axis=1) - self.origin) / self.size * cells
        hi = (coords.max(axis=1) - self.origin) / self.size * cells
        lo = np.clip(np.floor(lo).astype(int), 0, cells - 1)
        hi = np.clip(np.floor(hi).astype(int), 0, cells - 1)
        for t in range(mesh.n_triangles):
            for i in range(lo[t, 0], hi[t, 0] + 1):
                for j in range(lo[t, 1], hi[t, 1] + 1):
                    self.bins.setdefault((i, j), []).append(t)

    def locate(self, p, tol: float = 1e-10) -> int:
        cell = np.clip(((p - self.origin) / self.size * self.n).astype(int), 0, self.n - 1)
        for t in self.bins.get((int(cell[0]), int(cell[1])), ()):
            lam = self.mesh.barycentric(t, p)[0]
            if np.all(lam >= -tol):
                return t
        return -1


def energy_error(u: DiscreteSolution, u_ref: DiscreteSolution, kappa=None) -> float:
    """Energy norm of the gradient difference over the reference active region.

    ``u_ref`` must live on a refinement of ``u``'s mesh; every fine triangle
    is matched to its containing coarse triangle and both gradients are
    constant there, so the integral is exact.
    """
    coarse, fine = u.mesh, u_ref.mesh
    loc = _Locator(coarse)
    grads_c = u.gradients()
    grads_f = u_ref.gradients()
    total = 0.0
    for t in u_ref.classification.active_tris:
        t = int(t)
        verts = fine.tri_coords(t)
        centroid = verts.mean(axis=0)
        parent = loc.locate(centroid)
        if parent < 0:
            raise ValueError("meshes are not nested: fine centroid escapes the coarse mesh")
        lam = coarse.barycentric(parent, verts)
        if np.any(lam < -1e-8):
            raise ValueError("meshes are not nested: fine triangle straddles coarse ones")
        if kappa is None:
            kap = 1.0
        else:
            kap = float(np.asarray(kappa(centroid[0], centroid[1])))
        diff = grads_f[t] - grads_c[parent]
        total += kap * float(diff @ diff) * u_ref.classification.active_area[t]
    return float(np.sqrt(total))
