"""Patch-local equilibrated flux reconstruction on a cut background mesh.

For every mesh vertex, a small saddle-point problem is solved on the patch of
active triangles around it: the unknown is a degree-1 Raviart-Thomas field
(two normal-trace moments per edge, two interior moments per triangle), the
multiplier a broken P1 pressure.  The hole-boundary Neumann condition cannot
be imposed strongly on edges the mesh does not have, so it enters through a
penalty on the boundary segments crossing the patch; the resulting global sum
is H(div)-conforming, reproduces the outer Neumann data strongly, and matches
the source divergence exactly on every triangle not crossed by a hole
boundary.

Patch problems are mutually independent and the final field is a plain sum of
the local ones, so the whole reconstruction parallelizes trivially.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import quadrature as quad
from .linalg import SaddleSolveError, solve_saddle
from .mesh import (
    CUT,
    INACTIVE,
    NEUMANN,
    PATCH_INTERIOR,
    PATCH_NEUMANN,
    PATCH_NEUMANN_CORNER,
    ActiveClassification,
    Mesh,
    Patch,
    patch as make_patch,
)
from .primal import DiscreteSolution, ProblemSpec, element_rules, segment_active_spans

log = logging.getLogger(__name__)

STAB_NONE = "none"
STAB_GHOST = "ghost"
STAB_DISCARD = "discard"


@dataclass
class FluxOptions:
    """Knobs for the patch solves.

    ``stabilization``: 'none' solves every patch as-is, 'ghost' adds jump
    penalties across edges of cut triangles, 'discard' zeroes the contribution
    of patches whose active-area fraction falls below ``discard_fraction``.
    """

    variant: str = "symmetric"  # or "asymmetric"
    stabilization: str = STAB_DISCARD
    beta1: float = 0.1
    beta2: float = 0.1
    discard_fraction: float = 1e-3
    check_compatibility: bool = True
    volume_degree: int = quad.DEFAULT_VOLUME_DEGREE
    segment_degree: int = quad.DEFAULT_SEGMENT_DEGREE


# ---------------------------------------------------------------------------
# degree-1 Raviart-Thomas element data
# ---------------------------------------------------------------------------

def _monomials(pts, xc, h):
    """Vector monomial basis of the RT1 space at points, (n, 8, 2)."""
    pts = np.atleast_2d(pts)
    X = (pts[:, 0] - xc[0]) / h
    Y = (pts[:, 1] - xc[1]) / h
    n = len(pts)
    out = np.zeros((n, 8, 2))
    out[:, 0, 0] = 1.0
    out[:, 1, 0] = X
    out[:, 2, 0] = Y
    out[:, 3, 1] = 1.0
    out[:, 4, 1] = X
    out[:, 5, 1] = Y
    out[:, 6, 0] = X * X
    out[:, 6, 1] = X * Y
    out[:, 7, 0] = X * Y
    out[:, 7, 1] = Y * Y
    return out


def _monomial_div(pts, xc, h):
    pts = np.atleast_2d(pts)
    X = (pts[:, 0] - xc[0]) / h
    Y = (pts[:, 1] - xc[1]) / h
    n = len(pts)
    out = np.zeros((n, 8))
    out[:, 1] = 1.0 / h
    out[:, 5] = 1.0 / h
    out[:, 6] = 3.0 * X / h
    out[:, 7] = 3.0 * Y / h
    return out


def _monomial_dirderiv(pts, xc, h, normal):
    """Directional derivative of each monomial component along ``normal``."""
    pts = np.atleast_2d(pts)
    X = (pts[:, 0] - xc[0]) / h
    Y = (pts[:, 1] - xc[1]) / h
    nx, ny = normal
    n = len(pts)
    out = np.zeros((n, 8, 2))
    out[:, 1, 0] = nx / h
    out[:, 2, 0] = ny / h
    out[:, 4, 1] = nx / h
    out[:, 5, 1] = ny / h
    out[:, 6, 0] = 2.0 * X * nx / h
    out[:, 6, 1] = (Y * nx + X * ny) / h
    out[:, 7, 0] = (Y * nx + X * ny) / h
    out[:, 7, 1] = 2.0 * Y * ny / h
    return out


def _edge_frame(mesh: Mesh, e: int):
    """Global edge orientation (low vertex to high) with its fixed normal."""
    va, vb = mesh.edges[e]
    a, b = mesh.vertices[va], mesh.vertices[vb]
    d = b - a
    length = float(np.hypot(d[0], d[1]))
    t = d / length
    n = np.array([t[1], -t[0]])
    return a, b, t, n, length


def _pressure_basis(pts, xc, h):
    pts = np.atleast_2d(pts)
    return np.column_stack([
        np.ones(len(pts)),
        (pts[:, 0] - xc[0]) / h,
        (pts[:, 1] - xc[1]) / h,
    ])


@dataclass
class ElementData:
    """Per-triangle quadrature, bases, and precomputed form blocks."""

    t: int
    edge_ids: np.ndarray
    h: float
    area: float
    area_active: float
    kappa: float
    centroid: np.ndarray
    Ainv: np.ndarray
    rule: quad.QuadratureRule
    phi: np.ndarray          # (nq, 8, 2) RT basis at volume points
    div: np.ndarray          # (nq, 8)
    lam: np.ndarray          # (nq, 3) vertex hats
    grad_hat: np.ndarray     # (3, 2)
    grad_u: np.ndarray       # (2,)
    M: np.ndarray            # (8, 8) weighted mass
    Bdiv: np.ndarray         # (3, 8)
    Lblk: np.ndarray         # (3, 8), one row per hat choice
    Rblk: np.ndarray         # (3, 3)
    qmom_active: np.ndarray = None  # (3,) pressure moments over the active part
    # hole-boundary segment blocks (cut triangles only)
    seg_rule: quad.QuadratureRule | None = None
    seg_phin: np.ndarray | None = None
    seg_q: np.ndarray | None = None
    seg_lam: np.ndarray | None = None
    P: np.ndarray | None = None
    Bseg: np.ndarray | None = None
    Lseg: np.ndarray | None = None
    Rseg: np.ndarray | None = None

    @property
    def has_segments(self) -> bool:
        return self.seg_rule is not None and len(self.seg_rule.weights) > 0


def _monomials_batch(pts, xc, h):
    """Monomials over a batch of elements: pts (n, q, 2) -> (n, q, 8, 2)."""
    X = (pts[..., 0] - xc[:, None, 0]) / h[:, None]
    Y = (pts[..., 1] - xc[:, None, 1]) / h[:, None]
    n, q = X.shape
    out = np.zeros((n, q, 8, 2))
    out[..., 0, 0] = 1.0
    out[..., 1, 0] = X
    out[..., 2, 0] = Y
    out[..., 3, 1] = 1.0
    out[..., 4, 1] = X
    out[..., 5, 1] = Y
    out[..., 6, 0] = X * X
    out[..., 6, 1] = X * Y
    out[..., 7, 0] = X * Y
    out[..., 7, 1] = Y * Y
    return out


def _element_dof_matrix(mesh: Mesh, t: int, xc, h) -> np.ndarray:
    """Matrix of the 8 RT1 dof functionals applied to the 8 monomials."""
    A = np.zeros((8, 8))
    for k in range(3):
        e = mesh.tri_edges[t][k]
        a, b, tvec, n, length = _edge_frame(mesh, e)
        s, w01 = quad.gauss01(2)
        pts = a[None, :] + s[:, None] * (b - a)[None, :]
        wts = w01 * length
        mono_n = _monomials(pts, xc, h) @ n  # (nq, 8)
        A[2 * k] = wts @ mono_n
        A[2 * k + 1] = (wts * (s - 0.5)) @ mono_n
    rule = quad.triangle_rule(mesh.tri_coords(t), 2)
    mono = _monomials(rule.points, xc, h)
    A[6] = rule.weights @ mono[:, :, 0]
    A[7] = rule.weights @ mono[:, :, 1]
    return A


def _batch_uncut_cache(mesh: Mesh, cls: ActiveClassification, u: DiscreteSolution,
                       spec: ProblemSpec, tri_ids, volume_degree: int) -> dict:
    """Vectorized cache construction for elements carrying full triangles."""
    idx = np.asarray(tri_ids, dtype=np.int64)
    if idx.size == 0:
        return {}
    n = len(idx)
    tris = mesh.triangles[idx]
    verts = mesh.vertices[tris]                    # (n, 3, 2)
    xc = verts.mean(axis=1)
    h = mesh.diameters[idx]
    area = mesh.areas[idx]
    kap = np.broadcast_to(np.asarray(spec.kappa(xc[:, 0], xc[:, 1]), float), (n,)).copy()
    kinv = 1.0 / kap

    # dof functionals on the monomials
    A = np.zeros((n, 8, 8))
    s2, w2 = quad.gauss01(2)
    for k in range(3):
        e = mesh.tri_edges[idx, k]
        a = mesh.vertices[mesh.edges[e, 0]]
        b = mesh.vertices[mesh.edges[e, 1]]
        d = b - a
        length = np.hypot(d[:, 0], d[:, 1])
        nrm = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
        pts_e = a[:, None, :] + s2[None, :, None] * d[:, None, :]
        wts = w2[None, :] * length[:, None]
        mono_n = np.einsum("nqmk,nk->nqm", _monomials_batch(pts_e, xc, h), nrm)
        A[:, 2 * k, :] = np.einsum("nq,nqm->nm", wts, mono_n)
        A[:, 2 * k + 1, :] = np.einsum("nq,nqm->nm", wts * (s2[None, :] - 0.5), mono_n)
    bary2, wref2 = quad._TRI_RULES[2]
    pts_i = np.einsum("qj,njk->nqk", np.asarray(bary2), verts)
    w_i = np.asarray(wref2)[None, :] * area[:, None]
    mono_i = _monomials_batch(pts_i, xc, h)
    A[:, 6, :] = np.einsum("nq,nqm->nm", w_i, mono_i[..., 0])
    A[:, 7, :] = np.einsum("nq,nqm->nm", w_i, mono_i[..., 1])
    Ainv = np.linalg.inv(A)

    bary, wref = quad._TRI_RULES[quad._DEGREE_ALIAS[volume_degree]]
    bary = np.asarray(bary)
    pts = np.einsum("qj,njk->nqk", bary, verts)    # (n, nq, 2)
    w = np.asarray(wref)[None, :] * area[:, None]
    mono = _monomials_batch(pts, xc, h)
    X = (pts[..., 0] - xc[:, None, 0]) / h[:, None]
    Y = (pts[..., 1] - xc[:, None, 1]) / h[:, None]
    divm = np.zeros(mono.shape[:3])
    divm[..., 1] = 1.0 / h[:, None]
    divm[..., 5] = 1.0 / h[:, None]
    divm[..., 6] = 3.0 * X / h[:, None]
    divm[..., 7] = 3.0 * Y / h[:, None]

    phi = np.einsum("nqmk,nmj->nqjk", mono, Ainv, optimize=True)
    divb = np.einsum("nqm,nmj->nqj", divm, Ainv, optimize=True)
    lam = bary                                      # hats equal barycentrics
    ghat = mesh.hat_gradients_all()[idx]
    grad_u = np.einsum("ni,nik->nk", u.values[tris], ghat)
    qv = np.stack([np.ones_like(X), X, Y], axis=-1)  # (n, nq, 3)

    M = np.einsum("nq,nqik,nqjk->nij", w * kinv[:, None], phi, phi, optimize=True)
    Bdiv = np.einsum("nq,nqm,nqj->nmj", w, qv, divb, optimize=True)
    phi_gu = np.einsum("nqjk,nk->nqj", phi, grad_u, optimize=True)
    Lblk = np.einsum("nq,qv,nqj->nvj", w, lam, phi_gu, optimize=True)
    fvals = np.asarray(spec.f(pts[..., 0].ravel(), pts[..., 1].ravel()), float)
    fvals = np.broadcast_to(fvals, pts[..., 0].ravel().shape).reshape(n, -1)
    qmom = np.einsum("nq,nqm->nm", w, qv)
    Rblk = np.einsum("nq,qv,nqm->nvm", w * fvals, lam, qv, optimize=True)
    Rblk -= np.einsum("nv,nm->nvm",
                      np.einsum("nvk,nk->nv", ghat, kap[:, None] * grad_u), qmom)

    cache = {}
    lam_shared = np.asarray(lam)
    for i, t in enumerate(idx):
        t = int(t)
        rule = quad.QuadratureRule(pts[i], w[i])
        cache[t] = ElementData(
            t, mesh.tri_edges[t].copy(), float(h[i]), float(area[i]),
            float(cls.active_area[t]), float(kap[i]), xc[i], Ainv[i], rule,
            phi[i], divb[i], lam_shared, ghat[i], grad_u[i], M[i], Bdiv[i],
            Lblk[i], Rblk[i], qmom_active=qmom[i])
    return cache


def build_element_cache(mesh: Mesh, cls: ActiveClassification, u: DiscreteSolution,
                        spec: ProblemSpec, volume_degree: int = quad.DEFAULT_VOLUME_DEGREE,
                        segment_degree: int = quad.DEFAULT_SEGMENT_DEGREE) -> dict:
    """All element-level ingredients the patch problems share."""
    active = [int(t) for t in cls.active_tris]
    plain = [t for t in active if t not in cls.pieces]
    cache = _batch_uncut_cache(mesh, cls, u, spec, plain, volume_degree)
    rules = {t: quad.cut_rule(cls.pieces[t], volume_degree) for t in cls.pieces
             if cls.status[t] != 2}
    for t in active:
        if t in cache:
            continue
        verts = mesh.tri_coords(t)
        xc = verts.mean(axis=0)
        h = float(mesh.diameters[t])
        kap = spec.kappa_element(mesh, t)
        A = _element_dof_matrix(mesh, t, xc, h)
        Ainv = np.linalg.inv(A)
        rule = rules[t]
        pts, w = rule.points, rule.weights
        mono = _monomials(pts, xc, h)
        phi = np.einsum("pmk,mj->pjk", mono, Ainv)
        dv = _monomial_div(pts, xc, h) @ Ainv
        lam = mesh.barycentric(t, pts) if len(pts) else np.zeros((0, 3))
        grad_hat = mesh.hat_gradients(t)
        grad_u = u.values[mesh.triangles[t]] @ grad_hat
        kinv = 1.0 / kap
        qv = _pressure_basis(pts, xc, h) if len(pts) else np.zeros((0, 3))

        M = np.einsum("p,pik,pjk->ij", w * kinv, phi, phi)
        Bdiv = np.einsum("p,pm,pj->mj", w, qv, dv)
        phi_gu = phi @ grad_u  # (nq, 8)
        Lblk = np.einsum("p,pv,pj->vj", w, lam, phi_gu)
        fvals = np.asarray(spec.f(pts[:, 0], pts[:, 1]), float) if len(pts) else np.zeros(0)
        Rblk = np.einsum("p,pv,pm->vm", w * fvals, lam, qv)
        Rblk -= np.outer(grad_hat @ (kap * grad_u), w @ qv)

        ed = ElementData(t, mesh.tri_edges[t].copy(), h, float(mesh.areas[t]),
                         float(cls.active_area[t]), kap, xc, Ainv, rule, phi, dv,
                         lam, grad_hat, grad_u, M, Bdiv, Lblk, Rblk,
                         qmom_active=w @ qv)

        segs = cls.segments.get(t)
        if segs:
            srules = [quad.segment_rule(s, segment_degree) for s in segs]
            spts = np.vstack([r.points for r in srules])
            sw = np.concatenate([r.weights for r in srules])
            normals = np.vstack([np.tile(s.outward_normal, (len(r.weights), 1))
                                 for s, r in zip(segs, srules)])
            mono_s = _monomials(spts, xc, h)
            phin = np.einsum("pmk,pk,mj->pj", mono_s, normals, Ainv, optimize=True)
            sq = _pressure_basis(spts, xc, h)
            slam = mesh.barycentric(t, spts)
            gvals = np.asarray(spec.g_feature(spts[:, 0], spts[:, 1]), float)
            ed.seg_rule = quad.QuadratureRule(spts, sw)
            ed.seg_phin = phin
            ed.seg_q = sq
            ed.seg_lam = slam
            ed.P = np.einsum("p,pi,pj->ij", sw * kinv, phin, phin)
            ed.Bseg = np.einsum("p,pm,pj->mj", sw, sq, phin)
            ed.Lseg = np.einsum("p,pv,pj->vj", sw * kinv * gvals, slam, phin)
            ed.Rseg = np.einsum("p,pv,pm->vm", sw * gvals, slam, sq)
        cache[t] = ed
    return cache


# ---------------------------------------------------------------------------
# patch problems
# ---------------------------------------------------------------------------

@dataclass
class PatchProblem:
    """Assembled patch system before elimination of the essential trace dofs."""

    patch: Patch
    h_a: float
    tris: list
    edge_list: list           # global edge ids in patch order
    M: np.ndarray
    B: np.ndarray             # mass-balance row WITH boundary coupling
    B0: np.ndarray            # mass-balance row without it
    L: np.ndarray
    R: np.ndarray
    R0: np.ndarray
    w: np.ndarray | None      # pressure gauge constraints (nq, k), None for free kinds
    fixed: np.ndarray         # bool per sigma dof
    fixed_values: np.ndarray
    is_cut: bool
    active_fraction: float
    ghost_edges: list = field(default_factory=list)

    @property
    def n_sigma(self) -> int:
        return len(self.fixed)

    @property
    def n_pressure(self) -> int:
        return 3 * len(self.tris)


@dataclass
class PatchSolution:
    patch: Patch
    edge_list: list
    tris: list
    sigma: np.ndarray        # all sigma dofs, essential values included
    pressure: np.ndarray
    mean_multiplier: np.ndarray


def _edge_has_active_part(mesh: Mesh, cls: ActiveClassification, e: int) -> bool:
    """True when the edge is not entirely buried inside included holes."""
    included = cls.included_features()
    if not included:
        return True
    a = mesh.vertices[mesh.edges[e][0]]
    b = mesh.vertices[mesh.edges[e][1]]
    spans = segment_active_spans(a, b, included)
    return sum(t1 - t0 for t0, t1 in spans) > 1e-12


def _patch_components(mesh: Mesh, cls: ActiveClassification, tris) -> np.ndarray:
    """Group patch elements connected through edges with an active part.

    A pressure mode that is constant on such a group and zero elsewhere pays
    no divergence penalty, so each group needs its own gauge constraint.
    """
    parent = list(range(len(tris)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    seen: dict[int, int] = {}
    for i, t in enumerate(tris):
        for e in mesh.tri_edges[t]:
            e = int(e)
            if e in seen:
                j = seen[e]
                if _edge_has_active_part(mesh, cls, e):
                    parent[find(i)] = find(j)
            else:
                seen[e] = i
    roots = {}
    comp = np.empty(len(tris), dtype=np.int64)
    for i in range(len(tris)):
        r = find(i)
        comp[i] = roots.setdefault(r, len(roots))
    return comp


def _essential_moments(mesh: Mesh, e: int, center_vertex: int, spec: ProblemSpec):
    """Trace moments of -hat*g_N on an outer Neumann edge, in the global frame."""
    a, b, tvec, n_e, length = _edge_frame(mesh, e)
    t_adj = mesh.edge_tris[e][0]
    mid = 0.5 * (a + b)
    centroid = mesh.tri_coords(t_adj).mean(axis=0)
    sign = -1.0 if float(n_e @ (centroid - mid)) > 0.0 else 1.0
    nodes, w = np.polynomial.legendre.leggauss(3)
    s = 0.5 * (nodes + 1.0)
    pts = a[None, :] + s[:, None] * (b - a)[None, :]
    wts = 0.5 * w * length
    g = np.asarray(spec.g_neumann(pts[:, 0], pts[:, 1]), float)
    va, vb = mesh.edges[e]
    hat = (1.0 - s) if center_vertex == va else s
    m0 = float(np.sum(wts * hat * g))
    m1 = float(np.sum(wts * (s - 0.5) * hat * g))
    return -sign * m0, -sign * m1


def build_patch_problem(pa: Patch, cache: dict, mesh: Mesh, cls: ActiveClassification,
                        spec: ProblemSpec, options: FluxOptions | None = None) -> PatchProblem:
    """Assemble the saddle system of one vertex patch from the element cache."""
    options = options or FluxOptions()
    tris = [int(t) for t in pa.elements]
    if not tris:
        raise ValueError(f"patch of vertex {pa.center_vertex} has no elements")
    h_a = max(cache[t].h for t in tris)

    edge_list = sorted({int(e) for t in tris for e in cache[t].edge_ids})
    edge_slot = {e: i for i, e in enumerate(edge_list)}
    ne, nt = len(edge_list), len(tris)
    ns = 2 * ne + 2 * nt
    nq = 3 * nt

    M = np.zeros((ns, ns))
    B = np.zeros((nq, ns))
    B0 = np.zeros((nq, ns))
    L = np.zeros(ns)
    R = np.zeros(nq)
    R0 = np.zeros(nq)
    w = np.zeros(nq)

    active_full = 0.0
    full = 0.0
    is_cut = False
    for i, t in enumerate(tris):
        ed = cache[t]
        cols = np.empty(8, dtype=np.int64)
        for k in range(3):
            s = edge_slot[int(ed.edge_ids[k])]
            cols[2 * k] = 2 * s
            cols[2 * k + 1] = 2 * s + 1
        cols[6] = 2 * ne + 2 * i
        cols[7] = 2 * ne + 2 * i + 1

        v_loc = int(np.flatnonzero(mesh.triangles[t] == pa.center_vertex)[0])
        r0, r1 = 3 * i, 3 * i + 3

        M[np.ix_(cols, cols)] += ed.M
        B[r0:r1, cols] += ed.Bdiv
        B0[r0:r1, cols] += ed.Bdiv
        L[cols] += -ed.Lblk[v_loc]
        R[r0:r1] += ed.Rblk[v_loc]
        R0[r0:r1] += ed.Rblk[v_loc]
        w[3 * i] = ed.area  # pressure basis is centroid-centered: only the
        # constant mode has a nonzero mean over the full triangle

        if ed.has_segments:
            is_cut = True
            M[np.ix_(cols, cols)] += ed.P / h_a
            B[r0:r1, cols] -= ed.Bseg
            L[cols] += -ed.Lseg[v_loc] / h_a
            R[r0:r1] += ed.Rseg[v_loc]
        active_full += ed.area_active
        full += ed.area

    fixed = np.zeros(ns, dtype=bool)
    fixed_values = np.zeros(ns)
    for e in pa.boundary_zero:
        s = edge_slot[int(e)]
        fixed[2 * s] = fixed[2 * s + 1] = True
    if pa.kind in (PATCH_NEUMANN, PATCH_NEUMANN_CORNER):
        for e in pa.boundary_psi:
            if mesh.edge_tag(int(e)) == NEUMANN:
                s = edge_slot[int(e)]
                m0, m1 = _essential_moments(mesh, int(e), pa.center_vertex, spec)
                fixed[2 * s] = fixed[2 * s + 1] = True
                fixed_values[2 * s] = m0
                fixed_values[2 * s + 1] = m1

    use_mean = pa.kind in (PATCH_INTERIOR, PATCH_NEUMANN)
    W = None
    if use_mean:
        comp = _patch_components(mesh, cls, tris) if is_cut else np.zeros(nt, dtype=int)
        k = int(comp.max()) + 1
        if k == 1:
            W = w[:, None]
        else:
            # the active region is split by the holes: gauge each group with
            # its active-part moments so the balance of uncovered triangles
            # elsewhere is untouched
            W = np.zeros((nq, k))
            for i, t in enumerate(tris):
                W[3 * i:3 * i + 3, comp[i]] = cache[t].qmom_active
    prob = PatchProblem(pa, h_a, tris, edge_list, M, B, B0, L, R, R0,
                        W, fixed, fixed_values,
                        is_cut, active_full / max(full, 1e-300))

    if options.check_compatibility and pa.kind == PATCH_INTERIOR and not is_cut:
        balance = float(R.reshape(nt, 3)[:, 0].sum())
        scale = max(1.0, float(np.abs(R).max(initial=0.0)))
        if abs(balance) > 1e-9 * scale:
            raise AssertionError(
                f"patch {pa.center_vertex}: source/flux balance {balance:.3e} "
                "nonzero on an uncut interior patch")

    if options.stabilization == STAB_GHOST:
        prob.ghost_edges = _ghost_edge_blocks(pa, cache, mesh, cls, edge_slot, ne, tris)
    return prob


def _ghost_edge_blocks(pa: Patch, cache, mesh: Mesh, cls: ActiveClassification,
                       edge_slot, ne, tris):
    """Jump matrices across interior patch edges touching cut triangles."""
    tri_set = {int(t): i for i, t in enumerate(tris)}
    counts: dict[int, list[int]] = {}
    for t in tris:
        for e in cache[t].edge_ids:
            counts.setdefault(int(e), []).append(int(t))
    blocks = []
    ns = 2 * ne + 2 * len(tris)
    nq = 3 * len(tris)
    for e, adj in counts.items():
        if len(adj) != 2:
            continue
        if not any(cls.status[t] == CUT for t in adj):
            continue
        a, b, tvec, n_e, length = _edge_frame(mesh, e)
        nodes, wq = np.polynomial.legendre.leggauss(3)
        s = 0.5 * (nodes + 1.0)
        pts = a[None, :] + s[:, None] * (b - a)[None, :]
        wts = 0.5 * wq * length
        Rx = np.zeros((3, ns)); Ry = np.zeros((3, ns))
        Dx = np.zeros((3, ns)); Dy = np.zeros((3, ns))
        Q = np.zeros((3, nq)); DQ = np.zeros((3, nq))
        for side, t in enumerate(adj):
            ed = cache[t]
            sign = 1.0 if side == 0 else -1.0
            cols = np.empty(8, dtype=np.int64)
            for k in range(3):
                sl = edge_slot[int(ed.edge_ids[k])]
                cols[2 * k] = 2 * sl
                cols[2 * k + 1] = 2 * sl + 1
            i = tri_set[t]
            cols[6] = 2 * ne + 2 * i
            cols[7] = 2 * ne + 2 * i + 1
            mono = _monomials(pts, ed.centroid, ed.h)
            phi = np.einsum("pmk,mj->pjk", mono, ed.Ainv)
            dmono = _monomial_dirderiv(pts, ed.centroid, ed.h, n_e)
            dphi = np.einsum("pmk,mj->pjk", dmono, ed.Ainv)
            for j in range(8):
                Rx[:, cols[j]] += sign * phi[:, j, 0]
                Ry[:, cols[j]] += sign * phi[:, j, 1]
                Dx[:, cols[j]] += sign * dphi[:, j, 0]
                Dy[:, cols[j]] += sign * dphi[:, j, 1]
            qb = _pressure_basis(pts, ed.centroid, ed.h)
            gq = np.array([0.0, n_e[0] / ed.h, n_e[1] / ed.h])
            for m in range(3):
                Q[:, 3 * i + m] += sign * qb[:, m]
                DQ[:, 3 * i + m] += sign * gq[m]
        blocks.append((wts, Rx, Ry, Dx, Dy, Q, DQ))
    return blocks


def _ghost_matrices(prob: PatchProblem, beta1: float, beta2: float):
    ns, nq = prob.n_sigma, prob.n_pressure
    J1 = np.zeros((ns, ns))
    J2 = np.zeros((nq, nq))
    h = prob.h_a
    for wts, Rx, Ry, Dx, Dy, Q, DQ in prob.ghost_edges:
        W = np.diag(wts)
        J1 += beta1 * (h * (Rx.T @ W @ Rx + Ry.T @ W @ Ry)
                       + h ** 3 * (Dx.T @ W @ Dx + Dy.T @ W @ Dy))
        J2 += beta2 * ((1.0 / h) * (Q.T @ W @ Q) + h * (DQ.T @ W @ DQ))
    return J1, J2


def _solve_reduced(prob: PatchProblem, J1=None, J2=None, asymmetric=False) -> PatchSolution:
    free = ~prob.fixed
    fi = np.flatnonzero(free)
    ci = np.flatnonzero(prob.fixed)
    sc = prob.fixed_values[ci]
    nf, nq = len(fi), prob.n_pressure
    extra = prob.w.shape[1] if prob.w is not None else 0
    n = nf + nq + extra
    K = np.zeros((n, n))
    rhs = np.zeros(n)

    M = prob.M if J1 is None else prob.M + J1
    K[:nf, :nf] = M[np.ix_(fi, fi)]
    rhs[:nf] = prob.L[fi] - M[np.ix_(fi, ci)] @ sc
    # the first-block coupling always carries the boundary term
    K[:nf, nf:nf + nq] = -prob.B[:, fi].T

    if asymmetric:
        K[nf:nf + nq, :nf] = prob.B0[:, fi]
        rhs[nf:nf + nq] = prob.R0 - prob.B0[:, ci] @ sc
        if extra:
            K[nf:nf + nq, nf + nq:] = prob.w
            K[nf + nq:, nf:nf + nq] = prob.w.T
        x = solve_saddle(K, rhs, sym=False, context=f"patch {prob.patch.center_vertex}")
    else:
        K[nf:nf + nq, :nf] = -prob.B[:, fi]
        rhs[nf:nf + nq] = -(prob.R - prob.B[:, ci] @ sc)
        if J2 is not None:
            K[nf:nf + nq, nf:nf + nq] = J2
        if extra:
            K[nf:nf + nq, nf + nq:] = -prob.w
            K[nf + nq:, nf:nf + nq] = -prob.w.T
        x = solve_saddle(K, rhs, sym=True, context=f"patch {prob.patch.center_vertex}")

    sigma = np.zeros(prob.n_sigma)
    sigma[fi] = x[:nf]
    sigma[ci] = sc
    pressure = x[nf:nf + nq]
    mu = x[nf + nq:] if extra else np.zeros(0)
    return PatchSolution(prob.patch, prob.edge_list, prob.tris, sigma, pressure, mu)


def solve_patch(prob: PatchProblem) -> PatchSolution:
    """Solve the symmetric, unstabilized patch problem."""
    return _solve_reduced(prob)


def solve_patch_stabilized(prob: PatchProblem, beta1: float, beta2: float) -> PatchSolution:
    """Solve with jump penalties across edges of cut triangles."""
    if beta1 < 0 or beta2 < 0:
        raise ValueError("stabilization weights must be non-negative")
    if beta1 == 0.0 and beta2 == 0.0:
        return solve_patch(prob)
    J1, J2 = _ghost_matrices(prob, beta1, beta2)
    return _solve_reduced(prob, J1=J1, J2=J2)


def solve_patch_asymmetric(prob: PatchProblem) -> PatchSolution:
    """Variant without the boundary coupling in the mass-balance row."""
    return _solve_reduced(prob, asymmetric=True)


# ---------------------------------------------------------------------------
# global field
# ---------------------------------------------------------------------------

@dataclass
class GlobalFlux:
    """H(div)-conforming RT1 field accumulated from the patch contributions."""

    mesh: Mesh
    classification: ActiveClassification
    edge_dofs: np.ndarray    # (n_edges, 2)
    cell_dofs: np.ndarray    # (n_tris, 2)
    coeffs: np.ndarray       # (n_tris, 8) monomial coefficients, active tris
    cache: dict
    skipped_patches: tuple = ()

    def element_dofs(self, t: int) -> np.ndarray:
        ed = self.cache[int(t)]
        out = np.empty(8)
        for k in range(3):
            out[2 * k:2 * k + 2] = self.edge_dofs[int(ed.edge_ids[k])]
        out[6:8] = self.cell_dofs[int(t)]
        return out

    def evaluate(self, t: int, pts) -> np.ndarray:
        ed = self.cache[int(t)]
        mono = _monomials(pts, ed.centroid, ed.h)
        return np.einsum("pmk,m->pk", mono, self.coeffs[int(t)])

    def divergence(self, t: int, pts) -> np.ndarray:
        ed = self.cache[int(t)]
        return _monomial_div(pts, ed.centroid, ed.h) @ self.coeffs[int(t)]

    def normal_trace(self, t: int, pts, normal) -> np.ndarray:
        vals = self.evaluate(t, pts)
        normal = np.asarray(normal, float)
        if normal.ndim == 1:
            return vals @ normal
        return np.einsum("pk,pk->p", vals, normal)

    def dump(self) -> str:
        lines = []
        for t in self.classification.active_tris:
            c = self.coeffs[int(t)]
            lines.append("t %d %s" % (t, " ".join(repr(v) for v in c)))
        return "\n".join(lines) + "\n"


def accumulate(solutions, mesh: Mesh, cls: ActiveClassification, cache: dict,
               skipped=()) -> GlobalFlux:
    """Sum patch contributions into a single edge/cell dof table."""
    edge_dofs = np.zeros((len(mesh.edges), 2))
    cell_dofs = np.zeros((mesh.n_triangles, 2))
    for sol in solutions:
        ns_e = len(sol.edge_list)
        for i, e in enumerate(sol.edge_list):
            edge_dofs[e] += sol.sigma[2 * i:2 * i + 2]
        for i, t in enumerate(sol.tris):
            cell_dofs[t] += sol.sigma[2 * ns_e + 2 * i:2 * ns_e + 2 * i + 2]
    coeffs = np.full((mesh.n_triangles, 8), np.nan)
    flux = GlobalFlux(mesh, cls, edge_dofs, cell_dofs, coeffs, cache, tuple(skipped))
    for t in cls.active_tris:
        coeffs[int(t)] = cache[int(t)].Ainv @ flux.element_dofs(int(t))
    return flux


def reconstruct_flux(mesh: Mesh, cls: ActiveClassification, u: DiscreteSolution,
                     spec: ProblemSpec, options: FluxOptions | None = None) -> GlobalFlux:
    """Drive the patch solves over all vertices of the active mesh."""
    options = options or FluxOptions()
    cache = build_element_cache(mesh, cls, u, spec,
                                options.volume_degree, options.segment_degree)
    vertices = np.unique(mesh.triangles[cls.active_tris])
    solutions = []
    skipped = []
    for v in vertices:
        pa = make_patch(mesh, int(v), cls)
        prob = build_patch_problem(pa, cache, mesh, cls, spec, options)
        if options.stabilization == STAB_DISCARD and prob.is_cut \
                and prob.active_fraction < options.discard_fraction:
            skipped.append(int(v))
            continue
        try:
            if options.variant == "asymmetric":
                sol = solve_patch_asymmetric(prob)
            elif options.stabilization == STAB_GHOST and prob.is_cut:
                sol = solve_patch_stabilized(prob, options.beta1, options.beta2)
            else:
                sol = solve_patch(prob)
        except SaddleSolveError:
            log.exception("patch solve failed at vertex %d", v)
            raise
        solutions.append(sol)
    if skipped:
        log.info("discarded %d badly cut patches", len(skipped))
    return accumulate(solutions, mesh, cls, cache, skipped)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def divergence_misfit(flux: GlobalFlux, f, cls: ActiveClassification | None = None) -> np.ndarray:
    """Per-triangle L2 norm of (f - div sigma) over the active region."""
    cls = cls or flux.classification
    out = np.zeros(flux.mesh.n_triangles)
    for t in cls.active_tris:
        t = int(t)
        rule = flux.cache[t].rule
        if not len(rule.weights):
            continue
        fv = np.asarray(f(rule.points[:, 0], rule.points[:, 1]), float)
        dv = flux.divergence(t, rule.points)
        out[t] = np.sqrt(float(np.sum(rule.weights * (fv - dv) ** 2)))
    return out


def edge_normal_jumps(flux: GlobalFlux) -> dict:
    """L2 norm of the normal-trace jump across each interior active edge."""
    mesh, cls = flux.mesh, flux.classification
    out = {}
    for e in range(len(mesh.edges)):
        t1, t2 = mesh.edge_tris[e]
        if t2 < 0 or cls.status[t1] == INACTIVE or cls.status[t2] == INACTIVE:
            continue
        a, b, tvec, n, length = _edge_frame(mesh, e)
        nodes, w = np.polynomial.legendre.leggauss(3)
        s = 0.5 * (nodes + 1.0)
        pts = a[None, :] + s[:, None] * (b - a)[None, :]
        wts = 0.5 * w * length
        jump = flux.normal_trace(int(t1), pts, n) - flux.normal_trace(int(t2), pts, n)
        out[e] = float(np.sqrt(np.sum(wts * jump ** 2)))
    return out


def neumann_trace_error(flux: GlobalFlux, spec: ProblemSpec) -> dict:
    """L2 norm of (sigma.n_out + g_N) on outer Neumann edges clear of holes."""
    from .primal import neumann_intervals

    mesh, cls = flux.mesh, flux.classification
    out = {}
    for e in mesh.boundary_edges(NEUMANN):
        e = int(e)
        t = int(mesh.edge_tris[e][0])
        if cls.status[t] == INACTIVE:
            continue
        _, _, spans = neumann_intervals(mesh, cls, e)
        if spans != [(0.0, 1.0)]:
            continue
        a, b, tvec, n_e, length = _edge_frame(mesh, e)
        mid = 0.5 * (a + b)
        centroid = mesh.tri_coords(t).mean(axis=0)
        n_out = -n_e if float(n_e @ (centroid - mid)) > 0.0 else n_e
        nodes, w = np.polynomial.legendre.leggauss(3)
        s = 0.5 * (nodes + 1.0)
        pts = a[None, :] + s[:, None] * (b - a)[None, :]
        wts = 0.5 * w * length
        g = np.asarray(spec.g_neumann(pts[:, 0], pts[:, 1]), float)
        vals = flux.normal_trace(t, pts, n_out) + g
        out[e] = float(np.sqrt(np.sum(wts * vals ** 2)))
    return out
