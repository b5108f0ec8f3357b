"""Error indicators built from the reconstructed flux.

Three element-local terms measure the numerical error: the divergence misfit
and the boundary-datum mismatch (both supported on crossed triangles only),
and the difference between the reconstructed flux and the discrete gradient.
A fourth, feature-local term measures the impact of every hole still absent
from the geometry, by comparing the reconstructed normal flux along the
would-be hole boundary with the Neumann datum that would be prescribed there.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import quadrature as quad
from .flux import GlobalFlux
from .geometry import Feature, triangulate
from .mesh import CUT, ActiveClassification, Mesh, assign_feature_boundary
from .primal import DiscreteSolution, ProblemSpec

_FIXED_POINT = None


def _log_floor() -> float:
    """Unique positive solution of z = -log(z), cached after a fixed-point run."""
    global _FIXED_POINT
    if _FIXED_POINT is None:
        z = 0.5
        for _ in range(200):
            nz = 0.5 * (z + math.exp(-z))
            if abs(nz - z) < 1e-16:
                z = nz
                break
            z = nz
        _FIXED_POINT = z
    return _FIXED_POINT


def mismatch_weight(length: float) -> float:
    """Weight of the mean flux mismatch on a boundary piece of given length.

    Grows like sqrt(-log(length)) as the piece shrinks and never drops below
    the floor set by the fixed point of z = -log(z).
    """
    if length <= 0.0:
        raise ValueError("boundary length must be positive")
    return math.sqrt(max(-math.log(length), _log_floor()))


def feature_cover(mesh: Mesh, cls: ActiveClassification, feature: Feature):
    """Hole-boundary pieces of a neglected feature with their host triangles."""
    return assign_feature_boundary(mesh, feature, cls.active_area)


def feature_indicator(feature: Feature, flux: GlobalFlux, spec: ProblemSpec,
                      cover=None, segment_degree: int = quad.DEFAULT_SEGMENT_DEGREE) -> float:
    """Indicator of one neglected hole.

    Squares the fluctuation of (datum + reconstructed normal flux) along the
    hole boundary, plus a logarithmically weighted term for the data-driven
    mean imbalance of the hole.
    """
    if feature.included:
        raise ValueError("feature indicator is defined for neglected features only")
    mesh, cls = flux.mesh, flux.classification
    if cover is None:
        cover = feature_cover(mesh, cls, feature)

    pts_all, w_all, vals = [], [], []
    for t, seg in cover:
        rule = quad.segment_rule(seg, segment_degree)
        g = np.asarray(spec.g_feature(rule.points[:, 0], rule.points[:, 1]), float)
        tr = flux.normal_trace(int(t), rule.points, seg.outward_normal)
        pts_all.append(rule.points)
        w_all.append(rule.weights)
        vals.append(g + tr)
    w = np.concatenate(w_all)
    d = np.concatenate(vals)
    glen = float(w.sum())
    if glen <= 0.0:
        raise ValueError(f"feature {feature.id} has empty interior boundary")
    mean_h = float(np.sum(w * d)) / glen
    fluct_sq = float(np.sum(w * (d - mean_h) ** 2))

    # data-driven mean: boundary datum minus source over the hole minus the
    # outer-boundary datum along the lid
    g_int = 0.0
    for seg in feature.gamma_tilde:
        rule = quad.segment_rule(seg, segment_degree)
        g_int += float(np.sum(rule.weights
                              * np.asarray(spec.g_feature(rule.points[:, 0], rule.points[:, 1]), float)))
    f_int = 0.0
    for tri in triangulate(feature.shape):
        rule = quad.triangle_rule(tri, quad.DEFAULT_VOLUME_DEGREE)
        f_int += float(np.sum(rule.weights
                              * np.asarray(spec.f(rule.points[:, 0], rule.points[:, 1]), float)))
    g0_int = 0.0
    for seg in feature.gamma_zero:
        rule = quad.segment_rule(seg, segment_degree)
        g0_int += float(np.sum(rule.weights
                               * np.asarray(spec.g_neumann(rule.points[:, 0], rule.points[:, 1]), float)))
    mean_data = (g_int - f_int - g0_int) / glen

    c = mismatch_weight(glen)
    eta_sq = glen * fluct_sq + (c * glen * abs(mean_data)) ** 2
    return math.sqrt(eta_sq)


def element_indicators(flux: GlobalFlux, u: DiscreteSolution, spec: ProblemSpec):
    """Per-triangle indicator triple (divergence, boundary datum, flux gap).

    The first two are exactly zero away from crossed triangles; the third is
    the coefficient-weighted L2 gap between the reconstructed flux and the
    discrete gradient over the active region.
    """
    mesh, cls = flux.mesh, flux.classification
    nt = mesh.n_triangles
    eta_div = np.zeros(nt)
    eta_g = np.zeros(nt)
    eta_sigma = np.zeros(nt)
    for t in cls.active_tris:
        t = int(t)
        ed = flux.cache[t]
        rule = ed.rule
        if len(rule.weights):
            sig = np.einsum("pmk,m->pk", _mono(ed, rule.points), flux.coeffs[t])
            gap = sig + ed.kappa * ed.grad_u[None, :]
            eta_sigma[t] = math.sqrt(float(
                np.sum(rule.weights / ed.kappa * np.einsum("pk,pk->p", gap, gap))))
        if cls.status[t] == CUT:
            h_k = float(mesh.diameters[t])
            fv = np.asarray(spec.f(rule.points[:, 0], rule.points[:, 1]), float)
            dv = flux.divergence(t, rule.points)
            eta_div[t] = h_k * math.sqrt(float(np.sum(rule.weights * (fv - dv) ** 2)))
            if ed.has_segments:
                srule = ed.seg_rule
                g = np.asarray(spec.g_feature(srule.points[:, 0], srule.points[:, 1]), float)
                tr = ed.seg_phin @ flux.element_dofs(t)
                eta_g[t] = math.sqrt(h_k) * math.sqrt(float(
                    np.sum(srule.weights * (g + tr) ** 2)))
    return eta_div, eta_g, eta_sigma


def _mono(ed, pts):
    from .flux import _monomials

    return _monomials(pts, ed.centroid, ed.h)


@dataclass
class EstimatorReport:
    """All local indicators with their aggregated totals.

    ``eta_num`` is the sum of the three root-sum-square element groups (the
    divergence and datum groups carrying their weights), ``eta_def`` the
    weighted root-sum-square of the feature indicators, and
    ``eta_total = eta_num + eta_def``.
    """

    eta_div: np.ndarray
    eta_g: np.ndarray
    eta_sigma: np.ndarray
    eta_feature: dict
    alphas: tuple = (1.0, 1.0, 1.0)
    eta_div_total: float = 0.0
    eta_g_total: float = 0.0
    eta_sigma_total: float = 0.0
    eta_num: float = 0.0
    eta_def: float = 0.0
    eta_total: float = 0.0
    element_marker_sq: np.ndarray = field(default=None)
    feature_marker_sq: dict = field(default_factory=dict)

    def recompute_totals(self) -> "EstimatorReport":
        a1, a2, a3 = self.alphas
        self.eta_div_total = math.sqrt(a1 * float(np.sum(self.eta_div ** 2)))
        self.eta_g_total = math.sqrt(a2 * float(np.sum(self.eta_g ** 2)))
        self.eta_sigma_total = math.sqrt(float(np.sum(self.eta_sigma ** 2)))
        self.eta_num = self.eta_div_total + self.eta_g_total + self.eta_sigma_total
        self.eta_def = math.sqrt(a3 * sum(v ** 2 for v in self.eta_feature.values()))
        self.eta_total = self.eta_num + self.eta_def
        self.element_marker_sq = (a1 * self.eta_div ** 2 + a2 * self.eta_g ** 2
                                  + self.eta_sigma ** 2)
        self.feature_marker_sq = {k: a3 * v ** 2 for k, v in self.eta_feature.items()}
        return self


def build_report(flux: GlobalFlux, u: DiscreteSolution, spec: ProblemSpec,
                 alphas=(1.0, 1.0, 1.0)) -> EstimatorReport:
    """Evaluate every element and feature indicator and aggregate the totals."""
    if any(a < 0 for a in alphas):
        raise ValueError("indicator weights must be non-negative")
    eta_div, eta_g, eta_sigma = element_indicators(flux, u, spec)
    eta_feature = {}
    for f in flux.classification.neglected_features():
        eta_feature[f.id] = feature_indicator(f, flux, spec)
    report = EstimatorReport(eta_div, eta_g, eta_sigma, eta_feature, tuple(alphas))
    return report.recompute_totals()
