"""Solve / estimate / mark / refine loop over mesh and geometry.

Marking is a bulk (Doerfler) selection over a single pool holding both the
active triangles and the still-neglected holes: marked triangles are bisected,
marked holes are carved into the geometry for the next iteration.  Holes are
never removed again once included.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .estimator import EstimatorReport, build_report
from .flux import FluxOptions, GlobalFlux, reconstruct_flux
from .mesh import ActiveClassification, Mesh, classify_active, refine, uniform_refine
from .primal import DiscreteSolution, ProblemSpec, energy_error, solve_primal

log = logging.getLogger(__name__)

MODE_COMBINED = "combined"
MODE_H_ONLY = "h_only"

# Warn when a neglected hole spans more than this many local mesh sizes.
FEATURE_COVER_RATIO = 10.0


@dataclass(frozen=True)
class MarkItem:
    """One markable entity: an active triangle or a neglected hole."""

    kind: str  # "element" | "feature"
    ident: int
    value: float  # squared indicator

    def __post_init__(self):
        if self.value < 0.0:
            raise ValueError("squared indicators cannot be negative")


def doerfler_mark(items, theta: float) -> list[MarkItem]:
    """Smallest prefix of the sorted indicators capturing a theta-fraction.

    Sorting is by squared indicator, descending; ties prefer features and then
    lower ids, which keeps the selection deterministic.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    items = list(items)
    if not items:
        return []
    total = sum(it.value for it in items)
    if total <= 0.0:
        return []
    order = sorted(items, key=lambda it: (-it.value, it.kind != "feature", it.ident))
    target = theta * total
    chosen, acc = [], 0.0
    for it in order:
        if it.value <= 0.0:
            break
        chosen.append(it)
        acc += it.value
        if acc >= target:
            break
    return chosen


@dataclass
class AdaptiveConfig:
    theta: float = 0.3
    alphas: tuple = (1.0, 1.0, 1.0)
    mode: str = MODE_COMBINED
    flux_options: FluxOptions = field(default_factory=FluxOptions)
    max_dofs: int = 5000
    max_iterations: int = 200
    keep_states: bool = True


@dataclass
class AdaptiveState:
    iteration: int
    mesh: Mesh
    features: tuple
    classification: ActiveClassification | None = None
    solution: DiscreteSolution | None = None
    flux: GlobalFlux | None = None
    report: EstimatorReport | None = None

    @property
    def included_ids(self):
        return tuple(f.id for f in self.features if f.included)


@dataclass
class IterationRecord:
    iteration: int
    n_dofs: int
    eta_div: float
    eta_g: float
    eta_sigma: float
    eta_num: float
    eta_def: float
    eta_total: float
    n_included: int
    error: float | None = None
    marked_elements: int = 0
    marked_features: tuple = ()


@dataclass
class RunResult:
    records: list
    states: list
    stagnated: bool = False

    def column(self, name):
        return [getattr(r, name) for r in self.records]


def _estimate(state: AdaptiveState, spec: ProblemSpec, config: AdaptiveConfig) -> AdaptiveState:
    cls = classify_active(state.mesh, state.features)
    sol = solve_primal(spec, state.mesh, cls)
    flux = reconstruct_flux(state.mesh, cls, sol, spec, config.flux_options)
    report = build_report(flux, sol, spec, config.alphas)
    return replace(state, classification=cls, solution=sol, flux=flux, report=report)


def _check_feature_cover(state: AdaptiveState) -> None:
    mesh, cls = state.mesh, state.classification
    boxes = mesh.vertices[mesh.triangles]
    lo, hi = boxes.min(axis=1), boxes.max(axis=1)
    for f in cls.neglected_features():
        fx0, fy0, fx1, fy1 = f.shape.bbox()
        hit = np.flatnonzero((lo[:, 0] <= fx1) & (hi[:, 0] >= fx0)
                             & (lo[:, 1] <= fy1) & (hi[:, 1] >= fy0))
        hit = [t for t in hit if cls.status[t] != 2]
        if not hit:
            continue
        h_min = float(mesh.diameters[hit].min())
        h_f = f.shape.diameter
        if h_f > FEATURE_COVER_RATIO * h_min:
            log.warning(
                "neglected feature %d spans %.1f local mesh sizes; its "
                "indicator constant may degrade", f.id, h_f / h_min)


def step(state: AdaptiveState, spec: ProblemSpec, config: AdaptiveConfig):
    """One solve/estimate/mark/refine sweep; returns (new_state, record)."""
    if state.report is None:
        state = _estimate(state, spec, config)
    report = state.report
    _check_feature_cover(state)

    items = [MarkItem("element", int(t), float(report.element_marker_sq[t]))
             for t in state.classification.active_tris]
    if config.mode == MODE_COMBINED:
        items += [MarkItem("feature", fid, val)
                  for fid, val in report.feature_marker_sq.items()]
    marked = doerfler_mark(items, config.theta)

    marked_tris = [it.ident for it in marked if it.kind == "element"]
    marked_feats = {it.ident for it in marked if it.kind == "feature"}

    record = IterationRecord(
        iteration=state.iteration,
        n_dofs=state.solution.n_dofs,
        eta_div=report.eta_div_total,
        eta_g=report.eta_g_total,
        eta_sigma=report.eta_sigma_total,
        eta_num=report.eta_num,
        eta_def=report.eta_def,
        eta_total=report.eta_total,
        n_included=len(state.included_ids),
        marked_elements=len(marked_tris),
        marked_features=tuple(sorted(marked_feats)),
    )

    new_mesh = refine(state.mesh, marked_tris) if marked_tris else state.mesh
    new_features = tuple(f.with_status("included") if f.id in marked_feats else f
                         for f in state.features)
    new_state = AdaptiveState(state.iteration + 1, new_mesh, new_features)
    return _estimate(new_state, spec, config), record


def run(spec: ProblemSpec, mesh: Mesh, features, config: AdaptiveConfig) -> RunResult:
    """Iterate until the dof budget is exhausted, indicators vanish, or the
    estimator stagnates (three steps with no relative change)."""
    state = _estimate(AdaptiveState(0, mesh, tuple(features)), spec, config)
    records: list[IterationRecord] = []
    states: list[AdaptiveState] = []
    stagnated = False
    last_eta = None
    flat_steps = 0

    for _ in range(config.max_iterations):
        if config.keep_states:
            states.append(state)
        new_state, record = step(state, spec, config)
        records.append(record)
        log.info("iter %-3d N=%-6d eta=%.4e (num %.3e, def %.3e) included=%d",
                 record.iteration, record.n_dofs, record.eta_total,
                 record.eta_num, record.eta_def, record.n_included)
        if record.eta_total <= 0.0:
            break
        if record.n_dofs >= config.max_dofs:
            break
        if last_eta is not None and abs(record.eta_total - last_eta) <= 1e-12 * last_eta:
            flat_steps += 1
            if flat_steps >= 3:
                stagnated = True
                log.warning("estimator stagnated for 3 iterations; stopping")
                break
        else:
            flat_steps = 0
        last_eta = record.eta_total
        state = new_state
    return RunResult(records, states, stagnated)


def attach_reference_errors(result: RunResult, spec: ProblemSpec,
                            extra_levels: int = 3) -> DiscreteSolution:
    """Fill the error column against a solve on a uniformly refined mesh.

    The reference mesh is the final adaptive mesh refined ``extra_levels``
    more times with every hole included, so it is nested in every recorded
    mesh; returns the reference solution.
    """
    if not result.states:
        raise ValueError("run was executed with keep_states=False")
    if extra_levels < 1:
        raise ValueError("the reference needs at least one extra refinement level")
    final = result.states[-1]
    ref_mesh = uniform_refine(final.mesh, extra_levels)
    ref_features = tuple(f.with_status("included") for f in final.features)
    ref_cls = classify_active(ref_mesh, ref_features)
    ref_sol = solve_primal(spec, ref_mesh, ref_cls)
    for record, state in zip(result.records, result.states):
        record.error = energy_error(state.solution, ref_sol, spec.kappa)
    return ref_sol
