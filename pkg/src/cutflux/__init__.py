"""Adaptive cut-cell finite elements for geometries with removable holes.

The solver works on a background mesh of the filled-in domain, re-includes
polygonal holes ("features") without remeshing, reconstructs a locally
equilibrated boundary flux, and drives a combined mesh/geometry adaptive loop
from the resulting error indicators.
"""

from .geometry import (
    Feature,
    Polygon,
    Segment,
    clip_triangle,
    feature_segments_in_triangle,
    make_feature,
    point_in_polygon,
    polygon_area,
    regular_polygon,
)
from .mesh import (
    ActiveClassification,
    Mesh,
    Patch,
    build_structured_mesh,
    classify_active,
    hat_function,
    patch,
    refine,
    uniform_refine,
)
from .quadrature import QuadratureRule, cut_rule, segment_rule, triangle_rule
from .primal import DiscreteSolution, ProblemSpec, assemble_primal, energy_error, solve_primal
from .flux import FluxOptions, GlobalFlux, divergence_misfit, reconstruct_flux
from .estimator import EstimatorReport, build_report, element_indicators, feature_indicator, mismatch_weight
from .adaptive import AdaptiveConfig, MarkItem, doerfler_mark, run, step

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
