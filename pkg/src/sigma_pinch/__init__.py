"""Numerical conformal geometry on gridded charts.

Curvature of explicit metrics in dimensions 3 and 4, elementary symmetric
functions of curvature eigenvalues and their cone structure, conformal
change diagnostics with fourth-order interior and third-order boundary
operators, a continuity-path solver for pinched conformal metrics, and a
boundary-value functional minimizer.
"""

__version__ = "0.1.0"

from .grid import (
    Axis,
    ChartGrid,
    Closure,
    MetricField,
    ScalarField,
    SymTensor2Field,
    differentiate,
    integrate_boundary,
    integrate_volume,
    load_snapshot,
    save_snapshot,
)
from .curvature import CurvatureBundle, compute_curvature
from .catalog import make_grid, make_metric, manifold_names
from .symfunc import cone_check, cone_lemma_suite, sigma_field, sigma_k
from .conformal import (
    ConformalFactor,
    InvariantReport,
    QTBundle,
    conformal_laws_check,
    conformal_rebuild,
    invariants,
    p3_t_boundary,
    paneitz_q,
    radial_conformal_factor,
)
from .pinching import PinchCondition, PinchReport, diagnose, margerin_wp
from .solver import (
    ConeViolationError,
    ContinuationState,
    RHSField,
    SolverConfig,
    StepUnderflowError,
    continuity_solve,
    linearize,
    residual,
    select_delta,
    verify_conclusions,
)
from .minimizer import (
    DiscreteP43,
    FunctionalState,
    MinimizeConfig,
    assemble_p43,
    bochner_decomposition_check,
    el_residual,
    ii_value_grad,
    minimize_ii,
)

__all__ = [
    "Axis",
    "ChartGrid",
    "Closure",
    "ConformalFactor",
    "CurvatureBundle",
    "InvariantReport",
    "MetricField",
    "PinchCondition",
    "PinchReport",
    "QTBundle",
    "ScalarField",
    "SymTensor2Field",
    "ConeViolationError",
    "ContinuationState",
    "DiscreteP43",
    "FunctionalState",
    "MinimizeConfig",
    "RHSField",
    "SolverConfig",
    "StepUnderflowError",
    "assemble_p43",
    "bochner_decomposition_check",
    "compute_curvature",
    "cone_check",
    "cone_lemma_suite",
    "conformal_laws_check",
    "diagnose",
    "el_residual",
    "margerin_wp",
    "conformal_rebuild",
    "continuity_solve",
    "differentiate",
    "ii_value_grad",
    "integrate_boundary",
    "integrate_volume",
    "invariants",
    "linearize",
    "load_snapshot",
    "make_grid",
    "make_metric",
    "manifold_names",
    "minimize_ii",
    "p3_t_boundary",
    "residual",
    "paneitz_q",
    "radial_conformal_factor",
    "save_snapshot",
    "select_delta",
    "sigma_field",
    "sigma_k",
    "verify_conclusions",
    "__version__",
]
