"""Fixed-shape regime: shape densities, discretization, overshoot law,
renewal identity checks and fixed-shape runs."""

from .discretize import (
    DiscretizationFit,
    DiscretizedShape,
    QuadratureError,
    bin_masses,
    discretize,
    l1_discretization_error,
    strong_discretization_check,
)
from .fixed_shape import (
    FixedShapeResult,
    LimitFormulaReport,
    epsilon_integral,
    run_fixed_shape,
    verify_limit_formula,
)
from .overshoot import (
    DRIReport,
    OvershootLaw,
    OvershootSample,
    RenewalIdentityReport,
    RenewalMeasureEstimate,
    SpikeTrain,
    dri_mesh_check,
    ks_tolerance,
    overshoot_law,
    probe_function,
    renewal_identity_check,
    renewal_measure,
    simulate_overshoot,
)
from .shapes import (
    InfiniteLogMomentError,
    LogMomentReport,
    NotSampleableError,
    ShapeDensity,
    beta_log_moment,
    log_moment,
    log_moment_report,
    shape_from_config,
)

__all__ = [
    "DRIReport",
    "DiscretizationFit",
    "DiscretizedShape",
    "FixedShapeResult",
    "InfiniteLogMomentError",
    "LimitFormulaReport",
    "LogMomentReport",
    "NotSampleableError",
    "OvershootLaw",
    "OvershootSample",
    "QuadratureError",
    "RenewalIdentityReport",
    "RenewalMeasureEstimate",
    "ShapeDensity",
    "SpikeTrain",
    "beta_log_moment",
    "bin_masses",
    "discretize",
    "dri_mesh_check",
    "epsilon_integral",
    "ks_tolerance",
    "l1_discretization_error",
    "log_moment",
    "log_moment_report",
    "overshoot_law",
    "probe_function",
    "renewal_identity_check",
    "renewal_measure",
    "run_fixed_shape",
    "shape_from_config",
    "simulate_overshoot",
    "strong_discretization_check",
    "verify_limit_formula",
]
