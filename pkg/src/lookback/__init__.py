"""Simulation and certification tools for lookback averaging processes.

A lookback averaging process appends ``a_{n+1} = sum_j p_n(j) a_j``, a
weighted average of its whole past.  The subpackages cover envelope-bounded
weights (extremal dynamics, dominance checks, stage constructions) and
fixed-shape weights (:mod:`lookback.renewal`).
"""

from .certifier import (
    AuxSequence,
    DivergenceRecord,
    LowerBoundReport,
    NextStage,
    SeriesReport,
    StageSchedule,
    certify_convergence_schedule,
    check_lower_bound_growth,
    construct_divergence,
    convergence_stage_map,
    divergence_stage_map,
    run_aux_bound,
    series_dichotomy,
    solve_next_stage_index,
)
from .engine import (
    InvariantViolation,
    LambdaSchedule,
    ProcessTrace,
    TraceCapacityError,
    WeightPolicy,
    affine_map,
    infer_lambda,
    interval_endpoints,
    load_init,
    reconstruct_weights,
    run_schedule,
    step_extremal_max,
    step_extremal_min,
    step_general,
    step_interval,
)
from .envelope import (
    ConstantsLedger,
    EnvelopeParams,
    FloorCeiling,
    block_size,
    load_params,
    min_valid_index,
    reparametrize,
    schedule_at,
)
from .majorization import (
    DominanceReport,
    PrefixProfile,
    ReverseReport,
    check_dominance_propagation,
    check_reverse_majorization,
    collapse_top_m,
    majorizes,
)
from .orderstats import ExactAccumulator, OrderStatAccumulator

__version__ = "0.1.0"

__all__ = [
    "AuxSequence",
    "ConstantsLedger",
    "DivergenceRecord",
    "DominanceReport",
    "EnvelopeParams",
    "ExactAccumulator",
    "FloorCeiling",
    "InvariantViolation",
    "LambdaSchedule",
    "LowerBoundReport",
    "NextStage",
    "OrderStatAccumulator",
    "PrefixProfile",
    "ProcessTrace",
    "ReverseReport",
    "SeriesReport",
    "StageSchedule",
    "TraceCapacityError",
    "WeightPolicy",
    "__version__",
    "affine_map",
    "block_size",
    "certify_convergence_schedule",
    "check_dominance_propagation",
    "check_lower_bound_growth",
    "check_reverse_majorization",
    "collapse_top_m",
    "construct_divergence",
    "convergence_stage_map",
    "divergence_stage_map",
    "infer_lambda",
    "interval_endpoints",
    "load_init",
    "load_params",
    "majorizes",
    "min_valid_index",
    "reconstruct_weights",
    "reparametrize",
    "run_aux_bound",
    "run_schedule",
    "schedule_at",
    "series_dichotomy",
    "solve_next_stage_index",
    "step_extremal_max",
    "step_extremal_min",
    "step_general",
    "step_interval",
]
