"""Small-noise multiscale diffusions in stationary random environments.

Simulation of the slow/fast system, cell-problem correctors, homogenized
drift and diffusion, the quadratic large-deviations action, and
importance-sampling estimators of rare-event probabilities driven by the
explicit path-tracking control.
"""

__version__ = "0.1.0"

from .action import (
    ActionValue,
    DiscretePath,
    EndpointEvent,
    HalfSpaceEvent,
    MinimizeResult,
    local_rate,
    minimize_action,
    path_action,
)
from .corrector import (
    CorrectorField,
    extrapolate_gradient,
    solve_cell_problem_grid,
    solve_cell_problem_mc,
    solve_corrector,
)
from .diagnostics import (
    ErgodicReport,
    OccupationHistogram,
    build_occupation,
    ergodic_average,
    pi_histogram,
    quenched_ergodic_report,
    total_variation,
    viability_drift_check,
)
from .dynamics import (
    ControlledRun,
    ControlPolicy,
    IntegrationError,
    PathSample,
    ScaleParams,
    integrate_controlled,
    integrate_fast_rescaled,
    integrate_uncontrolled,
)
from .effective import (
    EffectiveCoefficients,
    assemble_velocity_integrand,
    effective_diffusion,
    effective_drift,
    homogenize,
)
from .medium import (
    CoefficientSet,
    CoefficientSpec,
    FieldTerm,
    InvariantDensity,
    MediumSample,
    build_coefficients,
    compile_observable,
    eval_coefficients,
    invariant_density,
    pi_average,
    sample_medium,
)
from .rareevent import (
    PathTrackingControl,
    RareEventEstimate,
    build_is_control,
    estimate_probability,
    scaling_report,
)

__all__ = [
    "ActionValue",
    "ControlPolicy",
    "ControlledRun",
    "CoefficientSet",
    "CoefficientSpec",
    "CorrectorField",
    "DiscretePath",
    "EffectiveCoefficients",
    "EndpointEvent",
    "ErgodicReport",
    "FieldTerm",
    "HalfSpaceEvent",
    "IntegrationError",
    "InvariantDensity",
    "MediumSample",
    "MinimizeResult",
    "OccupationHistogram",
    "PathSample",
    "PathTrackingControl",
    "RareEventEstimate",
    "ScaleParams",
    "assemble_velocity_integrand",
    "build_coefficients",
    "build_is_control",
    "build_occupation",
    "compile_observable",
    "effective_diffusion",
    "effective_drift",
    "ergodic_average",
    "estimate_probability",
    "eval_coefficients",
    "extrapolate_gradient",
    "homogenize",
    "integrate_controlled",
    "integrate_fast_rescaled",
    "integrate_uncontrolled",
    "invariant_density",
    "local_rate",
    "minimize_action",
    "path_action",
    "pi_average",
    "pi_histogram",
    "quenched_ergodic_report",
    "sample_medium",
    "scaling_report",
    "solve_cell_problem_grid",
    "solve_cell_problem_mc",
    "solve_corrector",
    "total_variation",
    "viability_drift_check",
    "__version__",
]
