"""manoc: numerical optimality checks for endpoint-constrained optimal
control on Riemannian manifolds.

The package verifies first-order (maximum principle) and second-order
necessary conditions, including the curvature-corrected second-variation
integral and a finite-witness quasi-pointwise test, and measures needle
variation expansion defects at desk scale.
"""

__version__ = "0.1.0"

from .errors import (
    ContractError,
    DomainError,
    DomainExitError,
    EvaluationWarning,
    GeometryError,
    ManocError,
    NonconvergenceError,
    SchemaError,
    SignPatternError,
)
from .geometry import (
    CoTangentVector,
    CurveSample,
    ManifoldModel,
    TangentVector,
    builtin_model,
    christoffel_at,
    curvature_at,
    distance,
    exp_map,
    integrate_geodesic,
    log_map,
    parallel_transport,
)
from .problem import (
    BolzaProblem,
    ControlProblem,
    ControlSetSpec,
    ControlSignal,
    EndpointFunction,
    Multiplier,
    load_problem,
    mayerize,
    sample_controls,
)
from .trajectory import (
    FrameData,
    FrameField,
    Trajectory,
    build_frame,
    frame_coefficients,
    fundamental_matrix,
    integrate_state,
    reference_data,
)
from .pmp import (
    Costate,
    PmpReport,
    find_multipliers,
    hamiltonian,
    integral_first_order,
    pmp_residuals,
    solve_adjoint,
)
from .variations import (
    VariationBundle,
    critical_direction_check,
    endpoint_second_difference,
    solve_linearized,
    solve_second_variation,
)
from .second_order import (
    PointwiseTestData,
    SecondOrderReport,
    approximate_continuity_points,
    bolza_second_order_lhs,
    equal_hamiltonian_set,
    pointwise_ingredients,
    quasi_pointwise_lhs,
    second_order_integral_lhs,
)
from .liapounoff import GridSubset, nested_family, partition_family, select_subset
from .needle import (
    NeedleConfig,
    build_needle_control,
    convergence_order,
    endpoint_expansion_defect,
    variation_defect,
)
