"""Device-model kernels for the DG operator stages, plus reference oracles."""

from .assemble import RK_A, RK_B, RK_C, assemble_rhs, rk4_step
from .fields import (
    check_padding,
    flux_to_natural,
    from_padded,
    natural_flux_to_padded,
    to_padded,
    zeros_field,
    zeros_flux,
)
from .gather import flux_gather, plan_gather_launch
from .local_ops import (
    ElementTables,
    StrategyUnavailableError,
    build_element_tables,
    flux_lift,
    local_diff_field_shared,
    local_diff_matrix_full,
    local_diff_segmented,
    plan_diff_field_shared_launch,
    plan_diff_full_matrix_launch,
    plan_diff_segmented_launch,
    plan_lift_launch,
)
from .oracle import (
    ReferenceMaxwellOperator,
    apply_dense,
    build_reference_operator,
    dense_global_operator,
    diff_stage,
    gather_stage,
    lift_stage,
)
from .pipeline import EmulatedMaxwellOperator, build_emulated_operator, default_configs

__all__ = [
    "RK_A", "RK_B", "RK_C", "assemble_rhs", "rk4_step",
    "check_padding", "flux_to_natural", "from_padded", "natural_flux_to_padded",
    "to_padded", "zeros_field", "zeros_flux",
    "flux_gather", "plan_gather_launch",
    "ElementTables", "StrategyUnavailableError", "build_element_tables",
    "flux_lift", "local_diff_field_shared", "local_diff_matrix_full",
    "local_diff_segmented", "plan_diff_field_shared_launch",
    "plan_diff_full_matrix_launch", "plan_diff_segmented_launch", "plan_lift_launch",
    "ReferenceMaxwellOperator", "apply_dense", "build_reference_operator",
    "dense_global_operator", "diff_stage", "gather_stage", "lift_stage",
    "EmulatedMaxwellOperator", "build_emulated_operator", "default_configs",
]
