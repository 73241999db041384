"""Relative 4-DOF transform estimation between two robots from UWB ranges and odometry."""

from .estimator import (
    DegenerateGeometryError,
    FirstStepEstimate,
    LinearSystem,
    RefinedEstimate,
    build_design_matrix,
    build_rhs,
    cost,
    first_step,
    gn_jacobian,
    gn_one_step,
    grid_search_oracle,
    ml_oracle_full_gn,
    solve_linear_step,
    two_step_estimate,
)
from .geometry import FrameTransform, RotationZ, YawAngle, apply_transform, project_to_so2, yaw_rotation
from .scenario import (
    MeasurementSet,
    ScenarioConfig,
    UwbLayout,
    WaypointSchedule,
    apply_speed_distortion,
    check_path_validity,
    default_layout,
    design_params,
    generate_schedule,
    measure,
    random_scenario,
    synthesize_ranges,
)

__version__ = "0.1.0"
