"""
PyDPCFlow - Workflow-based data-driven predictive control

This library computes a data-driven predictive controller in a cloud of
cooperating tasks (column-partitioned SVD, merge-and-truncate, export) and
compensates the truncation and delay errors with a disturbance observer on the
edge node. It ships the plants, the experiment harness and a small CLI.
"""

__version__ = "0.1.0"

# Import main classes for easy access
from .dpcflow_edge import (
    CloudPacket,
    DobState,
    EdgeBuffer,
    EdgeController,
    EdgeStep,
    ObserverVerdict,
    composite_control,
    delay_compensator_select,
    dob_update,
    dob_update_auxiliary,
    ultimate_bound,
    verify_observer_gain,
)
from .dpcflow_experiment import (
    ExperimentConfig,
    Method,
    PlantKind,
    RunRecord,
    RunSummary,
    StageTiming,
    emit_reports,
    profile_stages,
    run_experiment,
    stage_report,
    sweep_truncation,
)
from .dpcflow_fabric import (
    Channel,
    ChannelHub,
    FabricCosts,
    Frame,
    FrameError,
    FrameKind,
    KeyValueRegistry,
    MessageLog,
    pack_frame,
    unpack_frame,
)
from .dpcflow_linalg import (
    DimensionError,
    FlopEstimate,
    ObserverInstabilityError,
    RiccatiDivergenceError,
    SvdFactors,
    TruncationMode,
    TruncationPolicy,
    block_merge,
    column_blocks,
    do_merge_of_blocks,
    do_truncate,
    flop_estimate,
    merge_flops,
    parallel_svd_by_cols,
    pseudo_inverse_from_factors,
    solve_discrete_lyapunov,
    solve_discrete_riccati,
    svd_dense,
    svd_flops,
)
from .dpcflow_plants import (
    BallBeamParams,
    BallBeamServo,
    LqrController,
    LtiModel,
    ModelError,
    PidController,
    PowerNetParams,
    VehicleKinematics,
    VehicleParams,
    ball_beam_model,
    discretize_zoh,
    lqr_warmup,
    pid_warmup,
    power_network_model,
    power_network_params,
    random_lti,
    servo_model,
    vehicle_error_model,
)
from .dpcflow_predictor import (
    CloudParams,
    DenseSvdProvider,
    ErrorBudget,
    HankelSet,
    NeedsMoreDataError,
    NumericalError,
    ParallelSvdProvider,
    cloud_params_from_factors,
    compute_cloud_params,
    control_sequence,
    error_budget,
    hankel_build,
    hankel_slide,
    predict_outputs,
)
from .dpcflow_workflow import (
    BarrierTimeoutError,
    ConfigError,
    ImageKind,
    RoundMetrics,
    WorkflowDag,
    WorkflowEngine,
    WorkflowInitError,
    WorkflowMode,
    WorkflowRoundError,
    WorkflowSettings,
    build_dpc_dag,
    deploy_dag,
    export_topology,
    import_topology,
    initialize_workers,
    pyramid_barrier,
    switch_topology,
)

__all__ = [
    # Linear algebra
    "SvdFactors",
    "TruncationMode",
    "TruncationPolicy",
    "FlopEstimate",
    "svd_dense",
    "do_truncate",
    "block_merge",
    "do_merge_of_blocks",
    "column_blocks",
    "parallel_svd_by_cols",
    "pseudo_inverse_from_factors",
    "svd_flops",
    "merge_flops",
    "flop_estimate",
    "solve_discrete_lyapunov",
    "solve_discrete_riccati",
    # Predictor
    "HankelSet",
    "CloudParams",
    "ErrorBudget",
    "DenseSvdProvider",
    "ParallelSvdProvider",
    "hankel_build",
    "hankel_slide",
    "cloud_params_from_factors",
    "compute_cloud_params",
    "control_sequence",
    "predict_outputs",
    "error_budget",
    # Fabric and workflow
    "Frame",
    "FrameKind",
    "FabricCosts",
    "Channel",
    "ChannelHub",
    "KeyValueRegistry",
    "MessageLog",
    "pack_frame",
    "unpack_frame",
    "ImageKind",
    "WorkflowDag",
    "WorkflowSettings",
    "WorkflowMode",
    "WorkflowEngine",
    "RoundMetrics",
    "build_dpc_dag",
    "export_topology",
    "import_topology",
    "deploy_dag",
    "initialize_workers",
    "pyramid_barrier",
    "switch_topology",
    # Edge node
    "CloudPacket",
    "EdgeBuffer",
    "DobState",
    "EdgeController",
    "EdgeStep",
    "ObserverVerdict",
    "dob_update",
    "dob_update_auxiliary",
    "composite_control",
    "delay_compensator_select",
    "verify_observer_gain",
    "ultimate_bound",
    # Plants
    "LtiModel",
    "BallBeamParams",
    "BallBeamServo",
    "VehicleParams",
    "VehicleKinematics",
    "PowerNetParams",
    "PidController",
    "LqrController",
    "discretize_zoh",
    "ball_beam_model",
    "servo_model",
    "vehicle_error_model",
    "power_network_params",
    "power_network_model",
    "random_lti",
    "pid_warmup",
    "lqr_warmup",
    # Experiments
    "ExperimentConfig",
    "PlantKind",
    "Method",
    "RunRecord",
    "RunSummary",
    "StageTiming",
    "run_experiment",
    "emit_reports",
    "profile_stages",
    "stage_report",
    "sweep_truncation",
    # Errors
    "DimensionError",
    "ObserverInstabilityError",
    "RiccatiDivergenceError",
    "NeedsMoreDataError",
    "NumericalError",
    "FrameError",
    "ConfigError",
    "ModelError",
    "WorkflowInitError",
    "BarrierTimeoutError",
    "WorkflowRoundError",
]
