"""Discrete-time toolkit for closed-loop security analysis of networked
control systems: factorization machinery, a two-site loop simulator with
fault/attack injection, residual-based detection, resilient synthesis,
adversary construction, and privacy filtering."""

from .lticore import (
    DareSolution,
    FrequencyGrid,
    Signal,
    StateSpace,
    compose,
    conjugate,
    eval_at,
    feedback,
    freq_response,
    hinf_norm,
    inverse,
    nehari_distance,
    parallel,
    scale,
    series,
    simulate,
    solve_dare,
    split_stable_antistable,
    stack_cols,
    stack_rows,
)
from .factorization import (
    CoprimeOctet,
    FactorizationParams,
    ParamTransform,
    RetuneResult,
    TwoSiteController,
    build_normalized_octet,
    build_octet,
    default_params,
    is_stabilizing,
    mtd_retune,
    param_transform,
    pnp_wrap,
    youla_controller,
)
from .simloop import (
    AttackSpec,
    DisturbanceModel,
    FaultSpec,
    LoopOperatorSet,
    PlantSideExtension,
    ScenarioTrace,
    StationPolicy,
    attack_information_potential,
    build_loop_operators,
    controller_duality_gap,
    decompose_attack,
    run_closed_loop,
    validate_loop_operators,
)
from .resilience import (
    MODES,
    DeployedController,
    ResilientDesign,
    attack_error_channel,
    attack_feedback_gain,
    attack_symbol,
    deploy_two_site,
    fault_error_channel,
    fault_symbol,
    hardy_split,
    select_mode,
    solve_mmp_attack,
    solve_mmp_fault,
    stability_margins,
)
from .detection import (
    NOISE_FLOOR,
    DetectionReport,
    EvaluationConfig,
    WatermarkTrace,
    WhitenedResidualGen,
    calibrate_covariance,
    coinner_outer,
    kalman_gain,
    kalman_octet,
    masked_reference,
    run_watermark_loop,
    scheme_a,
    scheme_b,
    scheme_c,
    threshold,
    watermark_channel_maps,
    watermark_detector,
    watermark_reshaper,
    whitening_from_disturbance,
)

__all__ = [
    "AttackSpec",
    "CoprimeOctet",
    "DareSolution",
    "DeployedController",
    "DetectionReport",
    "DisturbanceModel",
    "EvaluationConfig",
    "FactorizationParams",
    "FaultSpec",
    "FrequencyGrid",
    "LoopOperatorSet",
    "MODES",
    "NOISE_FLOOR",
    "ParamTransform",
    "PlantSideExtension",
    "ResilientDesign",
    "RetuneResult",
    "ScenarioTrace",
    "Signal",
    "StateSpace",
    "StationPolicy",
    "TwoSiteController",
    "WatermarkTrace",
    "WhitenedResidualGen",
    "attack_error_channel",
    "attack_feedback_gain",
    "attack_information_potential",
    "attack_symbol",
    "build_loop_operators",
    "build_normalized_octet",
    "build_octet",
    "calibrate_covariance",
    "coinner_outer",
    "compose",
    "conjugate",
    "controller_duality_gap",
    "decompose_attack",
    "default_params",
    "deploy_two_site",
    "eval_at",
    "fault_error_channel",
    "fault_symbol",
    "feedback",
    "freq_response",
    "hardy_split",
    "hinf_norm",
    "inverse",
    "is_stabilizing",
    "kalman_gain",
    "kalman_octet",
    "masked_reference",
    "mtd_retune",
    "nehari_distance",
    "parallel",
    "param_transform",
    "pnp_wrap",
    "run_closed_loop",
    "run_watermark_loop",
    "scale",
    "scheme_a",
    "scheme_b",
    "scheme_c",
    "select_mode",
    "series",
    "simulate",
    "solve_dare",
    "solve_mmp_attack",
    "solve_mmp_fault",
    "split_stable_antistable",
    "stability_margins",
    "stack_cols",
    "stack_rows",
    "threshold",
    "validate_loop_operators",
    "watermark_channel_maps",
    "watermark_detector",
    "watermark_reshaper",
    "whitening_from_disturbance",
    "youla_controller",
]
