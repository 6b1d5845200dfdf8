"""Two-site resilient controller synthesis and closed-loop safety margins.

The station and the plant side each carry one stable tuning filter.  The
station filter shapes how channel injections reach the loop; the plant-side
filter shapes how output residuals (faults, disturbances) reach the loop.
Both optima reduce, in normalized factor coordinates, to best stable
approximation problems on a two-sided symbol: the attack side is solved by
the Hankel-norm distance machinery, the fault side by the causal projection
of its symbol.  The solved pair deploys onto the simulation engine as a
station policy plus a plant-side residual-feedback extension, and the
small-gain margins certify boundedness under multiplicative channel and
residual perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .factorization import (
    CoprimeOctet,
    build_normalized_octet,
    param_transform,
    youla_controller,
)
from .lticore import (
    DEFAULT_RTOL,
    FrequencyGrid,
    StateSpace,
    conjugate,
    hinf_norm,
    inverse,
    max_singular_on_grid,
    nehari_distance,
    parallel,
    reduce_balanced,
    scale,
    series,
    split_stable_antistable,
)
from .simloop import PlantSideExtension, StationPolicy

__all__ = [
    "MODES",
    "DeployedController",
    "ResilientDesign",
    "attack_error_channel",
    "attack_feedback_gain",
    "attack_symbol",
    "deploy_two_site",
    "fault_error_channel",
    "fault_symbol",
    "hardy_split",
    "select_mode",
    "solve_mmp_attack",
    "solve_mmp_fault",
    "stability_margins",
]

MODES = ("nominal", "fault_tolerant", "attack_resilient", "combined")

_NORMALIZED_TOL = 1e-6
_REDUCE_TOL = 1e-9
_CHECK_GRID = FrequencyGrid.default(32)


# ---------------------------------------------------------------------------
# Causal projection and design symbols
# ---------------------------------------------------------------------------

def hardy_split(sys: StateSpace) -> tuple[StateSpace, Optional[StateSpace]]:
    """Split a two-sided system into causal and strictly anticausal parts.

    The causal part collects the stable realization, the feedthrough, *and*
    the zero-lag coefficient of the antistable realization (whose boundary
    expansion starts at lag zero, not lag one).  The remainder is strictly
    anticausal: its response to an impulse at step zero is supported on
    negative steps only, which is what makes the projection orthogonal to
    every causal signal.  Returns ``(causal, anticausal)`` with ``None`` for
    a vanishing anticausal part.
    """
    stable_part, anti, _ = split_stable_antistable(sys)
    if anti.n == 0:
        return stable_part, None
    zero_lag = -anti.C @ np.linalg.solve(anti.A, anti.B)
    causal = parallel(stable_part, StateSpace.static(zero_lag))
    strict = parallel(anti, StateSpace.static(-zero_lag))
    return causal, strict


def attack_symbol(octet: CoprimeOctet) -> StateSpace:
    """Two-sided symbol whose best stable approximation tunes the station.

    Built as (controller numerator)(output kernel denominator)* minus
    (controller denominator)(output kernel numerator)*; the adjoints need an
    invertible state matrix, so the octet should come from the normalized
    (inner/co-inner) construction rather than a deadbeat one.
    """
    return parallel(
        series(octet.ctrl_left_num, conjugate(octet.left_den)),
        scale(series(octet.ctrl_left_den, conjugate(octet.left_num)), -1.0))


def fault_symbol(octet: CoprimeOctet) -> StateSpace:
    """Two-sided symbol whose causal projection tunes the plant side."""
    return parallel(
        series(conjugate(octet.right_num), octet.ctrl_right_den),
        scale(series(conjugate(octet.right_den), octet.ctrl_right_num), -1.0))


def _require_normalized(octet: CoprimeOctet) -> None:
    image = octet.image_column()
    kernel = octet.kernel_row()
    p = octet.plant.p
    m = octet.plant.m
    try:
        inner = max_singular_on_grid(
            parallel(series(conjugate(image), image),
                     scale(StateSpace.identity(p), -1.0)), _CHECK_GRID)
        coinner = max_singular_on_grid(
            parallel(series(kernel, conjugate(kernel)),
                     scale(StateSpace.identity(m), -1.0)), _CHECK_GRID)
    except ValueError as exc:
        raise ValueError(
            "the resilient synthesis needs normalized factors (inner image "
            "column, co-inner kernel row); build the octet with "
            f"build_normalized_octet ({exc})") from None
    if max(inner, coinner) > _NORMALIZED_TOL:
        raise ValueError(
            "the resilient synthesis needs normalized factors (inner image "
            "column, co-inner kernel row); build the octet with "
            f"build_normalized_octet (defect {max(inner, coinner):.2e})")


# ---------------------------------------------------------------------------
# The two model-matching problems
# ---------------------------------------------------------------------------

def solve_mmp_attack(norm_octet: CoprimeOctet,
                     rtol: float = DEFAULT_RTOL
                     ) -> tuple[StateSpace, float, float]:
    """Best stable station filter against worst-case channel injections.

    Returns ``(param, level, lifted_level)``: the stable parameter whose sum
    with the attack symbol attains the smallest possible peak gain, that
    smallest gain, and its lift ``sqrt(level**2 + 1)`` — the peak gain of
    the full station row once the unit-norm co-inner completion is put
    back.  The minimizer comes from the Hankel-norm distance of the
    symbol's anticausal part.
    """
    _require_normalized(norm_octet)
    symbol = attack_symbol(norm_octet)
    level, best = nehari_distance(symbol, rtol=rtol)
    param = reduce_balanced(scale(best, -1.0), _REDUCE_TOL)
    level = float(level)
    return param, level, float(np.sqrt(level * level + 1.0))


def solve_mmp_fault(norm_octet: CoprimeOctet
                    ) -> tuple[StateSpace, float, float]:
    """Best stable plant-side filter against residual-driven deviations.

    Returns ``(param, level, lifted_level)``.  The parameter is minus the
    causal projection of the fault symbol, which leaves a strictly
    anticausal remainder; that choice makes the fault deviation channel
    orthogonal to the closed-loop image subspace, so fault and attack error
    energies add.  ``level`` is the peak gain of the remainder and
    ``lifted_level = sqrt(level**2 + 1)`` is the peak gain of the full
    residual column with the inner completion put back.
    """
    _require_normalized(norm_octet)
    symbol = fault_symbol(norm_octet)
    causal, strict = hardy_split(symbol)
    param = reduce_balanced(scale(causal, -1.0), _REDUCE_TOL)
    level = float(hinf_norm(strict)) if strict is not None else 0.0
    return param, level, float(np.sqrt(level * level + 1.0))


# ---------------------------------------------------------------------------
# Design container
# ---------------------------------------------------------------------------

def _check_stable(name: str, sys: Optional[StateSpace]) -> None:
    if sys is not None and not (sys.stable or sys.is_schur()):
        raise ValueError(f"{name} must be a stable system")


@dataclass(frozen=True)
class ResilientDesign:
    """Solved two-site tuning pair plus the deployed-coordinate parameters.

    ``attack_param``/``attack_level`` solve the station-side matching
    problem, ``fault_param``/``fault_level`` the plant-side one.
    ``station_param`` is the parameter the station actually runs (the
    negated attack parameter, in normalized coordinates) and
    ``plant_param`` the plant-side residual gain; the latter is ``None``
    when the loop factor it requires has no stable inverse, in which case
    only the station-side modes deploy.  ``mode`` picks which site(s) the
    deployment activates.
    """

    attack_param: StateSpace
    attack_level: float
    fault_param: StateSpace
    fault_level: float
    mode: str = "combined"
    station_param: Optional[StateSpace] = None
    plant_param: Optional[StateSpace] = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("attack_level", "fault_level"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be finite and nonnegative")
        _check_stable("attack_param", self.attack_param)
        _check_stable("fault_param", self.fault_param)
        _check_stable("station_param", self.station_param)
        _check_stable("plant_param", self.plant_param)
        if self.station_param is None:
            object.__setattr__(
                self, "station_param",
                reduce_balanced(scale(self.attack_param, -1.0), _REDUCE_TOL))

    @classmethod
    def solve(cls, norm_octet: CoprimeOctet,
              mode: str = "combined") -> "ResilientDesign":
        """Solve both matching problems on a normalized octet."""
        attack_param, attack_level, _ = solve_mmp_attack(norm_octet)
        fault_param, fault_level, _ = solve_mmp_fault(norm_octet)
        station = reduce_balanced(scale(attack_param, -1.0), _REDUCE_TOL)
        plant_param = _plant_side_param(norm_octet, station, fault_param)
        return cls(attack_param=attack_param, attack_level=attack_level,
                   fault_param=fault_param, fault_level=fault_level,
                   mode=mode, station_param=station, plant_param=plant_param)

    def with_mode(self, mode: str) -> "ResilientDesign":
        return replace(self, mode=mode)

    def to_json_dict(self) -> dict:
        return {
            "attack_param": self.attack_param.to_json_dict(),
            "attack_level": self.attack_level,
            "fault_param": self.fault_param.to_json_dict(),
            "fault_level": self.fault_level,
            "mode": self.mode,
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "ResilientDesign":
        return ResilientDesign(
            attack_param=StateSpace.from_json_dict(obj["attack_param"]),
            attack_level=float(obj["attack_level"]),
            fault_param=StateSpace.from_json_dict(obj["fault_param"]),
            fault_level=float(obj["fault_level"]),
            mode=obj["mode"])


def _loop_factor(octet: CoprimeOctet,
                 station_param: Optional[StateSpace]) -> StateSpace:
    """Controller input factor seen by the plant-side loop."""
    factor = octet.ctrl_left_den
    if station_param is not None:
        factor = parallel(factor, series(station_param, octet.left_num))
    return reduce_balanced(factor, _REDUCE_TOL)


def _plant_side_param(octet: CoprimeOctet,
                      station_param: Optional[StateSpace],
                      combined_param: StateSpace) -> Optional[StateSpace]:
    """Stable plant-side gain closing the gap between the two parameters.

    Returns ``None`` when the station's input factor has no stable inverse,
    which is exactly the case where the split implementation cannot be
    realized with internally stable pieces.
    """
    factor = _loop_factor(octet, station_param)
    try:
        factor_inv = inverse(factor)
    except Exception:
        return None
    if not factor_inv.is_schur():
        return None
    gap = combined_param if station_param is None else parallel(
        combined_param, scale(station_param, -1.0))
    candidate = reduce_balanced(series(factor_inv, gap), _REDUCE_TOL)
    if not candidate.is_schur():
        return None
    return candidate


# ---------------------------------------------------------------------------
# Deployment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeployedController:
    """Simulation-ready two-site control law.

    ``policy`` goes to ``run_closed_loop`` as the station controller and
    ``extension`` (possibly ``None``) as the plant-side residual feedback.
    ``station`` is the station's output-feedback transfer, ``combined`` the
    equivalent single-site law including the plant-side term.
    ``station_param``/``plant_param`` are expressed in the working octet's
    residual coordinates.
    """

    octet: CoprimeOctet
    design: ResilientDesign
    mode: str
    station_param: Optional[StateSpace]
    plant_param: Optional[StateSpace]
    policy: StationPolicy
    extension: Optional[PlantSideExtension]
    station: StateSpace
    combined: StateSpace


def _map_station_param(tfm, param: StateSpace) -> StateSpace:
    """Working-coordinate parameter reproducing a normalized-coordinate law."""
    mapped = parallel(
        series(tfm.reference_map, param, tfm.residual_map),
        series(tfm.residual_cross, tfm.residual_map))
    return reduce_balanced(mapped, _REDUCE_TOL)


def _map_combined_param(tfm, param: StateSpace) -> StateSpace:
    """Working-coordinate combined parameter for the fault channel."""
    mapped = series(tfm.reference_map,
                    parallel(series(param, tfm.residual_map),
                             scale(tfm.youla_cross, -1.0)))
    return reduce_balanced(mapped, _REDUCE_TOL)


def _same_params(octet: CoprimeOctet, other: CoprimeOctet) -> bool:
    a, b = octet.params, other.params
    return all(
        np.allclose(getattr(a, name), getattr(b, name), rtol=0.0, atol=1e-10)
        for name in ("state_feedback", "observer_gain", "input_weight",
                     "output_weight"))


def deploy_two_site(plant: StateSpace, octet: CoprimeOctet,
                    design: ResilientDesign,
                    require_stable_station: bool = False
                    ) -> DeployedController:
    """Assemble the two-site law for a working octet of the same plant.

    The solved parameters live in normalized factor coordinates; this maps
    them onto ``octet``'s residual coordinates (an identity when ``octet``
    is itself the normalized one), splits them into the station policy and
    the plant-side residual gain selected by ``design.mode``, and returns
    the simulation-ready pair together with the station and combined
    output-feedback transfers.

    Raises ``ValueError("unstable K factor: ...")`` when the requested mode
    needs a plant-side gain but the station's input factor has no stable
    inverse, or when ``require_stable_station`` is set and the station law
    itself is not a stable system.
    """
    if (plant.p, plant.m) != (octet.plant.p, octet.plant.m):
        raise ValueError("plant and octet disagree on signal dimensions")
    mode = design.mode
    norm_octet = build_normalized_octet(octet.plant)
    if _same_params(octet, norm_octet):
        station_param = design.station_param
        combined_param = design.fault_param
    else:
        tfm = param_transform(octet, norm_octet)
        station_param = _map_station_param(tfm, design.station_param)
        combined_param = _map_combined_param(tfm, design.fault_param)

    q_station: Optional[StateSpace] = None
    q_plant: Optional[StateSpace] = None
    if mode in ("attack_resilient", "combined"):
        q_station = station_param
    if mode in ("fault_tolerant", "combined"):
        q_plant = _plant_side_param(octet, q_station, combined_param)
        if q_plant is None:
            raise ValueError(
                "unstable K factor: the station's input factor has no "
                "stable inverse, so the plant-side gain cannot be realized "
                f"as a stable system in mode {mode!r}")

    if require_stable_station:
        factor = _loop_factor(octet, q_station)
        try:
            stable_station = inverse(factor).is_schur()
        except Exception:
            stable_station = False
        if not stable_station:
            raise ValueError(
                "unstable K factor: the station law is not a stable system "
                "and a stable controller was requested")

    station = youla_controller(octet, q_station)
    if q_plant is None:
        combined = station
    else:
        equivalent = q_station
        lift = reduce_balanced(
            series(_loop_factor(octet, q_station), q_plant), _REDUCE_TOL)
        equivalent = lift if equivalent is None else reduce_balanced(
            parallel(equivalent, lift), _REDUCE_TOL)
        combined = youla_controller(octet, equivalent)
    policy = StationPolicy(youla_q=q_station)
    extension = (None if q_plant is None
                 else PlantSideExtension(output_residual_gain=q_plant))
    return DeployedController(
        octet=octet, design=design, mode=mode, station_param=q_station,
        plant_param=q_plant, policy=policy, extension=extension,
        station=station, combined=combined)


# ---------------------------------------------------------------------------
# Theorem channels and margins
# ---------------------------------------------------------------------------

def attack_error_channel(norm_octet: CoprimeOctet,
                         design: ResilientDesign) -> StateSpace:
    """Closed-loop deviation driven by additive channel injections.

    Maps the stacked injection pair (input injection; negated output
    injection) to the deviation of (applied input; output) from the
    injection-free run.  Its peak gain equals the lifted attack level when
    the design is optimal.
    """
    row = parallel(
        norm_octet.input_kernel_row(),
        scale(series(design.station_param, norm_octet.kernel_row()), -1.0))
    return series(norm_octet.image_column(), row)


def fault_error_channel(norm_octet: CoprimeOctet,
                        design: ResilientDesign) -> StateSpace:
    """Closed-loop deviation driven by additive output-residual forcing.

    Maps the attack-free output residual (disturbance plus fault content)
    to the deviation of (applied input; output).  With the optimal
    plant-side parameter this channel is orthogonal to the image subspace,
    so its energy adds to the attack channel's.
    """
    return parallel(
        norm_octet.residual_column(),
        series(norm_octet.image_column(), design.fault_param))


def attack_feedback_gain(attack: StateSpace, inputs: int,
                         outputs: int) -> StateSpace:
    """Multiplicative-attack loop operator seen by the closed loop.

    ``attack`` maps the clean (input, output) pair to the injected pair;
    the returned operator accounts for the injected input re-entering the
    attack through the transmitted signal.
    """
    dim = inputs + outputs
    if (attack.p, attack.m) != (dim, dim):
        raise ValueError(
            f"the multiplicative attack must map the {dim}-channel "
            "(input, output) pair to itself")
    selector = StateSpace.static(
        np.diag([1.0] * inputs + [0.0] * outputs))
    loop = parallel(StateSpace.identity(dim), series(selector, attack))
    return series(attack, inverse(loop))


def stability_margins(design: ResilientDesign,
                      attack: Optional[StateSpace] = None,
                      fault: Optional[StateSpace] = None,
                      *,
                      reference_norm: float = 0.0,
                      attack_signal_norm: float = 0.0,
                      fault_signal_norm: float = 0.0) -> dict:
    """Small-gain margins of the deployed loop under structured corruption.

    ``attack`` is the multiplicative channel operator on the stacked
    (input, output) pair; ``fault`` maps that pair to an output-residual
    perturbation.  Returns ``b_attack_condition`` (the attack-only
    sufficient condition), the combined contraction factor ``b``, and
    ``bound_on_e`` — the guaranteed energy bound on the closed-loop
    deviation for the supplied signal norms (reference, stacked additive
    injections, additive residual forcing), infinite when ``b >= 1``.
    """
    inputs = design.attack_param.m
    outputs = design.attack_param.p
    lift_a = float(np.sqrt(design.attack_level ** 2 + 1.0))
    lift_f = float(np.sqrt(design.fault_level ** 2 + 1.0))
    phi_norm = 0.0
    if attack is not None:
        phi_norm = float(hinf_norm(attack_feedback_gain(
            attack, inputs, outputs)))
    pi_f_norm = 0.0
    if fault is not None:
        if (fault.p, fault.m) != (inputs + outputs, outputs):
            raise ValueError(
                "the residual perturbation must map the stacked "
                f"(input, output) pair to the {outputs}-channel residual")
        pi_f_norm = float(hinf_norm(fault))
    b = float(np.hypot(lift_a * phi_norm, lift_f * pi_f_norm))
    condition = bool(phi_norm < 1.0 / lift_a)
    forcing = float(np.hypot(lift_a * attack_signal_norm,
                             lift_f * fault_signal_norm))
    if b < 1.0:
        bound = b / (1.0 - b) * reference_norm + forcing / (1.0 - b)
    else:
        bound = float("inf")
    return {"b_attack_condition": condition, "b": b,
            "bound_on_e": float(bound)}


# ---------------------------------------------------------------------------
# Mode selection from detection verdicts
# ---------------------------------------------------------------------------

def select_mode(*reports) -> str:
    """Pick the operating mode from detection verdicts at a run boundary.

    Accepts detection reports (anything with a ``verdict`` attribute) or
    plain verdict strings among ``fault``, ``attack``, ``none``.
    """
    saw_fault = saw_attack = False
    for report in reports:
        verdict = getattr(report, "verdict", report)
        if verdict == "fault":
            saw_fault = True
        elif verdict == "attack":
            saw_attack = True
        elif verdict != "none":
            raise ValueError(f"unknown verdict {verdict!r}")
    if saw_fault and saw_attack:
        return "combined"
    if saw_attack:
        return "attack_resilient"
    if saw_fault:
        return "fault_tolerant"
    return "nominal"
