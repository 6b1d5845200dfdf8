"""Two-node closed-loop simulator with channel attacks, faults, and noise.

A physical plant and a control station run step-synchronously.  The station
computes the plant input from the (possibly corrupted) measurement channel;
the actuation channel may be corrupted on the way to the plant.  Both nodes
carry copies of one shared observer structure, so every residual recorded in
a trace is produced by the same whitening recursion, evaluated on the data
actually available at that node.

Algebraic loops created by feedthrough terms (plant, fault, attack, residual
feedback) are resolved exactly at every step by solving one small linear
system for the simultaneous signals.

On top of the raw simulator the module derives the closed-form loop
operators that predict faulty and attacked responses, and validates each
realization against direct simulation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from .lticore import (
    Signal,
    StateSpace,
    inverse,
    parallel,
    scale,
    series,
    simulate,
    stack_cols,
)
from .factorization import CoprimeOctet, is_stabilizing, youla_controller

DIVERGENCE_LIMIT = 1e9
REPLAY_SETTLING = 100
PAIRED_SIM_TOL = 1e-6
PATTERN_TOL = 1e-8

_DISTURBANCE_MODES = ("gaussian", "l2bounded", "none")
_ATTACK_KINDS = ("additive", "multiplicative", "replay", "dos", "image",
                 "unactuable", "custom")
_TAPS = ("transmitted", "clean")


def _as_matrix(value, rows: int, name: str) -> np.ndarray:
    mat = np.atleast_2d(np.asarray(value, dtype=float))
    if mat.shape[0] != rows:
        raise ValueError(f"{name} must have {rows} rows, got {mat.shape[0]}")
    return mat


def _check_spd(mat: np.ndarray, name: str) -> np.ndarray:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T):
        raise ValueError(f"{name} must be symmetric")
    if mat.shape[0] and np.min(np.linalg.eigvalsh(mat)) <= 0.0:
        raise ValueError(f"{name} must be positive definite")
    return 0.5 * (mat + mat.T)


def _is_stable(sys: StateSpace) -> bool:
    return bool(sys.stable) or sys.is_schur()


def _window_contains(window: Optional[tuple[int, int]], k: int) -> bool:
    if k < 0:
        return False
    if window is None:
        return True
    return window[0] <= k < window[1]


def _check_window(window) -> Optional[tuple[int, int]]:
    if window is None:
        return None
    k_on, k_off = (int(v) for v in window)
    if k_on < 0 or k_off <= k_on:
        raise ValueError(f"window must satisfy 0 <= start < stop, got {window}")
    return (k_on, k_off)


# ---------------------------------------------------------------------------
# Scenario ingredients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DisturbanceModel:
    """Exogenous disturbance channel feeding the plant state and output.

    ``gaussian`` draws an i.i.d. normal sequence (process block then
    measurement block), ``l2bounded`` replays a fixed finite-energy
    realization, ``none`` injects nothing.  The coupling matrices map the
    stacked disturbance into the state update and the measurement.
    """

    mode: str
    state_noise_matrix: np.ndarray
    output_noise_matrix: np.ndarray
    process_cov: Optional[np.ndarray] = None
    measurement_cov: Optional[np.ndarray] = None
    l2_bound: Optional[float] = None
    fixed_input: Optional[Signal] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in _DISTURBANCE_MODES:
            raise ValueError(f"unknown disturbance mode {self.mode!r}")
        e_d = np.atleast_2d(np.asarray(self.state_noise_matrix, dtype=float))
        f_d = np.atleast_2d(np.asarray(self.output_noise_matrix, dtype=float))
        if e_d.shape[1] != f_d.shape[1]:
            raise ValueError("state/output noise matrices disagree on the "
                             "disturbance dimension")
        object.__setattr__(self, "state_noise_matrix", e_d)
        object.__setattr__(self, "output_noise_matrix", f_d)
        if self.mode == "gaussian":
            if self.process_cov is None or self.measurement_cov is None:
                raise ValueError("gaussian mode needs both covariances")
            pc = _check_spd(self.process_cov, "process covariance")
            mc = _check_spd(self.measurement_cov, "measurement covariance")
            if pc.shape[0] + mc.shape[0] != self.dim:
                raise ValueError(
                    "covariance blocks must add up to the disturbance "
                    f"dimension {self.dim}")
            object.__setattr__(self, "process_cov", pc)
            object.__setattr__(self, "measurement_cov", mc)
        elif self.mode == "l2bounded":
            if self.fixed_input is None or self.l2_bound is None:
                raise ValueError(
                    "l2bounded mode needs a fixed realization and a bound")
            if self.l2_bound <= 0:
                raise ValueError("the energy bound must be positive")
            if self.fixed_input.dim != self.dim:
                raise ValueError("fixed realization dimension mismatch")
            if self.fixed_input.l2_norm() > self.l2_bound * (1 + 1e-12):
                raise ValueError(
                    f"fixed realization energy {self.fixed_input.l2_norm():.6g} "
                    f"exceeds the declared bound {self.l2_bound:.6g}")

    @property
    def dim(self) -> int:
        return self.state_noise_matrix.shape[1]

    # -- constructors -------------------------------------------------------
    @staticmethod
    def none(plant: StateSpace, seed: int = 0) -> "DisturbanceModel":
        return DisturbanceModel("none", np.zeros((plant.n, 0)),
                                np.zeros((plant.m, 0)), seed=seed)

    @staticmethod
    def gaussian(plant: StateSpace, process_cov, measurement_cov,
                 seed: int = 0) -> "DisturbanceModel":
        """Process noise on every state, measurement noise on every output."""
        pc = _check_spd(process_cov, "process covariance")
        mc = _check_spd(measurement_cov, "measurement covariance")
        if pc.shape[0] != plant.n or mc.shape[0] != plant.m:
            raise ValueError("covariance dimensions must match the plant")
        e_d = np.hstack([np.eye(plant.n), np.zeros((plant.n, plant.m))])
        f_d = np.hstack([np.zeros((plant.m, plant.n)), np.eye(plant.m)])
        return DisturbanceModel("gaussian", e_d, f_d, process_cov=pc,
                                measurement_cov=mc, seed=seed)

    @staticmethod
    def l2bounded(state_noise_matrix, output_noise_matrix, fixed_input: Signal,
                  l2_bound: float, seed: int = 0) -> "DisturbanceModel":
        return DisturbanceModel("l2bounded", state_noise_matrix,
                                output_noise_matrix, l2_bound=float(l2_bound),
                                fixed_input=fixed_input, seed=seed)

    # -- realization --------------------------------------------------------
    def draw(self, preroll: int, horizon: int,
             rng: np.random.Generator) -> np.ndarray:
        """Disturbance samples for all simulated steps (preroll included)."""
        total = preroll + horizon
        if self.mode == "none":
            return np.zeros((total, 0))
        if self.mode == "gaussian":
            chol_p = np.linalg.cholesky(self.process_cov)
            chol_m = np.linalg.cholesky(self.measurement_cov)
            w = rng.standard_normal((total, chol_p.shape[0])) @ chol_p.T
            nu = rng.standard_normal((total, chol_m.shape[0])) @ chol_m.T
            return np.hstack([w, nu])
        data = np.zeros((total, self.dim))
        fixed = self.fixed_input.data
        span = min(horizon, fixed.shape[0])
        data[preroll:preroll + span] = fixed[:span]
        return data

    # -- derived channels ---------------------------------------------------
    def disturbance_to_output(self, plant: StateSpace) -> StateSpace:
        """Open-loop transfer from the disturbance to the plant output."""
        if self.state_noise_matrix.shape[0] != plant.n:
            raise ValueError("disturbance coupling does not fit the plant")
        return StateSpace(plant.A, self.state_noise_matrix, plant.C,
                          self.output_noise_matrix, stable=plant.stable)

    def disturbance_to_residual(self, octet: CoprimeOctet) -> StateSpace:
        """Closed-form transfer from the disturbance to the output residual."""
        model = octet.plant
        if self.state_noise_matrix.shape[0] != model.n:
            raise ValueError("disturbance coupling does not fit the model")
        gain = octet.params.observer_gain
        weight = octet.params.output_weight
        return StateSpace(
            octet.observer_a,
            self.state_noise_matrix - gain @ self.output_noise_matrix,
            weight @ model.C,
            weight @ self.output_noise_matrix,
            stable=True,
        )

    def to_json_dict(self) -> dict:
        out: dict = {"mode": self.mode, "dim": self.dim, "seed": self.seed}
        if self.mode == "l2bounded":
            out["l2_bound"] = self.l2_bound
        return out


@dataclass(frozen=True)
class FaultSpec:
    """Plant-side fault entering the measurement equation.

    ``multiplicative`` is a stable operator driven by the received input and
    the true output; ``additive`` is a forcing sequence.  Both are active on
    the half-open step window only.
    """

    multiplicative: Optional[StateSpace] = None
    additive: Optional[Signal] = None
    window: Optional[tuple[int, int]] = None

    def __post_init__(self) -> None:
        if self.multiplicative is None and self.additive is None:
            raise ValueError("a fault needs a multiplicative part, an "
                             "additive part, or both")
        if self.multiplicative is not None and not _is_stable(self.multiplicative):
            raise ValueError("the multiplicative fault operator must be stable")
        object.__setattr__(self, "window", _check_window(self.window))

    def active(self, k: int) -> bool:
        return _window_contains(self.window, k)

    def with_window(self, window) -> "FaultSpec":
        return FaultSpec(self.multiplicative, self.additive,
                         _check_window(window))

    def to_json_dict(self) -> dict:
        return {
            "multiplicative": (None if self.multiplicative is None
                               else self.multiplicative.to_json_dict()),
            "additive_steps": (None if self.additive is None
                               else len(self.additive)),
            "window": self.window,
        }


_ATTACK_REQUIRED = {
    "additive": (),
    "multiplicative": ("loop_operator",),
    "replay": ("replay_delay",),
    "dos": ("drop_probability",),
    "image": ("image_latent",),
    "unactuable": ("residual_latent",),
    "custom": (),
}
_ATTACK_ALLOWED = {
    "additive": {"input_selector", "input_injection", "output_selector",
                 "output_injection"},
    "multiplicative": {"loop_operator", "tap"},
    "replay": {"replay_delay"},
    "dos": {"drop_probability", "input_selector", "output_selector"},
    "image": {"image_latent"},
    "unactuable": {"residual_latent"},
    "custom": {"loop_operator", "tap", "input_selector", "input_injection",
               "output_selector", "output_injection"},
}


@dataclass(frozen=True)
class AttackSpec:
    """Corruption of the actuation and/or measurement channel.

    Exactly the fields relevant to ``kind`` may be populated.  ``tap``
    selects which signal pair drives a loop operator: ``transmitted`` (the
    pair the attacker can observe on the wire — the default) or ``clean``
    (the pre-corruption station output and plant output).
    """

    kind: str
    input_selector: Optional[np.ndarray] = None
    output_selector: Optional[np.ndarray] = None
    input_injection: Optional[Signal] = None
    output_injection: Optional[Signal] = None
    loop_operator: Optional[StateSpace] = None
    tap: str = "transmitted"
    replay_delay: Optional[int] = None
    drop_probability: Optional[float] = None
    image_latent: Optional[Signal] = None
    residual_latent: Optional[Signal] = None
    window: Optional[tuple[int, int]] = None

    def __post_init__(self) -> None:
        if self.kind not in _ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.tap not in _TAPS:
            raise ValueError(f"unknown tap point {self.tap!r}")
        allowed = _ATTACK_ALLOWED[self.kind]
        for name in ("input_selector", "output_selector", "input_injection",
                     "output_injection", "loop_operator", "replay_delay",
                     "drop_probability", "image_latent", "residual_latent"):
            if getattr(self, name) is not None and name not in allowed:
                raise ValueError(
                    f"field {name!r} does not belong to kind {self.kind!r}")
        for name in _ATTACK_REQUIRED[self.kind]:
            if getattr(self, name) is None:
                raise ValueError(f"kind {self.kind!r} requires field {name!r}")
        if self.kind == "additive":
            if self.input_injection is None and self.output_injection is None:
                raise ValueError("an additive attack needs an injection on "
                                 "at least one channel")
            if (self.input_injection is None) != (self.input_selector is None):
                raise ValueError("input selector and injection come together")
            if (self.output_injection is None) != (self.output_selector is None):
                raise ValueError("output selector and injection come together")
        if self.kind == "custom":
            if (self.loop_operator is None and self.input_injection is None
                    and self.output_injection is None):
                raise ValueError("a custom attack needs an operator or an "
                                 "injection")
        if self.loop_operator is not None and not _is_stable(self.loop_operator):
            raise ValueError("the attack loop operator must be stable")
        if self.replay_delay is not None and int(self.replay_delay) < 1:
            raise ValueError("the replay delay must be at least one step")
        if self.drop_probability is not None and not (
                0.0 < float(self.drop_probability) <= 1.0):
            raise ValueError("the drop probability must lie in (0, 1]")
        for name in ("input_selector", "output_selector"):
            sel = getattr(self, name)
            if sel is not None:
                sel = np.atleast_2d(np.asarray(sel, dtype=float))
                if not np.all(np.isin(sel, (0.0, 1.0))):
                    raise ValueError(f"{name} must contain only zeros and ones")
                object.__setattr__(self, name, sel)
        object.__setattr__(self, "window", _check_window(self.window))

    def active(self, k: int) -> bool:
        return _window_contains(self.window, k)

    # -- constructors -------------------------------------------------------
    @staticmethod
    def additive(input_selector=None, input_injection: Optional[Signal] = None,
                 output_selector=None,
                 output_injection: Optional[Signal] = None,
                 window=None) -> "AttackSpec":
        return AttackSpec("additive", input_selector=input_selector,
                          input_injection=input_injection,
                          output_selector=output_selector,
                          output_injection=output_injection, window=window)

    @staticmethod
    def multiplicative(loop_operator: StateSpace, tap: str = "transmitted",
                       window=None) -> "AttackSpec":
        return AttackSpec("multiplicative", loop_operator=loop_operator,
                          tap=tap, window=window)

    @staticmethod
    def replay(delay: int, window=None) -> "AttackSpec":
        return AttackSpec("replay", replay_delay=int(delay), window=window)

    @staticmethod
    def dos(drop_probability: float, input_channels=None, output_channels=None,
            window=None) -> "AttackSpec":
        if input_channels is None and output_channels is None:
            raise ValueError("a denial-of-service attack needs a channel")
        return AttackSpec("dos", drop_probability=float(drop_probability),
                          input_selector=input_channels,
                          output_selector=output_channels, window=window)

    @staticmethod
    def image(latent: Signal, window=None) -> "AttackSpec":
        return AttackSpec("image", image_latent=latent, window=window)

    @staticmethod
    def unactuable(latent: Signal, window=None) -> "AttackSpec":
        return AttackSpec("unactuable", residual_latent=latent, window=window)

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "tap": self.tap,
            "window": self.window,
            "replay_delay": self.replay_delay,
            "drop_probability": self.drop_probability,
        }


@dataclass(frozen=True)
class StationPolicy:
    """Observer-based station law with an optional residual-feedback term.

    The station runs the shared observer on (computed input, received
    output), whitens the innovation into the station-side residual, and sets
    input = feedback * state_estimate + input_weight * (reference +
    parameter(residual)).  ``youla_q = None`` is the central law.
    """

    youla_q: Optional[StateSpace] = None

    def __post_init__(self) -> None:
        if self.youla_q is not None and not _is_stable(self.youla_q):
            raise ValueError("the residual-feedback parameter must be stable")


@dataclass(frozen=True)
class PlantSideExtension:
    """Residual feedback applied locally on the plant side.

    The input the plant actually integrates becomes the channel-received
    input plus filtered copies of the plant-side residuals:

        applied = received + G_u(input residual) + G_y(output residual)

    ``input_residual_gain`` (p x p on the input residual) masks the loop
    against an eavesdropper who only sees station-side data; its loop must
    keep I - (controller input factor)(gain) stably invertible, which is
    checked when a run starts.  ``output_residual_gain`` (p x m on the
    output residual) is the second site of a split resilient controller and
    keeps the loop stable whenever the gain itself is stable.
    """

    input_residual_gain: Optional[StateSpace] = None
    output_residual_gain: Optional[StateSpace] = None

    def __post_init__(self) -> None:
        if self.input_residual_gain is None and self.output_residual_gain is None:
            raise ValueError("the extension needs at least one residual gain")
        for name, gain in (("input_residual_gain", self.input_residual_gain),
                           ("output_residual_gain", self.output_residual_gain)):
            if gain is not None and not _is_stable(gain):
                raise ValueError(f"{name} must be stable")

    def to_json_dict(self) -> dict:
        return {
            "input_residual_gain": None if self.input_residual_gain is None
            else self.input_residual_gain.to_json_dict(),
            "output_residual_gain": None if self.output_residual_gain is None
            else self.output_residual_gain.to_json_dict(),
        }


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------

_CSV_CHANNELS = (
    ("v", "v"), ("u", "u"), ("ua", "u_attacked"), ("y", "y"),
    ("ya", "y_attacked"), ("ru", "r_u"), ("ry", "r_y"),
    ("ry_cs", "r_y_station"), ("au", "a_u"), ("ay", "a_y"),
    ("fault", "fault"),
)


@dataclass
class ScenarioTrace:
    """Per-step record of one closed-loop run.

    All channels have ``horizon`` rows.  The transmitted signals satisfy
    u_attacked = u + a_u + plant_feedback and y_attacked = y + a_y at every
    step; ``plant_feedback`` is nonzero only for runs with a plant-side
    residual-feedback extension, so a_u stays the pure channel deviation.
    """

    horizon: int
    seed: int
    v: np.ndarray
    u: np.ndarray
    u_attacked: np.ndarray
    y: np.ndarray
    y_attacked: np.ndarray
    x: np.ndarray
    xhat_plant: np.ndarray
    xhat_station: np.ndarray
    r_u: np.ndarray
    r_y: np.ndarray
    r_y_station: np.ndarray
    a_u: np.ndarray
    a_y: np.ndarray
    fault: np.ndarray
    disturbance: np.ndarray
    plant_feedback: Optional[np.ndarray] = None
    diverged: bool = False
    diverged_at: Optional[int] = None
    alarms: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.plant_feedback is None:
            self.plant_feedback = np.zeros_like(self.u)
        for _, attr in _CSV_CHANNELS:
            arr = getattr(self, attr)
            if arr.shape[0] != self.horizon:
                raise ValueError(f"channel {attr} has {arr.shape[0]} steps, "
                                 f"expected {self.horizon}")
        scale_u = 1.0 + np.max(np.abs(self.u_attacked), initial=0.0)
        scale_y = 1.0 + np.max(np.abs(self.y_attacked), initial=0.0)
        if self.horizon and not (
                np.allclose(self.u_attacked,
                            self.u + self.a_u + self.plant_feedback,
                            rtol=0.0, atol=1e-9 * scale_u)
                and np.allclose(self.y_attacked, self.y + self.a_y,
                                rtol=0.0, atol=1e-9 * scale_y)):
            raise ValueError("transmitted signals are inconsistent with the "
                             "recorded attack components")

    def signal(self, name: str) -> Signal:
        return Signal(getattr(self, name))

    def export_csv(self, path) -> Path:
        """One row per step, fixed column order, plus a JSON sidecar."""
        path = Path(path)
        headers = ["k"]
        columns = []
        for label, attr in _CSV_CHANNELS:
            arr = getattr(self, attr)
            for j in range(arr.shape[1]):
                headers.append(f"{label}_{j}" if arr.shape[1] > 1 else label)
                columns.append(arr[:, j])
        alarm_items = sorted(self.alarms.items())
        for name, flags in alarm_items:
            headers.append(f"alarm_{name}")
            columns.append(np.asarray(flags))
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(headers)
            for k in range(self.horizon):
                row = [str(k)]
                for col in columns:
                    val = col[k]
                    row.append(str(int(val)) if isinstance(val, (bool, np.bool_))
                               else format(float(val), ".17g"))
                writer.writerow(row)
        sidecar = path.with_suffix(".json")
        payload = dict(self.config)
        payload.update({
            "horizon": self.horizon,
            "seed": self.seed,
            "diverged": self.diverged,
            "diverged_at": self.diverged_at,
            "columns": headers,
        })
        sidecar.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        return path


# ---------------------------------------------------------------------------
# The closed-loop engine
# ---------------------------------------------------------------------------

def _station_matrices(octet: CoprimeOctet, policy: StationPolicy):
    params = octet.params
    q = policy.youla_q
    if q is None:
        q = StateSpace.zeros(octet.plant.p, octet.plant.m)
    return params.state_feedback, params.input_weight, params.output_weight, q


def _resolve_controller(controller, octet: CoprimeOctet):
    """Normalize the controller argument to ('policy', StationPolicy) or
    ('raw', StateSpace), plus the equivalent output-feedback map."""
    if controller is None:
        controller = StationPolicy()
    if isinstance(controller, StationPolicy):
        equivalent = youla_controller(octet, controller.youla_q)
        return "policy", controller, equivalent
    if isinstance(controller, StateSpace):
        return "raw", controller, controller
    raise TypeError("controller must be None, a StationPolicy, or a "
                    "StateSpace output-feedback law")


def run_closed_loop(plant: StateSpace,
                    octet: CoprimeOctet,
                    controller=None,
                    disturbance: Optional[DisturbanceModel] = None,
                    fault: Optional[FaultSpec] = None,
                    attack: Optional[AttackSpec] = None,
                    v: Optional[Signal] = None,
                    horizon: Optional[int] = None,
                    preroll: Optional[int] = None,
                    plant_side: Optional[PlantSideExtension] = None,
                    ) -> ScenarioTrace:
    """Simulate the two-node loop and record the full trace.

    The station computes u from the received output, the actuation channel
    adds a_u, the plant integrates with the received input plus fault and
    disturbance, and the measurement channel adds a_y.  The residuals come
    from the shared observer structure run on each node's own data.  The run
    is deterministic given the disturbance model's seed.

    ``plant_side`` adds local residual feedback between the channel and the
    actuator, so the applied input is the received input plus the extension
    output (recorded in ``trace.plant_feedback``).

    ``preroll`` steps (default: replay delay plus a settling margin for
    replay attacks, zero otherwise) are simulated before recording starts,
    with the reference held at its first sample and fault/attack windows
    counted from the first recorded step.
    """
    model = octet.plant
    if (plant.p, plant.m) != (model.p, model.m):
        raise ValueError("plant and factorization disagree on signal "
                         "dimensions")
    n, p, m = plant.n, plant.p, plant.m
    if horizon is None:
        if v is None:
            raise ValueError("provide a horizon or a reference signal")
        horizon = len(v)
    horizon = int(horizon)
    if horizon < 1:
        raise ValueError("the horizon must cover at least one step")
    if v is None:
        v = Signal.zeros(horizon, p)
    if v.dim != p or len(v) != horizon:
        raise ValueError(f"reference must be {horizon} steps of dimension {p}")
    if disturbance is None:
        disturbance = DisturbanceModel.none(plant)
    if disturbance.state_noise_matrix.shape[0] != n \
            or disturbance.output_noise_matrix.shape[0] != m:
        raise ValueError("disturbance coupling does not fit the plant")
    if attack is not None and attack.loop_operator is not None \
            and (attack.loop_operator.p, attack.loop_operator.m) != (p + m, p + m):
        raise ValueError("the attack loop operator must map (input, output) "
                         "pairs to (input, output) pairs")
    if fault is not None and fault.multiplicative is not None and (
            fault.multiplicative.p != p + m or fault.multiplicative.m != m):
        raise ValueError("the multiplicative fault must map (input, output) "
                         "to the output dimension")

    mode, policy_or_raw, equivalent = _resolve_controller(controller, octet)
    if not is_stabilizing(plant, equivalent):
        raise ValueError("controller does not stabilize the plant")

    q_in = q_out = None
    if plant_side is not None:
        q_in = plant_side.input_residual_gain
        q_out = plant_side.output_residual_gain
        if q_in is not None and (q_in.p, q_in.m) != (p, p):
            raise ValueError(f"input_residual_gain must map the {p}-channel "
                             "input residual back to the input")
        if q_out is not None and (q_out.p, q_out.m) != (m, p):
            raise ValueError(f"output_residual_gain must map the {m}-channel "
                             "output residual to the input")
        if attack is not None:
            if attack.loop_operator is not None:
                raise ValueError(
                    "a loop-operator attack acts on the channel and cannot "
                    "be combined with plant-side residual feedback")
            if attack.kind == "dos" and attack.input_selector is not None:
                raise ValueError(
                    "input-channel blanking cannot be combined with "
                    "plant-side residual feedback")
        if q_in is not None:
            try:
                recovery = inverse(
                    StateSpace.identity(p)
                    - series(octet.ctrl_left_den, q_in))
            except Exception as exc:
                raise ValueError(
                    "plant-side input-residual loop is ill-posed: "
                    f"{exc}") from None
            if not recovery.is_schur():
                raise ValueError(
                    "unstable inverse: the input-residual gain must keep "
                    "I minus (controller input factor)(gain) stably "
                    "invertible")

    if preroll is None:
        preroll = (attack.replay_delay + REPLAY_SETTLING
                   if attack is not None and attack.kind == "replay" else 0)
    preroll = int(preroll)
    total = preroll + horizon

    rng_noise, rng_attack = (np.random.default_rng(s)
                             for s in np.random.SeedSequence(
                                 disturbance.seed).spawn(2))
    d_all = disturbance.draw(preroll, horizon, rng_noise)

    # Pre-draw channel-drop events so traces are seed-reproducible.
    if attack is not None and attack.kind == "dos":
        drops = rng_attack.random((total, 2)) < attack.drop_probability
    else:
        drops = np.zeros((total, 2), dtype=bool)

    # Precompute open-loop attack injections (latent-driven kinds).
    a_u_pre = np.zeros((horizon, p))
    a_y_pre = np.zeros((horizon, m))
    if attack is not None and attack.kind in ("image", "unactuable"):
        if attack.kind == "image":
            latent = attack.image_latent
            if latent.dim != p:
                raise ValueError(f"image latent must have dimension {p}")
            gated = np.zeros((horizon, p))
            span = min(horizon, len(latent))
            for k in range(span):
                if attack.active(k):
                    gated[k] = latent.data[k]
            a_u_pre = simulate(octet.right_den, Signal(gated))[0].data
            a_y_pre = -simulate(octet.right_num, Signal(gated))[0].data
        else:
            latent = attack.residual_latent
            if latent.dim != m:
                raise ValueError(f"residual latent must have dimension {m}")
            gated = np.zeros((horizon, m))
            span = min(horizon, len(latent))
            for k in range(span):
                if attack.active(k):
                    gated[k] = latent.data[k]
            a_u_pre = -simulate(octet.ctrl_right_num, Signal(gated))[0].data
            a_y_pre = -simulate(octet.ctrl_right_den, Signal(gated))[0].data

    # Station pieces.
    if mode == "policy":
        fb, weight_in, weight_out, q = _station_matrices(octet, policy_or_raw)
        vdw = weight_in @ q.D @ weight_out
        station_u_coeff = np.eye(p) + vdw @ model.D
        station_ya_coeff = -vdw
    else:
        raw = policy_or_raw
        if raw.p != m or raw.m != p:
            raise ValueError("controller dimensions do not match the plant")
        weight_out = octet.params.output_weight
        station_u_coeff = np.eye(p)
        station_ya_coeff = -raw.D
    v_inv = np.linalg.inv(octet.params.input_weight)

    fault_op = fault.multiplicative if fault is not None else None
    pi_a = attack.loop_operator if attack is not None else None

    # States.
    x = np.zeros(n)
    xhat_p = np.zeros(model.n)
    xhat_s = np.zeros(model.n)
    x_q = np.zeros(q.n) if mode == "policy" else np.zeros(0)
    x_raw = np.zeros(raw.n) if mode == "raw" else np.zeros(0)
    x_f = np.zeros(fault_op.n) if fault_op is not None else np.zeros(0)
    x_a = np.zeros(pi_a.n) if pi_a is not None else np.zeros(0)
    x_qin = np.zeros(q_in.n) if q_in is not None else np.zeros(0)
    x_qout = np.zeros(q_out.n) if q_out is not None else np.zeros(0)
    fb_gain = octet.params.state_feedback
    y_history: list[np.ndarray] = []
    ua_hold = np.zeros(p)
    ya_hold = np.zeros(m)

    iu = slice(0, p)
    iy = slice(p, p + m)
    iua = slice(p + m, 2 * p + m)
    iya = slice(2 * p + m, 2 * p + 2 * m)
    if0 = slice(2 * p + 2 * m, 2 * p + 3 * m)
    dim = 2 * p + 3 * m

    rec = {name: np.zeros((horizon, d)) for name, d in (
        ("v", p), ("u", p), ("u_attacked", p), ("y", m), ("y_attacked", m),
        ("r_u", p), ("r_y", m), ("r_y_station", m), ("a_u", p), ("a_y", m),
        ("fault", m), ("plant_feedback", p))}
    rec["x"] = np.zeros((horizon, n))
    rec["xhat_plant"] = np.zeros((horizon, model.n))
    rec["xhat_station"] = np.zeros((horizon, model.n))
    diverged = False
    diverged_at: Optional[int] = None
    recorded = 0

    for t in range(total):
        k = t - preroll
        v_k = v.data[max(k, 0)] if k >= 0 else v.data[0]
        d_k = d_all[t]
        fault_on = fault is not None and fault.active(k)
        attack_on = attack is not None and attack.active(k)

        T = np.zeros((dim, dim))
        c = np.zeros(dim)

        # Station equation.
        T[iu, iu] = station_u_coeff
        T[iu, iya] = station_ya_coeff
        if mode == "policy":
            c[iu] = (fb @ xhat_s + weight_in @ (v_k + q.C @ x_q)
                     - vdw @ model.C @ xhat_s)
        else:
            c[iu] = raw.C @ x_raw + v_k

        # Plant output equation.
        T[iy, iy] = np.eye(m)
        T[iy, iua] = -plant.D
        T[iy, if0] = -np.eye(m)
        c[iy] = plant.C @ x + disturbance.output_noise_matrix @ d_k

        # Actuation channel (received input plus any plant-side feedback).
        T[iua, iua] = np.eye(p)
        T[iua, iu] = -np.eye(p)
        if q_in is not None:
            dv = q_in.D @ v_inv
            T[iua, iua] -= dv
            c[iua] += q_in.C @ x_qin - dv @ (fb_gain @ xhat_p)
        if q_out is not None:
            dw = q_out.D @ weight_out
            T[iua, iua] += dw @ model.D
            T[iua, iy] -= dw
            c[iua] += q_out.C @ x_qout - dw @ (model.C @ xhat_p)
        # Measurement channel.
        T[iya, iya] = np.eye(m)
        T[iya, iy] = -np.eye(m)

        if attack_on:
            kind = attack.kind
            if kind in ("additive", "custom"):
                if attack.input_injection is not None and k < len(attack.input_injection):
                    c[iua] += attack.input_selector @ attack.input_injection.data[k]
                if attack.output_injection is not None and k < len(attack.output_injection):
                    c[iya] += attack.output_selector @ attack.output_injection.data[k]
            if kind in ("multiplicative", "custom") and pi_a is not None:
                d_a = pi_a.D
                duu, duy = d_a[:p, :p], d_a[:p, p:]
                dyu, dyy = d_a[p:, :p], d_a[p:, p:]
                c_a = pi_a.C @ x_a
                c[iua] += c_a[:p]
                c[iya] += c_a[p:]
                T[iua, iy] -= duy
                T[iya, iy] -= dyy
                if attack.tap == "transmitted":
                    T[iua, iua] -= duu
                    T[iya, iua] -= dyu
                else:
                    T[iua, iu] -= duu
                    T[iya, iu] -= dyu
            if kind == "replay":
                stale = (y_history[t - attack.replay_delay]
                         if t >= attack.replay_delay else np.zeros(m))
                T[iya, :] = 0.0
                T[iya, iya] = np.eye(m)
                c[iya] = stale
            if kind in ("image", "unactuable"):
                c[iua] += a_u_pre[k]
                c[iya] += a_y_pre[k]
            if kind == "dos":
                if attack.input_selector is not None and drops[t, 0]:
                    mask = np.diag(attack.input_selector).astype(bool) \
                        if attack.input_selector.ndim == 2 \
                        else attack.input_selector.astype(bool)
                    for i in np.flatnonzero(mask):
                        T[iua.start + i, :] = 0.0
                        T[iua.start + i, iua.start + i] = 1.0
                        c[iua.start + i] = ua_hold[i]
                if attack.output_selector is not None and drops[t, 1]:
                    mask = np.diag(attack.output_selector).astype(bool) \
                        if attack.output_selector.ndim == 2 \
                        else attack.output_selector.astype(bool)
                    for i in np.flatnonzero(mask):
                        T[iya.start + i, :] = 0.0
                        T[iya.start + i, iya.start + i] = 1.0
                        c[iya.start + i] = ya_hold[i]

        if fault_on and fault_op is not None:
            d_f = fault_op.D
            T[if0, if0] = np.eye(m)
            T[if0, iua] = -d_f[:, :p]
            T[if0, iy] = -d_f[:, p:]
            c[if0] = fault_op.C @ x_f
            if fault.additive is not None and 0 <= k < len(fault.additive):
                c[if0] += fault.additive.data[k]
        elif fault_on:
            T[if0, if0] = np.eye(m)
            add = (fault.additive.data[k]
                   if fault.additive is not None and 0 <= k < len(fault.additive)
                   else np.zeros(m))
            c[if0] = add
        else:
            T[if0, if0] = np.eye(m)

        try:
            s = np.linalg.solve(T, c)
        except np.linalg.LinAlgError as exc:
            raise ValueError(
                f"ill-posed algebraic loop at step {k}: {exc}") from None
        if not np.all(np.isfinite(s)):
            raise ValueError(f"ill-posed algebraic loop at step {k}")

        u, y, ua, ya, f0 = s[iu], s[iy], s[iua], s[iya], s[if0]

        # Residuals from the shared observer structure.
        r_y = weight_out @ (y - model.C @ xhat_p - model.D @ ua)
        r_u = v_inv @ (ua - fb_gain @ xhat_p)
        r_y_cs = weight_out @ (ya - model.C @ xhat_s - model.D @ u)
        ext = np.zeros(p)
        if q_in is not None:
            ext = ext + q_in.C @ x_qin + q_in.D @ r_u
        if q_out is not None:
            ext = ext + q_out.C @ x_qout + q_out.D @ r_y

        if k >= 0:
            rec["v"][k] = v_k
            rec["u"][k] = u
            rec["u_attacked"][k] = ua
            rec["y"][k] = y
            rec["y_attacked"][k] = ya
            rec["x"][k] = x
            rec["xhat_plant"][k] = xhat_p
            rec["xhat_station"][k] = xhat_s
            rec["r_u"][k] = r_u
            rec["r_y"][k] = r_y
            rec["r_y_station"][k] = r_y_cs
            rec["a_u"][k] = ua - u - ext
            rec["a_y"][k] = ya - y
            rec["fault"][k] = f0
            rec["plant_feedback"][k] = ext
            recorded = k + 1

        # State updates.
        x = plant.A @ x + plant.B @ ua + disturbance.state_noise_matrix @ d_k
        xhat_p = (octet.observer_a @ xhat_p + octet.observer_b @ ua
                  + octet.params.observer_gain @ y)
        xhat_s = (octet.observer_a @ xhat_s + octet.observer_b @ u
                  + octet.params.observer_gain @ ya)
        if mode == "policy" and q.n:
            x_q = q.A @ x_q + q.B @ r_y_cs
        if mode == "raw" and raw.n:
            x_raw = raw.A @ x_raw + raw.B @ ya
        if fault_on and fault_op is not None and fault_op.n:
            x_f = fault_op.A @ x_f + fault_op.B @ np.concatenate([ua, y])
        if attack_on and attack.kind in ("multiplicative", "custom") \
                and pi_a is not None and pi_a.n:
            tapped = (np.concatenate([ua, y]) if attack.tap == "transmitted"
                      else np.concatenate([u, y]))
            x_a = pi_a.A @ x_a + pi_a.B @ tapped
        if q_in is not None and q_in.n:
            x_qin = q_in.A @ x_qin + q_in.B @ r_u
        if q_out is not None and q_out.n:
            x_qout = q_out.A @ x_qout + q_out.B @ r_y
        y_history.append(y.copy())
        ua_hold, ya_hold = ua.copy(), ya.copy()

        worst = max(np.max(np.abs(arr), initial=0.0)
                    for arr in (x, xhat_p, xhat_s, x_q, x_raw, x_f, x_a,
                                x_qin, x_qout, s))
        if worst > DIVERGENCE_LIMIT:
            diverged = True
            diverged_at = max(k, 0)
            break

    if diverged:
        span = max(recorded, 1)
        for name in rec:
            rec[name] = rec[name][:span]
        horizon_out = span
    else:
        horizon_out = horizon

    config = {
        "preroll": preroll,
        "controller": (mode if mode == "raw" else
                       ("central" if (isinstance(policy_or_raw, StationPolicy)
                                      and policy_or_raw.youla_q is None)
                        else "residual-feedback")),
        "dimensions": {"states": n, "inputs": p, "outputs": m},
        "disturbance": disturbance.to_json_dict(),
        "fault": None if fault is None else fault.to_json_dict(),
        "attack": None if attack is None else attack.to_json_dict(),
        "plant_side": None if plant_side is None else plant_side.to_json_dict(),
    }
    return ScenarioTrace(
        horizon=horizon_out,
        seed=disturbance.seed,
        v=rec["v"], u=rec["u"], u_attacked=rec["u_attacked"], y=rec["y"],
        y_attacked=rec["y_attacked"], x=rec["x"],
        xhat_plant=rec["xhat_plant"], xhat_station=rec["xhat_station"],
        r_u=rec["r_u"], r_y=rec["r_y"], r_y_station=rec["r_y_station"],
        a_u=rec["a_u"], a_y=rec["a_y"], fault=rec["fault"],
        disturbance=d_all[preroll:preroll + horizon_out],
        plant_feedback=rec["plant_feedback"][:horizon_out],
        diverged=diverged, diverged_at=diverged_at, config=config,
    )


# ---------------------------------------------------------------------------
# Data-space decompositions
# ---------------------------------------------------------------------------

def attack_information_potential(trace: ScenarioTrace) -> Signal:
    """Mismatch between the two nodes' data: (a_u, -a_y) stacked per step."""
    return Signal(np.hstack([trace.a_u, -trace.a_y]))


def decompose_attack(a_u: Signal, a_y: Signal,
                     octet: CoprimeOctet) -> tuple[Signal, Signal]:
    """Split an attack pair into its image-side and residual-side content.

    Returns (input-residual component, output-residual component); filtering
    the components back through the image and residual columns reproduces
    (a_u, -a_y).
    """
    if len(a_u) != len(a_y):
        raise ValueError("attack components must share the horizon")
    if a_u.dim != octet.plant.p or a_y.dim != octet.plant.m:
        raise ValueError("attack components do not match the plant dimensions")
    stacked = Signal(np.hstack([a_u.data, -a_y.data]))
    a_ru = simulate(octet.input_kernel_row(), stacked)[0]
    a_ry = simulate(octet.kernel_row(), stacked)[0]
    return a_ru, a_ry


# ---------------------------------------------------------------------------
# Loop operators
# ---------------------------------------------------------------------------

def _require_stable(sys: StateSpace, message: str) -> StateSpace:
    if not sys.is_schur():
        raise ValueError(message)
    return StateSpace(sys.A, sys.B, sys.C, sys.D, stable=True)


def _cols(sys: StateSpace, start: int, stop: int) -> StateSpace:
    """Restrict a map to a contiguous block of its inputs."""
    return StateSpace(sys.A, sys.B[:, start:stop], sys.C, sys.D[:, start:stop],
                      stable=sys.stable)


def _rows(sys: StateSpace, start: int, stop: int) -> StateSpace:
    """Restrict a map to a contiguous block of its outputs."""
    return StateSpace(sys.A, sys.B, sys.C[start:stop, :], sys.D[start:stop, :],
                      stable=sys.stable)


def _sign_split(p: int, m: int) -> StateSpace:
    """Static map (a, b) -> (a, -b)."""
    return StateSpace.static(np.diag(np.concatenate([np.ones(p), -np.ones(m)])))


def _input_projector(p: int, m: int) -> StateSpace:
    """Static map (a, b) -> (a, 0)."""
    return StateSpace.static(np.diag(np.concatenate([np.ones(p), np.zeros(m)])))


def _replay_operator(p: int, m: int, delay: int) -> StateSpace:
    """Channel operator of an output replay: zero on the input block,
    (delay-by-T minus identity) on the output block."""
    n = m * delay
    A = np.zeros((n, n))
    if delay > 1:
        A[m:, :-m] = np.eye(n - m)
    B = np.zeros((n, p + m))
    B[:m, p:] = np.eye(m)
    C = np.zeros((p + m, n))
    C[p:, -m:] = np.eye(m)
    D = np.zeros((p + m, p + m))
    D[p:, p:] = -np.eye(m)
    return StateSpace(A, B, C, D, stable=True)


class LoopOperatorSet:
    """Closed-form operators describing the loop under a fault and/or attack.

    Fault-side members predict the response seen from the plant data; the
    attack-side members cover both the plant view (transmitted input, true
    output) and the station view (clean input, received output).  Members are
    realized lazily; each raises when its stability condition fails.
    """

    def __init__(self, octet: CoprimeOctet,
                 fault: Optional[FaultSpec] = None,
                 attack: Optional[AttackSpec] = None,
                 resilient: Optional[StateSpace] = None):
        self.octet = octet
        self.fault = fault
        self.attack = attack
        self.resilient = resilient
        if attack is not None and attack.kind == "dos":
            raise ValueError("random channel blanking has no transfer "
                             "operator representation")
        # Eagerly realize the two gateway operators: their stability *is*
        # the loop's stability condition.
        self.fault_sensitivity
        self.attack_gain

    # -- controller factor rows, optionally wrapped with a residual term ----
    def _input_row_parts(self) -> tuple[StateSpace, StateSpace]:
        x_part = self.octet.ctrl_left_den
        y_part = self.octet.ctrl_left_num
        if self.resilient is not None:
            q = self.resilient
            x_part = parallel(x_part, series(q, self.octet.left_num))
            y_part = parallel(y_part, scale(series(q, self.octet.left_den), -1.0))
        return x_part, y_part

    def effective_input_row(self) -> StateSpace:
        """Controller factor row (input part, output part) as one map,
        absorbed with the residual-feedback parameter when present."""
        x_part, y_part = self._input_row_parts()
        return stack_cols(x_part, y_part)

    def effective_residual_column(self) -> StateSpace:
        """Residual column completing the factor identities for the active
        station law (shifted by the residual-feedback parameter)."""
        column = self.octet.residual_column()
        if self.resilient is not None:
            column = parallel(column, series(self.octet.image_column(),
                                             self.resilient))
        return column

    # -- fault side ---------------------------------------------------------
    @cached_property
    def residual_fault_operator(self) -> StateSpace:
        """The fault operator as seen by the output residual."""
        if self.fault is None or self.fault.multiplicative is None:
            p, m = self.octet.plant.p, self.octet.plant.m
            return StateSpace.zeros(m, p + m)
        return series(self.octet.left_den, self.fault.multiplicative)

    @cached_property
    def fault_sensitivity(self) -> StateSpace:
        """Closed-loop gain from fault excitation to the output residual."""
        m = self.octet.plant.m
        if self.fault is None or self.fault.multiplicative is None:
            return StateSpace.identity(m)
        loop = series(self.residual_fault_operator,
                      self.effective_residual_column())
        candidate = inverse(parallel(StateSpace.identity(m),
                                     scale(loop, -1.0)))
        return _require_stable(candidate, "fault destabilizes loop")

    @cached_property
    def fault_reference_coupling(self) -> StateSpace:
        """Reference-to-residual leakage created by the fault."""
        p, m = self.octet.plant.p, self.octet.plant.m
        if self.fault is None or self.fault.multiplicative is None:
            return StateSpace.zeros(m, p)
        return series(self.fault_sensitivity, self.residual_fault_operator,
                      self.octet.image_column())

    def factor_perturbation(self) -> dict[str, StateSpace]:
        """Equivalent coprime-factor uncertainty induced by the fault.

        The right-side entries perturb the image pair (denominator gets the
        upper rows, numerator the lower rows of column * coupling); the
        left-side entries are read off the residual-space fault operator.
        """
        p, m = self.octet.plant.p, self.octet.plant.m
        psi = self.fault_reference_coupling
        pi_f = self.residual_fault_operator
        column = series(self.effective_residual_column(), psi)
        return {
            "right_den": _rows(column, 0, p),
            "right_num": _rows(column, p, p + m),
            "left_num": _cols(pi_f, 0, p),
            "left_den": scale(_cols(pi_f, p, p + m), -1.0),
        }

    # -- attack side --------------------------------------------------------
    @cached_property
    def attack_gain(self) -> StateSpace:
        """Map from the transmitted pair (received input, true output) to the
        information-potential pair (a_u, -a_y)."""
        p, m = self.octet.plant.p, self.octet.plant.m
        att = self.attack
        if att is None or att.kind in ("additive", "image", "unactuable") \
                or att.loop_operator is None and att.kind != "replay":
            return StateSpace.zeros(p + m, p + m)
        if att.kind == "replay":
            pi_a = _replay_operator(p, m, att.replay_delay)
            tap = "clean"
        else:
            pi_a = att.loop_operator
            tap = att.tap
        signed = series(_sign_split(p, m), pi_a)
        if tap == "transmitted":
            return _require_stable(signed, "ill-posed attack algebra: the "
                                   "channel operator is unstable")
        well_posed = parallel(StateSpace.identity(p + m),
                              series(_input_projector(p, m), pi_a))
        try:
            inner = inverse(well_posed)
        except ValueError as exc:
            raise ValueError(f"ill-posed attack algebra: {exc}") from None
        return _require_stable(series(signed, inner),
                               "ill-posed attack algebra: the clean-tap "
                               "rewriting is unstable")

    @cached_property
    def reference_warp(self) -> StateSpace:
        """Map from the commanded reference to the reference actually seen by
        the image dynamics of the attacked loop."""
        p = self.octet.plant.p
        loop = series(self.effective_input_row(), self.attack_gain,
                      self.octet.image_column())
        candidate = inverse(parallel(StateSpace.identity(p),
                                     scale(loop, -1.0)))
        return _require_stable(candidate, "ill-posed attack algebra: the "
                               "attacked loop is unstable")

    @cached_property
    def attack_residual_coupling(self) -> StateSpace:
        """Residual-to-reference leakage created by the attack (plant view)."""
        return series(self.reference_warp, self.effective_input_row(),
                      self.attack_gain, self.effective_residual_column())

    def controller_perturbation(self) -> tuple[StateSpace, StateSpace]:
        """Equivalent perturbation of the controller factor rows."""
        p, m = self.octet.plant.p, self.octet.plant.m
        perturbed = series(scale(self.effective_input_row(), -1.0),
                           self.attack_gain)
        return _cols(perturbed, 0, p), _cols(perturbed, p, p + m)

    @cached_property
    def _clean_data_recovery(self) -> StateSpace:
        """(I - attack_gain)^{-1}: maps the station's data pair back to the
        plant's.  Noncausal for pure delays (e.g. replay), in which case the
        whole station view has no causal operator form."""
        p, m = self.octet.plant.p, self.octet.plant.m
        eye = StateSpace.identity(p + m)
        try:
            candidate = inverse(parallel(eye, scale(self.attack_gain, -1.0)))
        except ValueError as exc:
            raise ValueError("ill-posed attack algebra: the station-view "
                             f"rewriting is noncausal ({exc})") from None
        return _require_stable(candidate, "ill-posed attack algebra: the "
                               "station-view inversion is unstable")

    @cached_property
    def _residual_feedthrough(self) -> StateSpace:
        """(I - attack_gain)^{-1} attack_gain, shared by the station view."""
        return series(self._clean_data_recovery, self.attack_gain)

    @cached_property
    def station_noise_channel(self) -> StateSpace:
        """Map from the effective channel injections to the station residual."""
        return series(self.octet.kernel_row(), self._clean_data_recovery)

    @cached_property
    def station_data_warp(self) -> StateSpace:
        """Operator distorting the station's data pair under the attack."""
        p, m = self.octet.plant.p, self.octet.plant.m
        chain = series(self.effective_residual_column(),
                       self.octet.kernel_row(), self._residual_feedthrough)
        return _require_stable(parallel(StateSpace.identity(p + m), chain),
                               "ill-posed attack algebra")

    @cached_property
    def station_residual_warp(self) -> StateSpace:
        """Closed-loop gain multiplying the plant residual in the station
        view."""
        m = self.octet.plant.m
        chain = series(self.octet.kernel_row(), self._residual_feedthrough,
                       self.effective_residual_column())
        candidate = inverse(parallel(StateSpace.identity(m), chain))
        return _require_stable(candidate, "ill-posed attack algebra")

    @cached_property
    def station_reference_leak(self) -> StateSpace:
        """Reference-to-residual leakage in the station view."""
        return series(scale(self.station_residual_warp, -1.0),
                      self.octet.kernel_row(), self._residual_feedthrough,
                      self.octet.image_column())

    @cached_property
    def station_additive_channel(self) -> StateSpace:
        """Map from the effective additive injections to the station-view
        residual perturbation."""
        return series(scale(self.station_residual_warp, -1.0),
                      self.station_noise_channel)

    @cached_property
    def effective_additive_gain(self) -> StateSpace:
        """Reshapes raw additive injections when they ride on a loop
        operator tapping the clean signals."""
        p, m = self.octet.plant.p, self.octet.plant.m
        sign = _sign_split(p, m)
        att = self.attack
        if att is None or att.loop_operator is None or att.tap == "transmitted":
            return sign
        well_posed = parallel(StateSpace.identity(p + m),
                              series(att.loop_operator,
                                     _input_projector(p, m)))
        return series(sign, inverse(well_posed))


def build_loop_operators(octet: CoprimeOctet,
                         fault: Optional[FaultSpec] = None,
                         attack: Optional[AttackSpec] = None,
                         resilient: Optional[StateSpace] = None,
                         validate: bool = True,
                         horizon: int = 160) -> LoopOperatorSet:
    """Realize the closed-form loop operators for a fault/attack scenario.

    With ``validate=True`` every applicable operator prediction is compared
    against a direct simulation of an always-on copy of the scenario; a
    deviation above the paired-simulation tolerance raises.
    """
    ops = LoopOperatorSet(octet, fault=fault, attack=attack,
                          resilient=resilient)
    if validate:
        gaps = validate_loop_operators(ops, horizon=horizon)
        bad = {name: gap for name, gap in gaps.items()
               if gap > PAIRED_SIM_TOL}
        if bad:
            raise ValueError(
                "operator realization deviates from direct simulation: "
                + ", ".join(f"{name}={gap:.3e}" for name, gap in bad.items()))
    return ops


def _probe_reference(p: int, horizon: int) -> Signal:
    k = np.arange(horizon)
    data = np.stack([0.85 ** k * np.sin(0.7 * k + 0.4 * (j + 1))
                     for j in range(p)], axis=1)
    return Signal(data)


def validate_loop_operators(ops: LoopOperatorSet,
                            horizon: int = 160) -> dict[str, float]:
    """Paired-simulation gaps between operator predictions and direct runs.

    Windows are widened to the whole horizon: the operators are
    time-invariant objects and are checked against an always-on scenario.
    """
    octet = ops.octet
    p, m = octet.plant.p, octet.plant.m
    v = _probe_reference(p, horizon)
    gaps: dict[str, float] = {}

    controller = (StationPolicy(ops.resilient) if ops.resilient is not None
                  else None)

    if ops.fault is not None:
        spec = ops.fault.with_window(None)
        trace = run_closed_loop(octet.plant, octet, controller, None,
                                spec, None, v, horizon)
        r_pred = simulate(ops.fault_reference_coupling, v)[0].data
        if spec.additive is not None:
            forcing = np.zeros((horizon, m))
            span = min(horizon, len(spec.additive))
            forcing[:span] = spec.additive.data[:span]
            shaped = series(ops.fault_sensitivity, octet.left_den)
            r_pred = r_pred + simulate(shaped, Signal(forcing))[0].data
        pred = (simulate(octet.image_column(), v)[0].data
                + simulate(ops.effective_residual_column(),
                           Signal(r_pred))[0].data)
        direct = np.hstack([trace.u, trace.y])
        gaps["fault_response"] = float(np.max(np.abs(direct - pred)))

    spec = _operator_attack_spec(ops.attack)
    if spec is not None:
        trace = run_closed_loop(octet.plant, octet, controller, None, None,
                                spec, v, horizon, preroll=0)
        v_warp = simulate(ops.reference_warp, v)[0].data
        plant_pred = simulate(octet.image_column(), Signal(v_warp))[0].data
        plant_direct = np.hstack([trace.u_attacked, trace.y])
        gaps["plant_side_attack_response"] = float(
            np.max(np.abs(plant_direct - plant_pred)))

        try:
            leak_op = ops.station_reference_leak
        except ValueError:
            leak_op = None  # station view has no causal form (pure delays)
        if leak_op is not None:
            leak = simulate(leak_op, v)[0].data
            station_pred = (simulate(octet.image_column(), v)[0].data
                            + simulate(ops.effective_residual_column(),
                                       Signal(leak))[0].data)
            station_direct = np.hstack([trace.u, trace.y_attacked])
            gaps["station_side_attack_response"] = float(
                np.max(np.abs(station_direct - station_pred)))

        gaps["controller_duality"] = controller_duality_gap(
            ops, v=v, horizon=horizon)
    return gaps


def _operator_attack_spec(att: Optional[AttackSpec]) -> Optional[AttackSpec]:
    """Always-on attack carrying only the operator content (the injections of
    a custom attack are outside the scope of the operator identities)."""
    if att is None:
        return None
    if att.kind == "replay":
        return AttackSpec("replay", replay_delay=att.replay_delay)
    if att.kind in ("multiplicative", "custom") and att.loop_operator is not None:
        return AttackSpec("multiplicative", loop_operator=att.loop_operator,
                          tap=att.tap)
    return None


def controller_duality_gap(ops: LoopOperatorSet, v: Optional[Signal] = None,
                           horizon: int = 160) -> float:
    """Deviation between the direct attacked run and its re-expression as an
    unattacked loop driven by a perturbed controller.

    The attacked loop is replayed as: plant under the perturbed
    output-feedback law, fed by the correspondingly filtered reference; the
    transmitted input and true output of both runs are compared.
    """
    octet = ops.octet
    plant = octet.plant
    p = plant.p
    if v is None:
        v = _probe_reference(p, horizon)
    controller = (StationPolicy(ops.resilient) if ops.resilient is not None
                  else None)
    spec = _operator_attack_spec(ops.attack)
    if spec is None:
        raise ValueError("the duality gap needs an attack with operator "
                         "content")
    trace = run_closed_loop(plant, octet, controller, None, None, spec, v,
                            horizon, preroll=0)

    delta_x, delta_y = ops.controller_perturbation()
    x_row, y_row = ops._input_row_parts()
    x_pert = parallel(x_row, delta_x)
    y_pert = parallel(y_row, delta_y)
    injected = simulate(inverse(x_pert), v)[0]
    k_pert = series(inverse(x_pert), scale(y_pert, -1.0))
    # Transmitted input of the equivalent loop: (I - K G)^{-1} injection.
    input_map = inverse(parallel(StateSpace.identity(p),
                                 scale(series(k_pert, plant), -1.0)))
    ua = simulate(input_map, injected)[0]
    y = simulate(plant, ua)[0]
    direct = np.hstack([trace.u_attacked, trace.y])
    pred = np.hstack([ua.data, y.data])
    return float(np.max(np.abs(direct - pred)))
