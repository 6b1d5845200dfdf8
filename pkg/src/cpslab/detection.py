"""Residual evaluation and decision logic for the two-node loop.

The disturbance-to-residual channel is whitened by a co-inner-outer
factorization, the whitened residual is scored by a chi-square or l2
statistic against a calibrated threshold, and three monitoring schemes
combine the plant-side and station-side residuals into simultaneous
fault and attack verdicts.  A dedicated watermark protocol detects
replay attacks that are invisible to plain residual monitors.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.special import gammaincinv

from .lticore import (
    Signal,
    StateSpace,
    inverse,
    parallel,
    scale,
    series,
    simulate,
    sqrt_psd,
    sym,
)
from .lticore import _solve_dare_general
from .factorization import (
    CoprimeOctet,
    FactorizationParams,
    build_octet,
    default_params,
)
from .simloop import (
    DIVERGENCE_LIMIT,
    REPLAY_SETTLING,
    AttackSpec,
    DisturbanceModel,
)

# Absolute floor for the deterministic reference-deviation test: the channel
# carries no stochastic term, so anything above pure round-off is an attack.
NOISE_FLOOR = 1e-6

_EVAL_MODES = ("chi2", "l2")


# ---------------------------------------------------------------------------
# Configuration and reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvaluationConfig:
    """How a residual series is scored and thresholded.

    ``chi2`` mode scores each step as a quadratic form against the residual
    covariance and thresholds at the chi-square quantile for false-alarm
    rate ``alpha``.  ``l2`` mode accumulates the residual energy over
    ``window`` trailing steps (all past steps when None) and thresholds at
    the deterministic disturbance bound ``delta_d``.
    """

    mode: str = "chi2"
    alpha: float = 0.05
    delta_d: float = 1.0
    window: Optional[int] = None

    def __post_init__(self) -> None:
        if self.mode not in _EVAL_MODES:
            raise ValueError(f"unknown evaluation mode {self.mode!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie strictly between 0 and 1")
        if self.delta_d <= 0.0:
            raise ValueError("the l2 bound must be positive")
        if self.window is not None and int(self.window) < 1:
            raise ValueError("the evaluation window must cover at least "
                             "one step")


def threshold(config: EvaluationConfig, m: int) -> float:
    """Alarm threshold for an m-channel residual under the given config."""
    if m < 1:
        raise ValueError("the residual dimension must be positive")
    if config.mode == "chi2":
        return float(2.0 * gammaincinv(0.5 * m, 1.0 - config.alpha))
    return float(config.delta_d)


@dataclass
class DetectionReport:
    """Outcome of evaluating one residual channel.

    ``alarms`` are exactly the steps whose statistic exceeds the threshold;
    ``verdict`` is the scheme-level conclusion drawn from them.
    """

    statistic: Signal
    threshold: float
    alarms: list[int]
    verdict: str
    summary: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.statistic.dim != 1:
            raise ValueError("the decision statistic must be scalar")
        expected = np.flatnonzero(
            self.statistic.data[:, 0] > self.threshold).tolist()
        if list(self.alarms) != expected:
            raise ValueError("alarms must be exactly the steps whose "
                             "statistic exceeds the threshold")
        if self.verdict not in ("fault", "attack", "none"):
            raise ValueError(f"unknown verdict {self.verdict!r}")

    def to_json_dict(self) -> dict:
        return {
            "statistic": self.statistic.data[:, 0].tolist(),
            "threshold": self.threshold,
            "alarms": list(self.alarms),
            "verdict": self.verdict,
            "summary": self.summary,
        }

    def export_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json_dict(), sort_keys=True,
                                   indent=2) + "\n")
        return path

    def export_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["k", "statistic", "alarm"])
            flags = np.zeros(len(self.statistic), dtype=int)
            flags[list(self.alarms)] = 1
            for k in range(len(self.statistic)):
                writer.writerow([str(k),
                                 format(float(self.statistic.data[k, 0]),
                                        ".17g"),
                                 str(int(flags[k]))])
        return path


def _evaluate_series(values: np.ndarray, level: float, label: str,
                     injection: Optional[int], extra: Optional[dict] = None,
                     ) -> DetectionReport:
    """Wrap a scalar statistic series into a report with summary metrics."""
    values = np.asarray(values, dtype=float).reshape(-1)
    alarms = np.flatnonzero(values > level).tolist()
    verdict = label if alarms else "none"
    steps = len(values)
    summary: dict = {
        "alarm_count": len(alarms),
        "alarm_rate": len(alarms) / steps if steps else 0.0,
        "first_alarm": alarms[0] if alarms else None,
        "injection_index": injection,
    }
    if injection is not None:
        pre = [a for a in alarms if a < injection]
        summary["false_alarm_rate"] = len(pre) / injection if injection else 0.0
        post = [a for a in alarms if a >= injection]
        summary["detection_delay"] = (post[0] - injection) if post else None
    else:
        summary["false_alarm_rate"] = summary["alarm_rate"]
        summary["detection_delay"] = None
    if extra:
        summary.update(extra)
    return DetectionReport(statistic=Signal(values[:, None]), threshold=level,
                           alarms=alarms, verdict=verdict, summary=summary)


def _chi2_series(residual: np.ndarray, covariance: np.ndarray) -> np.ndarray:
    """Per-step quadratic score r(k)' cov^{-1} r(k)."""
    residual = np.atleast_2d(np.asarray(residual, dtype=float))
    solved = np.linalg.solve(covariance, residual.T)
    return np.einsum("km,mk->k", residual, solved)


def _l2_series(residual: np.ndarray, window: Optional[int]) -> np.ndarray:
    """Trailing-window (or running) l2 norm of the residual."""
    residual = np.atleast_2d(np.asarray(residual, dtype=float))
    sq = np.sum(residual ** 2, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(sq)])
    if window is None:
        return np.sqrt(cum[1:])
    window = int(window)
    lo = np.maximum(0, np.arange(1, len(sq) + 1) - window)
    return np.sqrt(cum[1:] - cum[lo])


def _statistic(residual: np.ndarray, covariance: np.ndarray,
               config: EvaluationConfig) -> tuple[np.ndarray, float]:
    m = residual.shape[1]
    if config.mode == "chi2":
        return _chi2_series(residual, covariance), threshold(config, m)
    return _l2_series(residual, config.window), threshold(config, m)


def _injection_index(trace, key: str) -> Optional[int]:
    cfg = getattr(trace, "config", None)
    if isinstance(cfg, dict):
        entry = cfg.get(key)
        if isinstance(entry, dict) and entry.get("window"):
            return int(entry["window"][0])
    return None


# ---------------------------------------------------------------------------
# Co-inner-outer factorization and whitening
# ---------------------------------------------------------------------------

def _filter_riccati(a: np.ndarray, b: np.ndarray, c: np.ndarray,
                    d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stabilizing covariance solution of the output spectral factorization.

    Returns (innovation covariance, injection gain) for the channel
    (a, b, c, d); raises when the output covariance degenerates, which is
    the state-space face of rank loss on the unit circle.
    """
    n, m = a.shape[0], c.shape[0]
    r0 = d @ d.T
    if n == 0:
        cov = r0
        if np.min(np.linalg.eigvalsh(sym(cov))) <= 1e-12 * max(
                1.0, float(np.linalg.norm(cov))):
            raise ValueError("the channel loses row rank on the unit circle")
        return cov, np.zeros((0, m))
    scale0 = max(1.0, float(np.linalg.norm(r0)))
    if np.min(np.linalg.eigvalsh(sym(r0))) > 1e-10 * scale0:
        cov_state, _ = _solve_dare_general(a.T, c.T, b @ b.T, r0, b @ d.T,
                                           tol=1e-8)
    else:
        # Direct covariance recursion; converges because the channel is
        # stable, and tolerates a singular feedthrough term.
        cov_state = sym(b @ b.T)
        for _ in range(200_000):
            inner_cov = c @ cov_state @ c.T + r0
            if np.min(np.linalg.eigvalsh(sym(inner_cov))) <= 1e-12 * max(
                    1.0, float(np.linalg.norm(inner_cov))):
                raise ValueError(
                    "the channel loses row rank on the unit circle")
            gain = np.linalg.solve(
                inner_cov.T, (a @ cov_state @ c.T + b @ d.T).T).T
            nxt = sym(a @ cov_state @ a.T + b @ b.T
                      - gain @ inner_cov @ gain.T)
            if np.linalg.norm(nxt - cov_state) <= 1e-13 * max(
                    1.0, float(np.linalg.norm(nxt))):
                cov_state = nxt
                break
            cov_state = nxt
        else:
            raise RuntimeError("covariance recursion did not converge")
    inner_cov = sym(c @ cov_state @ c.T + r0)
    if np.min(np.linalg.eigvalsh(inner_cov)) <= 1e-10 * max(
            1.0, float(np.linalg.norm(inner_cov))):
        raise ValueError("the channel loses row rank on the unit circle")
    gain = np.linalg.solve(inner_cov.T, (a @ cov_state @ c.T + b @ d.T).T).T
    return inner_cov, gain


def coinner_outer(nd: StateSpace) -> tuple[StateSpace, StateSpace]:
    """Factor a stable channel as (stably invertible) times (co-inner).

    The first factor is square with a stable inverse; the second satisfies
    inner(z) inner(z)* = I on the unit circle, so post-multiplying the
    inverse of the first factor onto the channel is an energy contraction.
    Raises when the channel loses row rank on the unit circle.
    """
    if not (nd.stable or nd.is_schur()):
        raise ValueError("the channel must be stable")
    m = nd.m
    inner_cov, gain = _filter_riccati(nd.A, nd.B, nd.C, nd.D)
    root = sqrt_psd(inner_cov)
    co = series(StateSpace(nd.A, gain, nd.C, np.eye(m), stable=True),
                StateSpace.static(root))
    co_inv = inverse(co)
    if not co_inv.is_schur():
        raise ValueError("the channel loses row rank on the unit circle; "
                         "the outer factor is not stably invertible")
    inner = series(co_inv, nd)
    return co, inner


@dataclass(frozen=True)
class WhitenedResidualGen:
    """Post-filter that turns the raw residual into a whitened one.

    ``whitener`` is the stable inverse of the outer factor; applying it to
    the residual leaves the co-inner part of the disturbance channel, so in
    stochastic operation the whitened residual is white with ``covariance``
    and in deterministic operation its energy never exceeds the
    disturbance energy.
    """

    whitener: StateSpace
    co_outer: StateSpace
    co_inner: StateSpace
    covariance: np.ndarray

    def whiten(self, residual: Signal) -> Signal:
        return simulate(self.whitener, residual)[0]


def whitening_from_disturbance(octet: CoprimeOctet,
                               disturbance: Optional[DisturbanceModel],
                               ) -> WhitenedResidualGen:
    """Build the whitening filter for the closed-loop residual channel.

    In gaussian mode the disturbance covariance is absorbed into the
    channel before factoring, so the whitened residual has identity
    covariance.  Without a stochastic disturbance the residual is left
    untouched and scored against identity covariance.
    """
    m = octet.plant.m
    if disturbance is None or disturbance.mode == "none":
        ident = StateSpace.identity(m)
        return WhitenedResidualGen(whitener=ident, co_outer=ident,
                                   co_inner=ident, covariance=np.eye(m))
    nd = disturbance.disturbance_to_residual(octet)
    if disturbance.mode == "gaussian":
        chol = sla.block_diag(np.linalg.cholesky(disturbance.process_cov),
                              np.linalg.cholesky(disturbance.measurement_cov))
        nd = StateSpace(nd.A, nd.B @ chol, nd.C, nd.D @ chol, stable=True)
    co, inner = coinner_outer(nd)
    return WhitenedResidualGen(whitener=inverse(co), co_outer=co,
                               co_inner=inner, covariance=np.eye(m))


def calibrate_covariance(octet: CoprimeOctet, disturbance: DisturbanceModel,
                         whitener: Optional[StateSpace] = None,
                         steps: int = 10_000, seed: int = 0) -> np.ndarray:
    """Empirical covariance of the (optionally whitened) residual.

    Runs the attack-free residual channel on freshly drawn noise for
    ``steps`` samples; used when the covariance is not analytically
    available.
    """
    if disturbance.mode != "gaussian":
        raise ValueError("covariance calibration needs a stochastic "
                         "disturbance")
    rng = np.random.default_rng(seed)
    draws = disturbance.draw(0, steps, rng)
    resid = simulate(disturbance.disturbance_to_residual(octet),
                     Signal(draws))[0]
    if whitener is not None:
        resid = simulate(whitener, resid)[0]
    burn = min(steps // 10, 500)
    data = resid.data[burn:]
    return sym(data.T @ data / data.shape[0])


# ---------------------------------------------------------------------------
# Scheme A: plant-side simultaneous monitoring
# ---------------------------------------------------------------------------

def scheme_a(trace, octet: CoprimeOctet,
             disturbance: Optional[DisturbanceModel] = None,
             config: Optional[EvaluationConfig] = None,
             ) -> tuple[DetectionReport, DetectionReport]:
    """Plant-side fault and attack monitoring from one recorded run.

    The attack statistic is the deviation of the plant-side input residual
    from the reference, which is exactly zero in attack-free operation
    whatever the noise or fault; it is scored against an absolute floor.
    The fault statistic is the whitened output residual, which no actuation
    or measurement channel attack can move; it is scored per the config.
    Returns (fault report, attack report).
    """
    if getattr(trace, "v", None) is None:
        raise ValueError("the plant-side monitor needs the reference "
                         "recorded in the trace")
    config = config or EvaluationConfig()

    deviation = np.asarray(trace.r_u) - np.asarray(trace.v)
    attack_stat = np.linalg.norm(np.atleast_2d(deviation), axis=1)
    attack_report = _evaluate_series(
        attack_stat, NOISE_FLOOR, "attack", _injection_index(trace, "attack"),
        extra={"channel": "input-residual deviation"})

    gen = whitening_from_disturbance(octet, disturbance)
    whitened = gen.whiten(Signal(np.asarray(trace.r_y))).data
    stat, level = _statistic(whitened, gen.covariance, config)
    fault_report = _evaluate_series(
        stat, level, "fault", _injection_index(trace, "fault"),
        extra={"channel": "whitened output residual", "mode": config.mode})
    return fault_report, attack_report


# ---------------------------------------------------------------------------
# Scheme B: station-side monitoring behind a relayed attack verdict
# ---------------------------------------------------------------------------

def scheme_b(plant_side_report: DetectionReport, station_trace,
             octet: CoprimeOctet,
             config: Optional[EvaluationConfig] = None,
             disturbance: Optional[DisturbanceModel] = None,
             ) -> DetectionReport:
    """Station-side fault monitoring gated by the plant-side attack verdict.

    Three steps: the plant side monitors the channels and transmits its
    attack verdict over a channel assumed intact; the station scores its
    own whitened residual for faults; the combined verdict trusts the fault
    score only while no attack alarm is active, because channel attacks can
    silently corrupt the station-side residual.
    """
    config = config or EvaluationConfig()
    gen = whitening_from_disturbance(octet, disturbance)
    whitened = gen.whiten(Signal(np.asarray(station_trace.r_y_station))).data
    stat, level = _statistic(whitened, gen.covariance, config)
    report = _evaluate_series(
        stat, level, "fault", _injection_index(station_trace, "fault"),
        extra={"channel": "station-side whitened residual",
               "mode": config.mode,
               "relayed_attack_verdict": plant_side_report.verdict})
    if plant_side_report.verdict == "attack":
        report.verdict = "attack"
    return report


# ---------------------------------------------------------------------------
# Scheme C: plant-side residual masking
# ---------------------------------------------------------------------------

def _masking_pieces(octet: CoprimeOctet, residual_gain: StateSpace,
                    ) -> tuple[StateSpace, StateSpace, StateSpace]:
    """(I - X G), its stable inverse, and the station-side masking filter.

    X is the controller-side input factor and G the plant-side residual
    gain; the masking filter maps the station reference onto the shift it
    induces in the station-side residual.
    """
    p = octet.plant.p
    if (residual_gain.p, residual_gain.m) != (p, p):
        raise ValueError("the masking gain must act on the input residual")
    loop = StateSpace.identity(p) - series(octet.ctrl_left_den, residual_gain)
    try:
        recovery = inverse(loop)
    except Exception as exc:
        raise ValueError(f"the masking loop is ill-posed: {exc}") from None
    if not recovery.is_schur():
        raise ValueError("unstable inverse: the masking gain must keep "
                         "I minus (controller input factor)(gain) stably "
                         "invertible")
    masking = series(octet.left_num, residual_gain, recovery)
    return loop, recovery, masking


def masked_reference(octet: CoprimeOctet, residual_gain: StateSpace,
                     nominal: Signal) -> Signal:
    """Station reference that restores the nominal response under masking.

    With the plant side feeding its input residual through the gain, the
    station must track a corrected reference so the applied input and the
    output reproduce the nominal closed-loop data.
    """
    loop, _, _ = _masking_pieces(octet, residual_gain)
    return simulate(loop, nominal)[0]


def scheme_c(trace, octet: CoprimeOctet, residual_gain: StateSpace,
             config: Optional[EvaluationConfig] = None,
             disturbance: Optional[DisturbanceModel] = None,
             ) -> tuple[DetectionReport, DetectionReport]:
    """Masked-loop monitoring: plant-side faults, station-side attacks.

    The trace must come from a run whose plant side feeds the input
    residual through ``residual_gain`` (kept secret from the attacker) and
    whose station tracks the corrected reference.  Faults are scored from
    the plant-side whitened residual as in the plant-side scheme.  Attacks
    are scored from the station-side residual minus the masking filter
    applied to the reference: attack-free this difference carries only
    noise, while any channel injection consistent with the unmasked loop
    leaves a signature the attacker cannot cancel without knowing the gain.
    Returns (fault report, attack report).
    """
    config = config or EvaluationConfig()
    _, _, masking = _masking_pieces(octet, residual_gain)

    gen = whitening_from_disturbance(octet, disturbance)

    fault_white = gen.whiten(Signal(np.asarray(trace.r_y))).data
    fault_stat, fault_level = _statistic(fault_white, gen.covariance, config)
    fault_report = _evaluate_series(
        fault_stat, fault_level, "fault", _injection_index(trace, "fault"),
        extra={"channel": "whitened output residual", "mode": config.mode})

    expected = simulate(masking, Signal(np.asarray(trace.v)))[0].data
    deviation = np.asarray(trace.r_y_station) - expected
    attack_white = gen.whiten(Signal(deviation)).data
    attack_stat, attack_level = _statistic(attack_white, gen.covariance,
                                           config)
    attack_report = _evaluate_series(
        attack_stat, attack_level, "attack", _injection_index(trace, "attack"),
        extra={"channel": "station-side residual minus masked reference",
               "mode": config.mode})
    return fault_report, attack_report


# ---------------------------------------------------------------------------
# Kalman-weighted octet construction
# ---------------------------------------------------------------------------

def kalman_gain(plant: StateSpace, disturbance: DisturbanceModel,
                ) -> tuple[np.ndarray, np.ndarray]:
    """Noise-weighted observer gain and innovation covariance.

    Solves the filter Riccati equation weighted by the disturbance
    covariances; the returned gain makes the observer innovation a white
    sequence with the returned covariance.
    """
    if disturbance.mode != "gaussian":
        raise ValueError("a noise-weighted gain needs a gaussian "
                         "disturbance model")
    a, c = plant.A, plant.C
    e_d = disturbance.state_noise_matrix
    f_d = disturbance.output_noise_matrix
    if e_d.shape[0] != plant.n or f_d.shape[0] != plant.m:
        raise ValueError("disturbance coupling does not fit the plant")
    cov = sla.block_diag(disturbance.process_cov, disturbance.measurement_cov)
    q_w = sym(e_d @ cov @ e_d.T)
    r_v = sym(f_d @ cov @ f_d.T)
    s_n = e_d @ cov @ f_d.T
    if np.min(np.linalg.eigvalsh(r_v)) <= 1e-12 * max(
            1.0, float(np.linalg.norm(r_v))):
        raise ValueError("the measurement channel needs full-rank noise "
                         "for a noise-weighted gain")
    if plant.n == 0:
        return np.zeros((0, plant.m)), r_v
    state_cov, _ = _solve_dare_general(a.T, c.T, q_w, r_v, s_n, tol=1e-8)
    innovation_cov = sym(c @ state_cov @ c.T + r_v)
    gain = np.linalg.solve(innovation_cov.T,
                           (a @ state_cov @ c.T + s_n).T).T
    return gain, innovation_cov


def kalman_octet(plant: StateSpace, disturbance: DisturbanceModel,
                 state_feedback: Optional[np.ndarray] = None) -> CoprimeOctet:
    """Unit-weight factorization built around the noise-weighted observer.

    The observer gain comes from the disturbance covariances, so the octet's
    output residual is the innovation sequence; the state feedback defaults
    to the normalized design for the plant.
    """
    gain, _ = kalman_gain(plant, disturbance)
    if state_feedback is None:
        state_feedback = default_params(plant).state_feedback
    params = FactorizationParams(
        state_feedback=np.atleast_2d(np.asarray(state_feedback, float)),
        observer_gain=gain,
        input_weight=np.eye(plant.p),
        output_weight=np.eye(plant.m),
    )
    return build_octet(plant, params)


# ---------------------------------------------------------------------------
# Watermark protocol for replay detection
# ---------------------------------------------------------------------------

def _check_watermark_octets(kalman: CoprimeOctet, detector: CoprimeOctet,
                            ) -> None:
    if kalman is None:
        raise ValueError("the watermark detector needs the octet built "
                         "around the noise-weighted observer gain")
    for name, octet in (("noise-weighted", kalman), ("detector", detector)):
        params = octet.params
        if not (np.allclose(params.input_weight, np.eye(octet.plant.p))
                and np.allclose(params.output_weight,
                                np.eye(octet.plant.m))):
            raise ValueError(f"the {name} octet must use unit weights")
    if not np.allclose(kalman.params.state_feedback,
                       detector.params.state_feedback):
        raise ValueError("both octets must share the state-feedback setting")
    for mat_a, mat_b in zip(
            (kalman.plant.A, kalman.plant.B, kalman.plant.C, kalman.plant.D),
            (detector.plant.A, detector.plant.B, detector.plant.C,
             detector.plant.D)):
        if not np.allclose(mat_a, mat_b):
            raise ValueError("both octets must factor the same plant")


def watermark_reshaper(kalman: CoprimeOctet, detector: CoprimeOctet,
                       ) -> StateSpace:
    """Filter connecting the detector-gain kernel to the innovation kernel.

    Adding this filter times the innovation residual to the noise-weighted
    input kernel reproduces the detector-gain input kernel exactly; it is
    the cross term of the parameter transform between the two octets.
    """
    _check_watermark_octets(kalman, detector)
    plant = detector.plant
    gain_det = detector.params.observer_gain
    gain_kal = kalman.params.observer_gain
    return StateSpace(plant.A - gain_det @ plant.C, gain_kal - gain_det,
                      detector.params.state_feedback,
                      np.zeros((plant.p, plant.m)), stable=True)


def _recovery_inverse(kalman: CoprimeOctet, q: StateSpace) -> StateSpace:
    """Stable inverse of the plant-side watermark-stripping loop.

    The plant recovers the control implicitly through I minus (plant
    kernel numerator)(watermark filter); the protocol requires that loop
    to be stably invertible, otherwise channel corruption excites an
    unbounded internal response.
    """
    m = kalman.plant.m
    loop = StateSpace.identity(m) - series(kalman.left_num, q)
    try:
        recovered = inverse(loop)
    except Exception as exc:
        raise ValueError(
            f"the watermark recovery loop is ill-posed: {exc}") from None
    if not recovered.is_schur():
        raise ValueError("the watermark recovery loop must be stably "
                         "invertible; pick a filter keeping I minus "
                         "(plant kernel numerator)(filter) stably invertible")
    return recovered


def watermark_channel_maps(kalman: CoprimeOctet, detector: CoprimeOctet,
                           q: StateSpace) -> tuple[StateSpace, StateSpace]:
    """Exact maps from the channel injections to the watermark detector.

    Returns (input map, output map): the detector output equals the input
    map applied to the actuation injection plus the output map applied to
    the measurement injection.  The maps account for the recovery loop on
    the plant side, which the summary display of the protocol neglects.
    """
    _check_watermark_octets(kalman, detector)
    p, m = detector.plant.p, detector.plant.m
    if (q.p, q.m) != (m, p):
        raise ValueError("the watermark filter must map the output residual "
                         "to the input channel")
    reshaper = watermark_reshaper(kalman, detector)
    x_kal = kalman.input_kernel_row()
    x_n = _input_part(x_kal, p)
    y_n = _output_part(x_kal, p)
    correction = series(series(x_n, q) - reshaper,
                        _recovery_inverse(kalman, q))
    input_map = parallel(x_n, series(correction, kalman.left_num))
    output_map = parallel(scale(y_n, -1.0), series(correction,
                                                   kalman.left_den))
    return input_map, output_map


def _input_part(row: StateSpace, p: int) -> StateSpace:
    return StateSpace(row.A, row.B[:, :p], row.C, row.D[:, :p],
                      stable=row.stable)


def _output_part(row: StateSpace, p: int) -> StateSpace:
    return StateSpace(row.A, row.B[:, p:], row.C, row.D[:, p:],
                      stable=row.stable)


@dataclass
class WatermarkTrace:
    """Per-step record of one watermarked run.

    ``u`` is the station's control before watermarking, ``u_sent`` the
    watermarked signal, ``u_received`` what the plant side received, and
    ``u_applied`` the recovered signal the plant integrated.  ``r_u`` is
    the plant-side watermark detector output, which equals the reference
    exactly whenever the channels are intact.
    """

    horizon: int
    seed: int
    v: np.ndarray
    u: np.ndarray
    u_sent: np.ndarray
    u_received: np.ndarray
    u_applied: np.ndarray
    y: np.ndarray
    y_station: np.ndarray
    r_y: np.ndarray
    r_y_station: np.ndarray
    watermark: np.ndarray
    r_u: np.ndarray
    a_u: np.ndarray
    a_y: np.ndarray
    diverged: bool = False
    diverged_at: Optional[int] = None
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("v", "u", "u_sent", "u_received", "u_applied", "y",
                     "y_station", "r_y", "r_y_station", "watermark", "r_u",
                     "a_u", "a_y"):
            if getattr(self, name).shape[0] != self.horizon:
                raise ValueError(f"channel {name} does not span the horizon")

    def signal(self, name: str) -> Signal:
        return Signal(getattr(self, name))


def run_watermark_loop(plant: StateSpace, kalman: CoprimeOctet,
                       detector: CoprimeOctet, q: StateSpace,
                       disturbance: Optional[DisturbanceModel] = None,
                       attack: Optional[AttackSpec] = None,
                       v: Optional[Signal] = None,
                       horizon: Optional[int] = None,
                       preroll: Optional[int] = None) -> WatermarkTrace:
    """Simulate the watermarked loop and record the full trace.

    The station controls with the detector-octet law, watermarks its output
    with the filtered innovation residual, and sends the sum; the plant
    side strips the watermark with its own copy of the filter and runs the
    detector on the recovered input.  Supports intact channels, additive
    injections, and measurement replay.
    """
    _check_watermark_octets(kalman, detector)
    p, m, n = plant.p, plant.m, plant.n
    if (q.p, q.m) != (m, p):
        raise ValueError("the watermark filter must map the output residual "
                         "to the input channel")
    if not (q.stable or q.is_schur()):
        raise ValueError("the watermark filter must be stable")
    _recovery_inverse(kalman, q)
    if attack is not None and attack.kind not in ("additive", "replay"):
        raise ValueError("the watermark loop supports additive and replay "
                         "channel attacks only")
    if horizon is None:
        if v is None:
            raise ValueError("provide a horizon or a reference signal")
        horizon = len(v)
    horizon = int(horizon)
    if v is None:
        v = Signal.zeros(horizon, p)
    if v.dim != p or len(v) != horizon:
        raise ValueError(f"reference must be {horizon} steps of dimension {p}")
    if disturbance is None:
        disturbance = DisturbanceModel.none(plant)
    if preroll is None:
        preroll = (attack.replay_delay + REPLAY_SETTLING
                   if attack is not None and attack.kind == "replay" else 0)
    preroll = int(preroll)
    total = preroll + horizon

    rng_noise, _ = (np.random.default_rng(s)
                    for s in np.random.SeedSequence(disturbance.seed).spawn(2))
    d_all = disturbance.draw(preroll, horizon, rng_noise)

    a, b, c, d = plant.A, plant.B, plant.C, plant.D
    fb = detector.params.state_feedback
    gain_det = detector.params.observer_gain
    gain_kal = kalman.params.observer_gain
    reshaper = watermark_reshaper(kalman, detector)

    x = np.zeros(n)
    obs_ctrl = np.zeros(n)       # station observer behind the control law
    obs_station = np.zeros(n)    # station innovation observer
    obs_plant = np.zeros(n)      # plant-side innovation observer
    q_station = np.zeros(q.n)
    q_plant = np.zeros(q.n)
    q_reshape = np.zeros(reshaper.n)
    y_history: list[np.ndarray] = []

    iur = slice(0, p)
    iy = slice(p, p + m)
    iya = slice(p + m, p + 2 * m)
    iry = slice(p + 2 * m, p + 3 * m)
    dim = p + 3 * m

    names = ("v", "u", "u_sent", "u_received", "u_applied", "y", "y_station",
             "r_y", "r_y_station", "watermark", "r_u", "a_u", "a_y")
    dims = (p, p, p, p, p, m, m, m, m, p, p, p, m)
    rec = {nm: np.zeros((horizon, dm)) for nm, dm in zip(names, dims)}
    diverged = False
    diverged_at: Optional[int] = None
    recorded = 0

    for t in range(total):
        k = t - preroll
        v_k = v.data[max(k, 0)] if k >= 0 else v.data[0]
        d_k = d_all[t]
        attack_on = attack is not None and attack.active(k)

        u = fb @ obs_ctrl + v_k

        inj_u = np.zeros(p)
        inj_y = np.zeros(m)
        replay_now = False
        if attack_on:
            if attack.kind == "additive":
                if attack.input_injection is not None \
                        and k < len(attack.input_injection):
                    inj_u = (attack.input_selector
                             @ attack.input_injection.data[k])
                if attack.output_injection is not None \
                        and k < len(attack.output_injection):
                    inj_y = (attack.output_selector
                             @ attack.output_injection.data[k])
            else:
                replay_now = True
                stale = (y_history[t - attack.replay_delay]
                         if t >= attack.replay_delay else np.zeros(m))

        big = np.zeros((dim, dim))
        rhs = np.zeros(dim)
        # Plant output.
        big[iy, iy] = np.eye(m)
        big[iy, iur] = -d
        rhs[iy] = c @ x + disturbance.output_noise_matrix @ d_k
        # Measurement channel.
        big[iya, iya] = np.eye(m)
        if replay_now:
            rhs[iya] = stale
        else:
            big[iya, iy] = -np.eye(m)
            rhs[iya] = inj_y
        # Recovered input: received minus the plant-side watermark copy.
        big[iur, iur] = np.eye(p)
        big[iur, iya] = -q.D
        big[iur, iry] = q.D
        rhs[iur] = (u + q.C @ q_station - q.D @ (c @ obs_station + d @ u)
                    + inj_u - q.C @ q_plant)
        # Plant-side innovation.
        big[iry, iry] = np.eye(m)
        big[iry, iy] = -np.eye(m)
        big[iry, iur] = d
        rhs[iry] = -c @ obs_plant

        try:
            sol = np.linalg.solve(big, rhs)
        except np.linalg.LinAlgError as exc:
            raise ValueError(
                f"ill-posed watermark loop at step {k}: {exc}") from None
        if not np.all(np.isfinite(sol)):
            raise ValueError(f"ill-posed watermark loop at step {k}")
        u_rec, y, y_stat, r_y = sol[iur], sol[iy], sol[iya], sol[iry]

        r_y_station = y_stat - c @ obs_station - d @ u
        mark = q.C @ q_station + q.D @ r_y_station
        u_sent = u + mark
        u_received = u_sent + inj_u if not replay_now else u_sent
        detector_out = (u_rec - fb @ obs_plant) + reshaper.C @ q_reshape

        if k >= 0:
            for nm, val in zip(names, (v_k, u, u_sent, u_received, u_rec, y,
                                       y_stat, r_y, r_y_station, mark,
                                       detector_out, u_received - u_sent,
                                       y_stat - y)):
                rec[nm][k] = val
            recorded = k + 1

        x = a @ x + b @ u_rec + disturbance.state_noise_matrix @ d_k
        obs_ctrl = (a @ obs_ctrl + b @ u
                    + gain_det @ (y_stat - c @ obs_ctrl - d @ u))
        obs_station = a @ obs_station + b @ u + gain_kal @ r_y_station
        obs_plant = a @ obs_plant + b @ u_rec + gain_kal @ r_y
        if q.n:
            q_station = q.A @ q_station + q.B @ r_y_station
            q_plant = q.A @ q_plant + q.B @ r_y
        if reshaper.n:
            q_reshape = reshaper.A @ q_reshape + reshaper.B @ r_y
        y_history.append(y.copy())

        worst = max(np.max(np.abs(arr), initial=0.0)
                    for arr in (x, obs_ctrl, obs_station, obs_plant,
                                q_station, q_plant, q_reshape, sol))
        if worst > DIVERGENCE_LIMIT:
            diverged = True
            diverged_at = max(k, 0)
            break

    if diverged:
        span = max(recorded, 1)
        for nm in rec:
            rec[nm] = rec[nm][:span]
        horizon_out = span
    else:
        horizon_out = horizon

    config = {
        "preroll": preroll,
        "disturbance": disturbance.to_json_dict(),
        "attack": None if attack is None else attack.to_json_dict(),
        "dimensions": {"states": n, "inputs": p, "outputs": m},
    }
    if disturbance.mode == "gaussian":
        _, innovation_cov = kalman_gain(plant, disturbance)
        config["innovation_covariance"] = innovation_cov.tolist()
    return WatermarkTrace(
        horizon=horizon_out, seed=disturbance.seed,
        **{nm: rec[nm] for nm in names},
        diverged=diverged, diverged_at=diverged_at, config=config)


def watermark_detector(trace: WatermarkTrace, kalman: CoprimeOctet,
                       detector: CoprimeOctet, q: StateSpace,
                       config: Optional[EvaluationConfig] = None,
                       variance_ratio: float = 1.0) -> DetectionReport:
    """Score the watermark detector output from a recorded run.

    Attack-free the output equals the reference exactly, so any excursion
    of the quadratic statistic is a channel attack; under measurement
    replay the output inherits the doubled innovation covariance mapped
    through the exact injection-to-detector channel, which calibrates the
    statistic.  ``variance_ratio`` scales the calibration covariance (>= 1
    is conservative).
    """
    _check_watermark_octets(kalman, detector)
    config = config or EvaluationConfig()
    if variance_ratio <= 0.0:
        raise ValueError("the variance ratio must be positive")
    p = detector.plant.p
    deviation = np.asarray(trace.r_u) - np.asarray(trace.v)

    if config.mode == "l2":
        stat = _l2_series(deviation, config.window)
        level = threshold(config, p)
    else:
        innovation_cov = trace.config.get("innovation_covariance")
        if innovation_cov is not None:
            innovation_cov = np.asarray(innovation_cov, dtype=float)
        else:
            resid = np.asarray(trace.r_y)
            innovation_cov = sym(resid.T @ resid / max(1, resid.shape[0]))
        _, output_map = watermark_channel_maps(kalman, detector, q)
        driven = 2.0 * innovation_cov
        if output_map.n:
            state_cov = sla.solve_discrete_lyapunov(
                output_map.A, output_map.B @ driven @ output_map.B.T)
            replay_cov = sym(output_map.C @ state_cov @ output_map.C.T
                             + output_map.D @ driven @ output_map.D.T)
        else:
            replay_cov = sym(output_map.D @ driven @ output_map.D.T)
        floor = 1e-12 * max(1.0, float(np.linalg.norm(replay_cov)))
        replay_cov = replay_cov + floor * np.eye(p)
        stat = _chi2_series(deviation, variance_ratio * replay_cov)
        level = threshold(config, p)

    injection = None
    att = trace.config.get("attack")
    if isinstance(att, dict) and att.get("window"):
        injection = int(att["window"][0])
    report = _evaluate_series(
        stat, level, "attack", injection,
        extra={"channel": "watermark detector output",
               "mode": config.mode, "variance_ratio": variance_ratio})
    return report
