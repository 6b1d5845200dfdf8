"""Coprime factor octets and the machinery built on them.

A plant ``G`` with a stabilizing state feedback ``F`` and observer gain ``L``
admits eight stable transfer matrices that factor both the plant and its
observer-based controller:

* right plant factors: ``G = right_num @ right_den^-1``
* left plant factors:  ``G = left_den^-1 @ left_num``
* controller factors:  ``K = -ctrl_left_den^-1 @ ctrl_left_num
  = -ctrl_right_num @ ctrl_right_den^-1``

Together they satisfy a two-sided (double Bezout) identity, which this module
validates numerically on a frequency grid at construction time.  On top of the
octet it provides: normalized (inner/co-inner) factor construction from the
two Riccati solutions, observer-based controllers parameterized by a stable
``Q``, two-site plug-in controller wrapping, the closed-form transforms that
relate octets built from different ``(F, L, V, W)`` choices, and randomized
retuning of those parameters (a moving-target defense step).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.signal import place_poles

from .lticore import (
    EPS_STAB,
    FrequencyGrid,
    StateSpace,
    eval_at,
    freq_response,
    inverse,
    parallel,
    scale,
    series,
    solve_dare,
    stack_cols,
    stack_rows,
    transfer_gap,
)

#: Residual tolerance for the two-sided factor identity on the validation grid.
BEZOUT_TOL = 1e-8
#: Tolerance for inner / co-inner Hermitian products of normalized factors.
NORMALIZED_TOL = 1e-6
#: Frequency grid used for all construction-time validation.
VALIDATION_GRID = FrequencyGrid.default(64)

_COND_LIMIT = 1e12


def _as_gain(value, rows: int, cols: int, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.shape != (rows, cols):
        raise ValueError(f"{name} must be {rows}x{cols}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _checked_inverse(mat: np.ndarray, name: str) -> np.ndarray:
    if np.linalg.cond(mat) > _COND_LIMIT:
        raise ValueError(f"{name} is singular or too ill-conditioned to invert")
    return np.linalg.inv(mat)


@dataclass(frozen=True)
class FactorizationParams:
    """The four design matrices that pin down one factor octet.

    ``state_feedback`` (inputs x states) must make A + B F Schur;
    ``observer_gain`` (states x outputs) must make A - L C Schur;
    ``input_weight`` and ``output_weight`` are invertible square scalings on
    the plant input and output channels.
    """

    state_feedback: np.ndarray
    observer_gain: np.ndarray
    input_weight: np.ndarray
    output_weight: np.ndarray

    def __post_init__(self):
        fb = np.atleast_2d(np.asarray(self.state_feedback, dtype=float))
        ob = np.atleast_2d(np.asarray(self.observer_gain, dtype=float))
        p, n = fb.shape
        m = ob.shape[1]
        if ob.shape[0] != n:
            raise ValueError(
                f"observer gain rows {ob.shape[0]} != state count {n}")
        object.__setattr__(self, "state_feedback", fb)
        object.__setattr__(self, "observer_gain", ob)
        object.__setattr__(
            self, "input_weight",
            _as_gain(self.input_weight, p, p, "input weight"))
        object.__setattr__(
            self, "output_weight",
            _as_gain(self.output_weight, m, m, "output weight"))
        for field in ("state_feedback", "observer_gain"):
            if not np.all(np.isfinite(getattr(self, field))):
                raise ValueError(f"{field} contains non-finite entries")

    def to_json_dict(self) -> dict:
        return {
            "state_feedback": self.state_feedback.tolist(),
            "observer_gain": self.observer_gain.tolist(),
            "input_weight": self.input_weight.tolist(),
            "output_weight": self.output_weight.tolist(),
        }

    @staticmethod
    def from_json_dict(data: dict) -> "FactorizationParams":
        return FactorizationParams(
            np.asarray(data["state_feedback"], dtype=float),
            np.asarray(data["observer_gain"], dtype=float),
            np.asarray(data["input_weight"], dtype=float),
            np.asarray(data["output_weight"], dtype=float),
        )


@dataclass(frozen=True)
class CoprimeOctet:
    """Eight mutually consistent stable factors of a plant/controller pair.

    The plant satisfies ``G = right_num @ right_den^-1 = left_den^-1 @
    left_num`` and the central controller ``K = -ctrl_left_den^-1 @
    ctrl_left_num = -ctrl_right_num @ ctrl_right_den^-1``; the stacked factors
    satisfy the two-sided identity

        [[ctrl_left_den, ctrl_left_num], [-left_num, left_den]]
        @ [[right_den, -ctrl_right_num], [right_num, ctrl_right_den]] == I.

    Instances are produced by :func:`build_octet` /
    :func:`build_normalized_octet`, which validate that identity on a grid.
    """

    plant: StateSpace
    params: FactorizationParams
    right_den: StateSpace      # reference -> plant input (image form)
    right_num: StateSpace      # reference -> plant output (image form)
    left_den: StateSpace       # output channel of the kernel residual
    left_num: StateSpace       # input channel of the kernel residual
    ctrl_left_den: StateSpace  # input-residual weight on u
    ctrl_left_num: StateSpace  # input-residual weight on y
    ctrl_right_den: StateSpace  # residual -> plant output (controller image)
    ctrl_right_num: StateSpace  # residual -> minus plant input

    # -- derived matrices shared by the factor realizations ------------------
    @property
    def feedback_a(self) -> np.ndarray:
        """A + B F."""
        return self.plant.A + self.plant.B @ self.params.state_feedback

    @property
    def observer_a(self) -> np.ndarray:
        """A - L C."""
        return self.plant.A - self.params.observer_gain @ self.plant.C

    @property
    def observer_b(self) -> np.ndarray:
        """B - L D."""
        return self.plant.B - self.params.observer_gain @ self.plant.D

    @property
    def feedback_c(self) -> np.ndarray:
        """C + D F."""
        return self.plant.C + self.plant.D @ self.params.state_feedback

    def kernel_row(self) -> StateSpace:
        """Map (u, y) -> output residual: [-left_num, left_den]."""
        return stack_cols(scale(self.left_num, -1.0), self.left_den)

    def input_kernel_row(self) -> StateSpace:
        """Map (u, y) -> input residual: [ctrl_left_den, ctrl_left_num]."""
        return stack_cols(self.ctrl_left_den, self.ctrl_left_num)

    def image_column(self) -> StateSpace:
        """Map reference -> (u, y): [right_den; right_num]."""
        return stack_rows(self.right_den, self.right_num)

    def residual_column(self) -> StateSpace:
        """Map output residual -> (u, y): [-ctrl_right_num; ctrl_right_den]."""
        return stack_rows(scale(self.ctrl_right_num, -1.0),
                          self.ctrl_right_den)

    def central_controller(self) -> StateSpace:
        """The Q = 0 observer-based controller."""
        return youla_controller(self, None)

    def bezout_residual(self, grid: Optional[FrequencyGrid] = None) -> float:
        """Largest grid deviation of the two-sided identity from identity."""
        grid = VALIDATION_GRID if grid is None else grid
        left = stack_rows(self.input_kernel_row(), self.kernel_row())
        right = stack_cols(self.image_column(), self.residual_column())
        product = series(left, right)
        dim = product.m
        return transfer_gap(product, StateSpace.identity(dim), grid)

    def to_json_dict(self) -> dict:
        factors = {
            name: getattr(self, name).to_json_dict()
            for name in ("right_den", "right_num", "left_den", "left_num",
                         "ctrl_left_den", "ctrl_left_num",
                         "ctrl_right_den", "ctrl_right_num")
        }
        return {
            "plant": self.plant.to_json_dict(),
            "params": self.params.to_json_dict(),
            "factors": factors,
        }

    @staticmethod
    def from_json_dict(data: dict, validate: bool = True) -> "CoprimeOctet":
        plant = StateSpace.from_json_dict(data["plant"])
        params = FactorizationParams.from_json_dict(data["params"])
        factors = {
            name: StateSpace.from_json_dict(entry)
            for name, entry in data["factors"].items()
        }
        octet = CoprimeOctet(plant=plant, params=params, **factors)
        if validate:
            _validate_octet(octet, BEZOUT_TOL)
        return octet


def _validate_octet(octet: CoprimeOctet, tol: float) -> None:
    residual = octet.bezout_residual()
    if residual >= tol:
        raise ValueError(
            f"factor identity residual {residual:.3e} exceeds {tol:.1e}")
    plant_r = series(octet.right_num, inverse(octet.right_den))
    plant_l = series(inverse(octet.left_den), octet.left_num)
    gap_r = transfer_gap(plant_r, octet.plant, VALIDATION_GRID)
    gap_l = transfer_gap(plant_l, octet.plant, VALIDATION_GRID)
    if max(gap_r, gap_l) >= tol:
        raise ValueError(
            f"factor quotients deviate from the plant by "
            f"{max(gap_r, gap_l):.3e} (tolerance {tol:.1e})")


def default_params(plant: StateSpace) -> FactorizationParams:
    """Deadbeat-style gains used when the caller supplies none.

    For single-input (resp. single-output) plants the closed-loop matrix is
    placed exactly nilpotent via the classical polynomial-assignment formula.
    Multi-channel plants get distinct real poles of magnitude <= 0.05, which
    keeps the construction well-posed where exact repeated placement at the
    origin is not.
    """
    n, p, m = plant.n, plant.p, plant.m
    a_pow = np.linalg.matrix_power(plant.A, n)
    if p == 1:
        ctrb = np.hstack([np.linalg.matrix_power(plant.A, k) @ plant.B
                          for k in range(n)])
        if np.linalg.cond(ctrb) > _COND_LIMIT:
            raise ValueError("plant is not controllable; cannot place poles")
        feedback = -(np.eye(n)[-1:, :] @ np.linalg.inv(ctrb) @ a_pow)
    else:
        poles = 0.05 * (1.0 + np.arange(n)) / n * (-1.0) ** np.arange(n)
        feedback = -place_poles(plant.A, plant.B, poles).gain_matrix
    if m == 1:
        obsv = np.vstack([plant.C @ np.linalg.matrix_power(plant.A, k)
                          for k in range(n)])
        if np.linalg.cond(obsv) > _COND_LIMIT:
            raise ValueError("plant is not observable; cannot place poles")
        observer = a_pow @ np.linalg.inv(obsv) @ np.eye(n)[:, -1:]
    else:
        poles = 0.05 * (1.0 + np.arange(n)) / n * (-1.0) ** np.arange(n)
        observer = place_poles(plant.A.T, plant.C.T, poles).gain_matrix.T
    return FactorizationParams(feedback, observer, np.eye(p), np.eye(m))


def build_octet(plant: StateSpace,
                params: Optional[FactorizationParams] = None,
                validate: bool = True) -> CoprimeOctet:
    """Construct the eight factors for ``plant`` under ``params``.

    With ``params=None`` the deadbeat-style :func:`default_params` are used.
    ``validate=False`` skips the grid checks (intended for performance
    experiments only).
    """
    if params is None:
        params = default_params(plant)
    n, p, m = plant.n, plant.p, plant.m
    fb = _as_gain(params.state_feedback, p, n, "state feedback")
    ob = _as_gain(params.observer_gain, n, m, "observer gain")
    v = params.input_weight
    w = params.output_weight
    v_inv = _checked_inverse(v, "input weight")
    w_inv = _checked_inverse(w, "output weight")

    a_f = plant.A + plant.B @ fb
    a_l = plant.A - ob @ plant.C
    b_l = plant.B - ob @ plant.D
    c_f = plant.C + plant.D @ fb
    for name, mat in (("A + B F", a_f), ("A - L C", a_l)):
        if n and max(abs(np.linalg.eigvals(mat))) >= 1.0 - EPS_STAB:
            raise ValueError(f"{name} is not Schur for the supplied gains")

    octet = CoprimeOctet(
        plant=plant,
        params=params,
        right_den=StateSpace(a_f, plant.B @ v, fb, v, stable=True),
        right_num=StateSpace(a_f, plant.B @ v, c_f, plant.D @ v, stable=True),
        left_den=StateSpace(a_l, -ob, w @ plant.C, w, stable=True),
        left_num=StateSpace(a_l, b_l, w @ plant.C, w @ plant.D, stable=True),
        ctrl_left_den=StateSpace(a_l, -b_l, v_inv @ fb, v_inv, stable=True),
        ctrl_left_num=StateSpace(a_l, -ob, v_inv @ fb, np.zeros((p, m)),
                                 stable=True),
        ctrl_right_den=StateSpace(a_f, ob @ w_inv, c_f, w_inv, stable=True),
        ctrl_right_num=StateSpace(a_f, -ob @ w_inv, fb, np.zeros((p, m)),
                                  stable=True),
    )
    if validate:
        _validate_octet(octet, BEZOUT_TOL)
    return octet


def build_normalized_octet(plant: StateSpace,
                           validate: bool = True) -> CoprimeOctet:
    """Octet whose image column is inner and kernel row co-inner.

    The gains come from the two Riccati solutions: the observer side yields
    the gain/whitener pair making the kernel row co-inner, the feedback side
    the pair making the image column inner.  Construction fails if either
    Riccati solve fails; validation additionally checks the Hermitian
    products on the grid.
    """
    obs = solve_dare("observer", plant)
    fb = solve_dare("feedback", plant)
    params = FactorizationParams(
        state_feedback=fb.gain,
        observer_gain=obs.gain,
        input_weight=fb.scaler,
        output_weight=obs.scaler,
    )
    octet = build_octet(plant, params, validate=validate)
    if validate:
        _validate_normalization(octet, NORMALIZED_TOL)
    return octet


def _validate_normalization(octet: CoprimeOctet, tol: float) -> None:
    kernel = stack_cols(octet.left_num, octet.left_den)
    image = octet.image_column()
    k_resp = freq_response(kernel, VALIDATION_GRID)
    i_resp = freq_response(image, VALIDATION_GRID)
    eye_k = np.eye(kernel.m)
    eye_i = np.eye(image.p)
    co_dev = max(np.abs(r @ r.conj().T - eye_k).max() for r in k_resp)
    in_dev = max(np.abs(r.conj().T @ r - eye_i).max() for r in i_resp)
    if max(co_dev, in_dev) >= tol:
        raise ValueError(
            f"normalization deviates from identity by "
            f"{max(co_dev, in_dev):.3e} (tolerance {tol:.1e})")


# ---------------------------------------------------------------------------
# Observer-based parameterized controllers
# ---------------------------------------------------------------------------

def closed_loop_matrix(plant: StateSpace,
                       controller: StateSpace) -> np.ndarray:
    """State matrix of the positive feedback loop u = K y, y = G u."""
    if controller.p != plant.m or controller.m != plant.p:
        raise ValueError("controller dimensions do not match the plant")
    delta = np.eye(plant.p) - controller.D @ plant.D
    if np.linalg.cond(delta) > _COND_LIMIT:
        raise ValueError("loop is not well posed (algebraic loop singular)")
    d_inv = np.linalg.inv(delta)
    # u = d_inv (C_K x_K + D_K C x)
    u_x = d_inv @ controller.D @ plant.C
    u_k = d_inv @ controller.C
    top = np.hstack([plant.A + plant.B @ u_x, plant.B @ u_k])
    bottom = np.hstack([
        controller.B @ (plant.C + plant.D @ u_x),
        controller.A + controller.B @ plant.D @ u_k,
    ])
    return np.vstack([top, bottom])


def is_stabilizing(plant: StateSpace, controller: StateSpace,
                   eps: float = EPS_STAB) -> bool:
    """True when the feedback interconnection's state matrix is Schur."""
    a_cl = closed_loop_matrix(plant, controller)
    if a_cl.size == 0:
        return True
    return max(abs(np.linalg.eigvals(a_cl))) < 1.0 - eps


def youla_controller(octet: CoprimeOctet,
                     q: Optional[StateSpace]) -> StateSpace:
    """Observer-based controller with stable residual-feedback parameter.

    The control law is: run the plant observer on (u, y), whiten the output
    innovation into the residual r_y, pass it through ``q``, and set
    u = F x_hat + V * (q applied to r_y).  ``q=None`` (or a zero system)
    yields the central controller.  The returned realization maps y -> u.
    """
    plant, params = octet.plant, octet.params
    n, p, m = plant.n, plant.p, plant.m
    if q is None:
        q = StateSpace.zeros(p, m)
    if q.p != m or q.m != p:
        raise ValueError(
            f"parameter must map {m} residuals to {p} inputs, "
            f"got {q.p} -> {q.m}")
    if not (q.stable or q.is_schur()):
        raise ValueError("parameter system must be stable")

    fb, ob = params.state_feedback, params.observer_gain
    v, w = params.input_weight, params.output_weight
    a_l, b_l = octet.observer_a, octet.observer_b
    vdw = v @ q.D @ w
    delta = np.eye(p) + vdw @ plant.D
    if np.linalg.cond(delta) > _COND_LIMIT:
        raise ValueError("parameter feedthrough creates a singular loop")
    d_inv = np.linalg.inv(delta)
    # u = d_inv [ (F - V Dq W C) x_hat + V Cq x_q + V Dq W y ]
    u_x = d_inv @ (fb - vdw @ plant.C)
    u_q = d_inv @ (v @ q.C)
    u_y = d_inv @ vdw
    # r_y = W(y - C x_hat - D u)
    r_x = -w @ plant.C - w @ plant.D @ u_x
    r_q = -w @ plant.D @ u_q
    r_y = w - w @ plant.D @ u_y
    a = np.block([
        [a_l + b_l @ u_x, b_l @ u_q],
        [q.B @ r_x, q.A + q.B @ r_q],
    ])
    b = np.vstack([b_l @ u_y + ob, q.B @ r_y])
    c = np.hstack([u_x, u_q])
    return StateSpace(a, b, c, u_y)


@dataclass(frozen=True)
class TwoSiteController:
    """A stabilizing controller split across the station and the plant side.

    The station computes ``u0 = station(y)``; the plant side runs the kernel
    residual generator r_y = left_den y - left_num u on the *actual* input and
    adds ``plant_side_q(r_y)`` to u0.  ``combined`` is the equivalent
    single-site map y -> u.
    """

    station: StateSpace
    plant_side_q: StateSpace
    octet: CoprimeOctet
    combined: StateSpace


def pnp_wrap(k0: StateSpace, q: StateSpace,
             octet: CoprimeOctet) -> TwoSiteController:
    """Wrap a default stabilizing controller with a plant-side residual term.

    The law u = k0(y) + q(r_y) with r_y the kernel residual keeps the loop
    internally stable for every stable ``q`` and sweeps all stabilizing
    controllers as ``q`` varies.  Raises if ``k0`` does not stabilize the
    plant or ``q`` is unstable.
    """
    plant = octet.plant
    p, m = plant.p, plant.m
    if k0.p != m or k0.m != p:
        raise ValueError("default controller dimensions do not match plant")
    if q.p != m or q.m != p:
        raise ValueError("plant-side parameter must map residuals to inputs")
    if not (q.stable or q.is_schur()):
        raise ValueError("plant-side parameter must be stable")
    if not is_stabilizing(plant, k0):
        raise ValueError("default controller does not stabilize the plant")
    # u = (I + Q left_num)^-1 (k0 + Q left_den) y
    loop_gain = parallel(StateSpace.identity(p), series(q, octet.left_num))
    combined = series(inverse(loop_gain),
                      parallel(k0, series(q, octet.left_den)))
    if not is_stabilizing(plant, combined):
        raise ValueError(
            "wrapped controller failed the stability check; "
            "the supplied parameter is numerically unusable")
    return TwoSiteController(station=k0, plant_side_q=q, octet=octet,
                             combined=combined)


# ---------------------------------------------------------------------------
# Transforms between octets of the same plant
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamTransform:
    """Closed-form filters relating two octets of one plant realization.

    With octets 1 and 2 built from the same (A, B, C, D):

    * ``residual_map``: output residuals transform as r_y(2) =
      residual_map r_y(1); equivalently [left_den(2) left_num(2)] =
      residual_map [left_den(1) left_num(1)].
    * ``reference_map``: image columns transform as [right_den(2);
      right_num(2)] = [right_den(1); right_num(1)] reference_map, so matched
      references satisfy v(1) = reference_map v(2).
    * ``residual_cross``: input-residual rows satisfy row(1) =
      reference_map row(2) + residual_cross [-left_num(2) left_den(2)].
    * ``youla_cross``: residual columns satisfy col(1) = col(2) residual_map
      + [right_den(2); right_num(2)] youla_cross.

    Both ``residual_map`` and ``reference_map`` are invertible with stable
    inverses.
    """

    residual_map: StateSpace
    reference_map: StateSpace
    residual_cross: StateSpace
    youla_cross: StateSpace

    def equivalent_youla(self) -> StateSpace:
        """Parameter that reproduces loop-1 data in loop-2 coordinates."""
        return series(self.youla_cross, inverse(self.residual_map))

    def reference_correction(self) -> StateSpace:
        """Residual-to-reference correction in loop-2 coordinates."""
        return series(inverse(self.reference_map), self.residual_cross)

    def matched_reference(self) -> StateSpace:
        """Filter mapping loop-1 references to equivalent loop-2 references."""
        return inverse(self.reference_map)


def param_transform(octet1: CoprimeOctet,
                    octet2: CoprimeOctet) -> ParamTransform:
    """Transforms from ``octet1``'s parameterization to ``octet2``'s.

    Both octets must be built on the *same* plant realization (identical
    A, B, C, D arrays): the closed-form filters act on shared state
    coordinates and have no meaning across different realizations.
    Validates the four factor identities on the grid before returning.
    """
    plant = octet1.plant
    for attr in ("A", "B", "C", "D"):
        if not np.allclose(getattr(plant, attr),
                           getattr(octet2.plant, attr), rtol=0.0, atol=1e-12):
            raise ValueError(
                "octets are built on different plant realizations")
    p1, p2 = octet1.params, octet2.params
    f1, l1 = p1.state_feedback, p1.observer_gain
    f2, l2 = p2.state_feedback, p2.observer_gain
    w1_inv = _checked_inverse(p1.output_weight, "output weight")
    v1_inv = _checked_inverse(p1.input_weight, "input weight")
    w2_inv = _checked_inverse(p2.output_weight, "output weight")
    v2_inv = _checked_inverse(p2.input_weight, "input weight")
    p = plant.p
    m = plant.m

    residual_map = StateSpace(
        octet2.observer_a, (l2 - l1) @ w1_inv,
        -p2.output_weight @ plant.C, p2.output_weight @ w1_inv, stable=True)
    reference_map = StateSpace(
        octet2.feedback_a, plant.B @ p2.input_weight,
        v1_inv @ (f2 - f1), v1_inv @ p2.input_weight, stable=True)
    residual_cross = parallel(
        StateSpace(octet2.feedback_a, l2 @ w2_inv, v1_inv @ (f2 - f1),
                   np.zeros((p, m)), stable=True),
        StateSpace(octet1.observer_a, (l1 - l2) @ w2_inv, -v1_inv @ f1,
                   np.zeros((p, m)), stable=True),
    )
    youla_cross = parallel(
        StateSpace(octet1.feedback_a, l1 @ w1_inv, v2_inv @ (f1 - f2),
                   np.zeros((p, m)), stable=True),
        StateSpace(octet2.observer_a, (l2 - l1) @ w1_inv, -v2_inv @ f2,
                   np.zeros((p, m)), stable=True),
    )
    transform = ParamTransform(residual_map, reference_map,
                               residual_cross, youla_cross)
    _validate_transform(octet1, octet2, transform)
    return transform


def _validate_transform(octet1: CoprimeOctet, octet2: CoprimeOctet,
                        transform: ParamTransform,
                        tol: float = BEZOUT_TOL) -> None:
    grid = VALIDATION_GRID
    kernel1 = stack_cols(octet1.left_den, octet1.left_num)
    kernel2 = stack_cols(octet2.left_den, octet2.left_num)
    gap_kernel = transfer_gap(
        kernel2, series(transform.residual_map, kernel1), grid)
    gap_image = transfer_gap(
        octet2.image_column(),
        series(octet1.image_column(), transform.reference_map), grid)
    gap_input = transfer_gap(
        octet1.input_kernel_row(),
        parallel(series(transform.reference_map, octet2.input_kernel_row()),
                 series(transform.residual_cross, octet2.kernel_row())),
        grid)
    gap_residual = transfer_gap(
        octet1.residual_column(),
        parallel(series(octet2.residual_column(), transform.residual_map),
                 series(octet2.image_column(), transform.youla_cross)),
        grid)
    worst = max(gap_kernel, gap_image, gap_input, gap_residual)
    if worst >= tol:
        raise ValueError(
            f"transform identities deviate by {worst:.3e} "
            f"(tolerance {tol:.1e})")
    for name, sys in (("residual map", transform.residual_map),
                      ("reference map", transform.reference_map)):
        inv_sys = inverse(sys)
        if inv_sys.n and max(abs(np.linalg.eigvals(inv_sys.A))) >= 1.0:
            raise ValueError(f"{name} does not have a stable inverse")


# ---------------------------------------------------------------------------
# Randomized retuning (moving-target defense step)
# ---------------------------------------------------------------------------

class RetuneResult(NamedTuple):
    octet: CoprimeOctet
    transform: ParamTransform  # from the old octet to the new one


def _sample_distinct_radii(rng: np.random.Generator, n: int) -> np.ndarray:
    for _ in range(100):
        radii = rng.uniform(0.1, 0.9, size=n)
        signs = rng.choice([-1.0, 1.0], size=n)
        poles = np.sort(radii * signs)
        if n < 2 or np.min(np.diff(poles)) > 1e-3:
            return poles
    raise RuntimeError("failed to sample distinct pole locations")


def _sample_weight(rng: np.random.Generator, size: int) -> np.ndarray:
    if size == 0:
        return np.zeros((0, 0))
    gauss = rng.standard_normal((size, size))
    q_mat, r_mat = np.linalg.qr(gauss)
    q_mat = q_mat * np.sign(np.diag(r_mat))
    return float(rng.uniform(0.5, 2.0)) * q_mat


def _place_gain(a: np.ndarray, b: np.ndarray,
                poles: np.ndarray) -> np.ndarray:
    if a.shape[0] == 1:
        # One state: solve B K = A - diag(poles) directly.
        return np.linalg.pinv(b) @ (a - poles.reshape(1, 1))
    return place_poles(a, b, poles).gain_matrix


def mtd_retune(octet: CoprimeOctet, seed: int) -> RetuneResult:
    """Rebuild the octet with randomly drawn admissible design matrices.

    New feedback/observer gains place the closed-loop poles at random
    distinct real locations of magnitude in [0.1, 0.9]; the channel weights
    are random scaled orthogonal matrices.  The same seed always yields the
    same octet.  The returned transform relates the old parameterization to
    the new one, so loop data can be matched across the switch via
    ``transform.matched_reference()`` and ``transform.equivalent_youla()``.
    """
    rng = np.random.default_rng(seed)
    plant = octet.plant
    last_error: Optional[Exception] = None
    for _ in range(20):
        try:
            feedback = -_place_gain(plant.A, plant.B,
                                    _sample_distinct_radii(rng, plant.n))
            observer = _place_gain(plant.A.T, plant.C.T,
                                   _sample_distinct_radii(rng, plant.n)).T
            params = FactorizationParams(
                feedback, observer,
                _sample_weight(rng, plant.p), _sample_weight(rng, plant.m))
            new_octet = build_octet(plant, params)
            transform = param_transform(octet, new_octet)
            return RetuneResult(new_octet, transform)
        except (ValueError, RuntimeError) as exc:  # resample and retry
            last_error = exc
    raise RuntimeError(
        f"could not draw admissible gains in budget: {last_error}")
