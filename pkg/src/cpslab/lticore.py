"""Discrete-time LTI state-space numerics.

Realization containers, time-domain simulation, frequency-domain evaluation,
a composition algebra, Riccati solving, H-infinity norms, stable/antistable
splitting, and best-stable-approximation (Hankel) computations.  Everything
downstream builds on this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.linalg as sla

# Eigenvalues are certified Schur when their modulus is below 1 - EPS_STAB.
EPS_STAB = 1e-9
# Default relative tolerance for iterative norm computations.
DEFAULT_RTOL = 1e-6
# Base number of frequency-grid points for sup-norm lower bounds.
GRID_BASE = 256
# Eigenvalues closer than this to the unit circle are treated as on it.
CIRCLE_TOL = 1e-8


def _as_matrix(value, rows: Optional[int] = None, cols: Optional[int] = None) -> np.ndarray:
    """Coerce to a 2-D float array, optionally fixing a degenerate shape."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        if rows == 1 and cols != 1:
            arr = arr.reshape(1, -1)
        else:
            arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ValueError(f"expected a matrix, got array of ndim {arr.ndim}")
    return arr


@dataclass(frozen=True)
class StateSpace:
    """Discrete-time realization x(k+1) = A x(k) + B u(k), y(k) = C x(k) + D u(k).

    The `stable` flag is tri-state: True is a certified claim (checked at
    construction), False marks a known-antistable realization, None means
    undetermined.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    stable: Optional[bool] = None

    def __post_init__(self) -> None:
        A = _as_matrix(self.A)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        B = _as_matrix(self.B, rows=n)
        if n == 0:
            B = B.reshape(0, B.shape[1] if B.size == 0 else B.shape[1])
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
        C = _as_matrix(self.C, cols=n)
        if C.shape[1] != n:
            # A 1-D C for a 1-state system may have been coerced to a column.
            if C.shape == (n, 1) and n != 1:
                C = C.T
            if C.shape[1] != n:
                raise ValueError(f"C has {C.shape[1]} columns, expected {n}")
        D = _as_matrix(self.D, rows=C.shape[0], cols=B.shape[1])
        if D.shape == (B.shape[1], C.shape[0]) and D.shape != (C.shape[0], B.shape[1]):
            raise ValueError(
                f"D shape {D.shape} inconsistent with {C.shape[0]} outputs and {B.shape[1]} inputs"
            )
        if D.shape != (C.shape[0], B.shape[1]):
            raise ValueError(
                f"D shape {D.shape} inconsistent with {C.shape[0]} outputs and {B.shape[1]} inputs"
            )
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)
        if self.stable is True and not self.is_schur():
            raise ValueError("realization declared stable but A is not Schur")

    # --- dimensions -------------------------------------------------------
    @property
    def n(self) -> int:
        """State dimension."""
        return self.A.shape[0]

    @property
    def p(self) -> int:
        """Input dimension."""
        return self.B.shape[1]

    @property
    def m(self) -> int:
        """Output dimension."""
        return self.C.shape[0]

    # --- analysis ---------------------------------------------------------
    def poles(self) -> np.ndarray:
        return np.linalg.eigvals(self.A) if self.n else np.array([])

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(self.poles()))) if self.n else 0.0

    def is_schur(self, eps: float = EPS_STAB) -> bool:
        return self.spectral_radius() < 1.0 - eps

    # --- constructors -----------------------------------------------------
    @staticmethod
    def static(D) -> "StateSpace":
        """Memoryless system y = D u."""
        D = _as_matrix(D)
        m, p = D.shape
        return StateSpace(np.zeros((0, 0)), np.zeros((0, p)), np.zeros((m, 0)), D, stable=True)

    @staticmethod
    def zeros(m: int, p: int) -> "StateSpace":
        return StateSpace.static(np.zeros((m, p)))

    @staticmethod
    def identity(p: int) -> "StateSpace":
        return StateSpace.static(np.eye(p))

    @staticmethod
    def from_tf(num: Sequence[float], den: Sequence[float]) -> "StateSpace":
        """SISO transfer function (descending powers of z) to controllable form.

        Requires deg(num) <= deg(den).  The denominator is normalized monic.
        """
        num = np.atleast_1d(np.asarray(num, dtype=float))
        den = np.atleast_1d(np.asarray(den, dtype=float))
        den = np.trim_zeros(den, "f")
        if den.size == 0:
            raise ValueError("zero denominator")
        num = num / den[0]
        den = den / den[0]
        n = den.size - 1
        if num.size > den.size:
            raise ValueError("improper transfer function (deg num > deg den)")
        num = np.concatenate([np.zeros(den.size - num.size), num])
        if n == 0:
            return StateSpace.static([[num[0]]])
        # Ascending-coefficient views: den = z^n + a_{n-1} z^{n-1} + ... + a_0.
        a = den[1:][::-1]  # a_0 ... a_{n-1}
        b = num[::-1]  # b_0 ... b_n
        d = b[n]
        c = b[:n] - d * a
        A = np.zeros((n, n))
        A[:-1, 1:] = np.eye(n - 1)
        A[-1, :] = -a
        B = np.zeros((n, 1))
        B[-1, 0] = 1.0
        return StateSpace(A, B, c.reshape(1, n), [[d]])

    # --- evaluation -------------------------------------------------------
    def eval(self, z: complex) -> np.ndarray:
        return eval_at(self, z)

    # --- algebra ----------------------------------------------------------
    def __matmul__(self, other: "StateSpace") -> "StateSpace":
        return series(self, other)

    def __add__(self, other: "StateSpace") -> "StateSpace":
        return parallel(self, other)

    def __sub__(self, other: "StateSpace") -> "StateSpace":
        return parallel(self, scale(other, -1.0))

    def __neg__(self) -> "StateSpace":
        return scale(self, -1.0)

    def __mul__(self, alpha: float) -> "StateSpace":
        return scale(self, alpha)

    def __rmul__(self, alpha: float) -> "StateSpace":
        return scale(self, alpha)

    # --- serialization ----------------------------------------------------
    def to_json_dict(self) -> dict:
        return {
            "a": self.A.tolist(),
            "b": self.B.tolist(),
            "c": self.C.tolist(),
            "d": self.D.tolist(),
            "shape": [self.n, self.m, self.p],
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "StateSpace":
        if "shape" in obj:
            n, m, p = (int(v) for v in obj["shape"])
        else:
            n = len(obj["a"])
            m = len(obj["d"])
            p = len(obj["d"][0]) if m else 0
        return StateSpace(
            np.array(obj["a"], dtype=float).reshape(n, n),
            np.array(obj["b"], dtype=float).reshape(n, p),
            np.array(obj["c"], dtype=float).reshape(m, n),
            np.array(obj["d"], dtype=float).reshape(m, p),
        )


@dataclass(frozen=True)
class Signal:
    """Finite-horizon vector-valued time series, one row per step."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=float)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2:
            raise ValueError("signal data must be 1-D or 2-D")
        if not np.all(np.isfinite(arr)):
            raise ValueError("signal contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.data.shape[0]

    @staticmethod
    def zeros(length: int, dim: int = 1) -> "Signal":
        return Signal(np.zeros((length, dim)))

    @staticmethod
    def impulse(length: int, dim: int = 1, channel: int = 0, at: int = 0,
                amplitude: float = 1.0) -> "Signal":
        data = np.zeros((length, dim))
        data[at, channel] = amplitude
        return Signal(data)

    @staticmethod
    def step(length: int, dim: int = 1, channel: int = 0, at: int = 0,
             amplitude: float = 1.0) -> "Signal":
        data = np.zeros((length, dim))
        data[at:, channel] = amplitude
        return Signal(data)

    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def linf_norm(self) -> float:
        return float(np.max(np.abs(self.data))) if self.data.size else 0.0

    def stack(self, other: "Signal") -> "Signal":
        if len(self) != len(other):
            raise ValueError("horizon mismatch")
        return Signal(np.hstack([self.data, other.data]))

    def delayed(self, steps: int) -> "Signal":
        """Shift forward in time by `steps`, zero-filling the start."""
        if steps < 0:
            raise ValueError("delay must be nonnegative")
        out = np.zeros_like(self.data)
        if steps < len(self):
            out[steps:] = self.data[: len(self) - steps]
        return Signal(out)

    def __add__(self, other: "Signal") -> "Signal":
        return Signal(self.data + other.data)

    def __sub__(self, other: "Signal") -> "Signal":
        return Signal(self.data - other.data)


@dataclass(frozen=True)
class FrequencyGrid:
    """Sorted angles in [0, pi] with both endpoints present."""

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.sort(np.unique(np.asarray(self.points, dtype=float)))
        if pts.size < 2 or pts[0] > 1e-12 or abs(pts[-1] - np.pi) > 1e-12:
            raise ValueError("grid must span [0, pi] inclusive")
        object.__setattr__(self, "points", pts)

    @staticmethod
    def default(count: int = 64) -> "FrequencyGrid":
        return FrequencyGrid(np.linspace(0.0, np.pi, count))

    @property
    def z_values(self) -> np.ndarray:
        return np.exp(1j * self.points)

    def __len__(self) -> int:
        return self.points.size


@dataclass(frozen=True)
class DareSolution:
    """Fixed point of a discrete Riccati equation plus its gain and scaling."""

    X: np.ndarray
    gain: np.ndarray
    scaler: np.ndarray
    residual: float


# ---------------------------------------------------------------------------
# Simulation and evaluation
# ---------------------------------------------------------------------------

def simulate(sys: StateSpace, input_signal: Signal,
             x0: Optional[np.ndarray] = None) -> tuple[Signal, Signal]:
    """Run the exact state recursion; returns (output, states)."""
    if input_signal.dim != sys.p:
        raise ValueError(f"input dim {input_signal.dim} != system input dim {sys.p}")
    K = len(input_signal)
    x = np.zeros(sys.n) if x0 is None else np.asarray(x0, dtype=float).reshape(-1)
    if x.size != sys.n:
        raise ValueError(f"x0 length {x.size} != state dim {sys.n}")
    states = np.empty((K, sys.n))
    outputs = np.empty((K, sys.m))
    u = input_signal.data
    for k in range(K):
        states[k] = x
        outputs[k] = sys.C @ x + sys.D @ u[k]
        x = sys.A @ x + sys.B @ u[k]
    return Signal(outputs), Signal(states)


def eval_at(sys: StateSpace, z: complex) -> np.ndarray:
    """Transfer-function value D + C (zI - A)^{-1} B."""
    if sys.n == 0:
        return sys.D.astype(complex)
    zi = z * np.eye(sys.n) - sys.A
    sv = np.linalg.svd(zi, compute_uv=False)
    if sv[-1] <= 1e-13 * max(sv[0], 1.0):
        raise ValueError(f"evaluation point z={z} is (numerically) a pole")
    return sys.D + sys.C @ np.linalg.solve(zi, sys.B.astype(complex))


def freq_response(sys: StateSpace, grid: FrequencyGrid) -> np.ndarray:
    """Frequency response on the grid, shape (len(grid), m, p)."""
    out = np.empty((len(grid), sys.m, sys.p), dtype=complex)
    for i, z in enumerate(grid.z_values):
        out[i] = eval_at(sys, z)
    return out


def max_singular_on_grid(sys: StateSpace, grid: FrequencyGrid) -> float:
    resp = freq_response(sys, grid)
    return float(max(np.linalg.norm(resp[i], 2) for i in range(len(grid))))


def transfer_gap(sys1: StateSpace, sys2: StateSpace,
                 grid: Optional[FrequencyGrid] = None) -> float:
    """Largest pointwise response deviation between two systems on a grid."""
    grid = grid or FrequencyGrid.default()
    r1 = freq_response(sys1, grid)
    r2 = freq_response(sys2, grid)
    return float(max(np.linalg.norm(r1[i] - r2[i], 2) for i in range(len(grid))))


# ---------------------------------------------------------------------------
# Composition algebra
# ---------------------------------------------------------------------------

def series(*systems: StateSpace) -> StateSpace:
    """Product G1 * G2 * ... (the rightmost factor acts on the input first)."""
    if not systems:
        raise ValueError("series needs at least one system")
    out = systems[-1]
    for sys1 in reversed(systems[:-1]):
        out = _series2(sys1, out)
    return out


def _series2(g1: StateSpace, g2: StateSpace) -> StateSpace:
    if g1.p != g2.m:
        raise ValueError(f"series: {g1.p} inputs vs {g2.m} outputs")
    A = np.block([
        [g1.A, g1.B @ g2.C],
        [np.zeros((g2.n, g1.n)), g2.A],
    ])
    B = np.vstack([g1.B @ g2.D, g2.B])
    C = np.hstack([g1.C, g1.D @ g2.C])
    D = g1.D @ g2.D
    stable = True if (g1.stable and g2.stable) else None
    return StateSpace(A, B, C, D, stable=stable)


def parallel(*systems: StateSpace) -> StateSpace:
    """Sum of transfer functions (shared input, added outputs)."""
    if not systems:
        raise ValueError("parallel needs at least one system")
    out = systems[0]
    for nxt in systems[1:]:
        if (out.p, out.m) != (nxt.p, nxt.m):
            raise ValueError("parallel: shape mismatch")
        A = sla.block_diag(out.A, nxt.A)
        B = np.vstack([out.B, nxt.B])
        C = np.hstack([out.C, nxt.C])
        D = out.D + nxt.D
        stable = True if (out.stable and nxt.stable) else None
        out = StateSpace(A, B, C, D, stable=stable)
    return out


def stack_rows(*systems: StateSpace) -> StateSpace:
    """Vertical concatenation [G1; G2; ...] sharing one input."""
    p = systems[0].p
    if any(s.p != p for s in systems):
        raise ValueError("stack_rows: input dimensions differ")
    A = sla.block_diag(*[s.A for s in systems])
    B = np.vstack([s.B for s in systems])
    C = sla.block_diag(*[s.C for s in systems])
    D = np.vstack([s.D for s in systems])
    stable = True if all(s.stable for s in systems) else None
    return StateSpace(A, B, C, D, stable=stable)


def stack_cols(*systems: StateSpace) -> StateSpace:
    """Horizontal concatenation [G1 G2 ...] with stacked inputs, added outputs."""
    m = systems[0].m
    if any(s.m != m for s in systems):
        raise ValueError("stack_cols: output dimensions differ")
    A = sla.block_diag(*[s.A for s in systems])
    B = sla.block_diag(*[s.B for s in systems])
    C = np.hstack([s.C for s in systems])
    D = np.hstack([s.D for s in systems])
    stable = True if all(s.stable for s in systems) else None
    return StateSpace(A, B, C, D, stable=stable)


def feedback(g: StateSpace, h: StateSpace, sign: float = -1.0) -> StateSpace:
    """Closed loop y = G(u + sign * H y); default is negative feedback."""
    if g.m != h.p or h.m != g.p:
        raise ValueError("feedback: G and H dimensions incompatible")
    delta = np.eye(g.m) - sign * (g.D @ h.D)
    if np.linalg.cond(delta) > 1e12:
        raise ValueError("feedback: algebraic loop is ill-posed")
    dinv = np.linalg.inv(delta)
    # y = dinv (C_g x_g + sign D_g C_h x_h + D_g u)
    Cy = dinv @ np.hstack([g.C, sign * g.D @ h.C])
    Dy = dinv @ g.D
    # u_g = u + sign C_h x_h + sign D_h y
    Cu = np.hstack([np.zeros((g.p, g.n)), sign * h.C]) + sign * h.D @ Cy
    Du = np.eye(g.p) + sign * h.D @ Dy
    A = sla.block_diag(g.A, h.A) + np.vstack([g.B @ Cu, h.B @ Cy])
    B = np.vstack([g.B @ Du, h.B @ Dy])
    return StateSpace(A, B, Cy, Dy)


def inverse(sys: StateSpace) -> StateSpace:
    """Transfer-function inverse; requires square, invertible D."""
    if sys.m != sys.p:
        raise ValueError("inverse: system must be square")
    if sys.p == 0:
        return sys
    if np.linalg.cond(sys.D) > 1e12:
        raise ValueError("inverse: feedthrough matrix is (numerically) singular")
    dinv = np.linalg.inv(sys.D)
    if sys.n == 0:
        return StateSpace.static(dinv)
    return StateSpace(
        sys.A - sys.B @ dinv @ sys.C,
        sys.B @ dinv,
        -dinv @ sys.C,
        dinv,
    )


def conjugate(sys: StateSpace) -> StateSpace:
    """Adjoint system G~(z) = G(1/z)^T; needs invertible A.

    The adjoint of a strictly stable realization is antistable (all poles are
    reflected through the unit circle); the returned flag records that.
    """
    if sys.n == 0:
        return StateSpace.static(sys.D.T)
    if np.linalg.cond(sys.A) > 1e12:
        raise ValueError(
            "adjoint needs an invertible A (a pole at z=0 maps to infinity)")
    ait = np.linalg.inv(sys.A).T
    was_stable = sys.is_schur() if sys.stable is None else sys.stable
    return StateSpace(
        ait,
        -ait @ sys.C.T,
        sys.B.T @ ait,
        sys.D.T - sys.B.T @ ait @ sys.C.T,
        stable=False if was_stable else None,
    )


def scale(sys: StateSpace, alpha: float) -> StateSpace:
    return StateSpace(sys.A, sys.B, alpha * sys.C, alpha * sys.D, stable=sys.stable)


_COMPOSE_DISPATCH = {
    "series": series,
    "parallel": parallel,
    "stack-rows": stack_rows,
    "stack-cols": stack_cols,
    "feedback": feedback,
    "inverse": inverse,
    "conjugate": conjugate,
    "scale": scale,
}


def compose(kind: str, *args, **kwargs) -> StateSpace:
    """Dispatch to the composition helpers by kind name."""
    try:
        fn = _COMPOSE_DISPATCH[kind]
    except KeyError:
        raise ValueError(f"unknown composition kind {kind!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# Symmetric matrix helpers
# ---------------------------------------------------------------------------

def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def sqrt_psd(M: np.ndarray) -> np.ndarray:
    """Symmetric square root of a positive semidefinite matrix."""
    w, V = np.linalg.eigh(sym(M))
    w = np.clip(w, 0.0, None)
    return V @ np.diag(np.sqrt(w)) @ V.T


def invsqrt_psd(M: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root of a positive definite matrix."""
    w, V = np.linalg.eigh(sym(M))
    if np.min(w) <= 0:
        raise ValueError("matrix is not positive definite")
    return V @ np.diag(1.0 / np.sqrt(w)) @ V.T


# ---------------------------------------------------------------------------
# Discrete algebraic Riccati equation
# ---------------------------------------------------------------------------

def _dare_residual(X, A, B, Q, R, S) -> float:
    T = A.T @ X @ B + S
    rhs = A.T @ X @ A - T @ np.linalg.solve(R + B.T @ X @ B, T.T) + Q
    return float(np.linalg.norm(X - rhs) / max(np.linalg.norm(X), 1.0))


def _dare_doubling(Ahat, G, Qhat, iters: int = 200):
    """Structure-preserving doubling iteration for X = A'XA - A'XG(I+XG)^{-1}... + Q."""
    Ak = Ahat.copy()
    Gk = G.copy()
    Hk = Qhat.copy()
    n = Ahat.shape[0]
    eye = np.eye(n)
    for _ in range(iters):
        W = eye + Gk @ Hk
        try:
            WiA = np.linalg.solve(W, Ak)
            WiG = np.linalg.solve(W, Gk)
        except np.linalg.LinAlgError:
            return None
        Anext = Ak @ WiA
        Gnext = sym(Gk + Ak @ WiG @ Ak.T)
        Hnext = sym(Hk + Ak.T @ Hk @ WiA)
        if not np.all(np.isfinite(Hnext)):
            return None
        delta = np.linalg.norm(Hnext - Hk) / max(np.linalg.norm(Hnext), 1.0)
        Ak, Gk, Hk = Anext, Gnext, Hnext
        if delta < 1e-15:
            break
    return Hk


def _dare_pencil(Ahat, G, Qhat):
    """Deflating-subspace fallback on the symplectic pencil."""
    n = Ahat.shape[0]
    eye = np.eye(n)
    M = np.block([[Ahat, np.zeros((n, n))], [-Qhat, eye]])
    N = np.block([[eye, G], [np.zeros((n, n)), Ahat.T]])
    _, _, _, _, _, Z = sla.ordqz(M, N, sort="iuc")
    U1 = Z[:n, :n]
    U2 = Z[n:, :n]
    X = np.linalg.solve(U1.T, U2.T).T
    return sym(X)


def _solve_dare_general(A, B, Q, R, S, tol: float) -> tuple[np.ndarray, float]:
    """Stabilizing solution of X = A'XA - (A'XB+S)(R+B'XB)^{-1}(B'XA+S') + Q."""
    RinvSt = np.linalg.solve(R, S.T)
    Ahat = A - B @ RinvSt
    Qhat = sym(Q - S @ RinvSt)
    G = sym(B @ np.linalg.solve(R, B.T))
    X = _dare_doubling(Ahat, G, Qhat)
    if X is not None:
        res = _dare_residual(X, A, B, Q, R, S)
        if res < tol:
            return sym(X), res
    X = _dare_pencil(Ahat, G, Qhat)
    res = _dare_residual(X, A, B, Q, R, S)
    if res >= tol:
        raise RuntimeError(f"Riccati iteration did not converge (residual {res:.3e})")
    return X, res


def solve_dare(kind: str, plant: StateSpace, tol: float = 1e-10) -> DareSolution:
    """Solve the output-injection ('observer') or state-feedback ('feedback')
    Riccati equation for the plant, returning the solution, the associated
    gain, and the normalizing scale factor.

    observer:  P = APA' - (APC'+BD')(I+DD'+CPC')^{-1}(.)' + BB'
               gain  L = (BD'+APC')(I+DD'+CPC')^{-1}
               scale W = (I+DD'+CPC')^{-1/2}
    feedback:  S = A'SA - (A'SB+C'D)(I+D'D+B'SB)^{-1}(.)' + C'C
               gain  F = -(I+D'D+B'SB)^{-1}(D'C+B'SA)
               scale V = (I+D'D+B'SB)^{-1/2}
    """
    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    if kind == "observer":
        X, res = _solve_dare_general(
            A.T, C.T, B @ B.T, np.eye(plant.m) + D @ D.T, B @ D.T, tol)
        inner = np.eye(plant.m) + D @ D.T + C @ X @ C.T
        gain = np.linalg.solve(inner.T, (B @ D.T + A @ X @ C.T).T).T
        scaler = invsqrt_psd(inner)
    elif kind == "feedback":
        X, res = _solve_dare_general(
            A, B, C.T @ C, np.eye(plant.p) + D.T @ D, C.T @ D, tol)
        inner = np.eye(plant.p) + D.T @ D + B.T @ X @ B
        gain = -np.linalg.solve(inner, D.T @ C + B.T @ X @ A)
        scaler = invsqrt_psd(inner)
    else:
        raise ValueError("kind must be 'observer' or 'feedback'")
    if plant.n and np.min(np.linalg.eigvalsh(sym(X))) < -1e-8 * max(1.0, np.linalg.norm(X)):
        raise RuntimeError("Riccati solution lost positive semidefiniteness")
    return DareSolution(X=sym(X), gain=gain, scaler=scaler, residual=res)


# ---------------------------------------------------------------------------
# H-infinity norm
# ---------------------------------------------------------------------------

def _unit_circle_poles(A: np.ndarray, tol: float = CIRCLE_TOL) -> bool:
    if A.shape[0] == 0:
        return False
    return bool(np.any(np.abs(np.abs(np.linalg.eigvals(A)) - 1.0) < tol))


def _has_circle_crossing(sys: StateSpace, gamma: float) -> bool:
    """True when some singular value of the response crosses level gamma."""
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    R1 = gamma ** 2 * np.eye(sys.p) - D.T @ D
    # Nudge away from an exactly singular feedthrough term.
    if np.min(np.abs(np.linalg.eigvalsh(sym(R1)))) < 1e-10 * max(1.0, gamma ** 2):
        R1 = (gamma * (1 + 1e-9)) ** 2 * np.eye(sys.p) - D.T @ D
    R1inv = np.linalg.inv(R1)
    Mt = A + B @ R1inv @ D.T @ C
    Gt = B @ R1inv @ B.T
    Qt = C.T @ (np.eye(sys.m) + D @ R1inv @ D.T) @ C
    n = sys.n
    M = np.block([[Mt, Gt], [np.zeros((n, n)), np.eye(n)]])
    N = np.block([[np.eye(n), np.zeros((n, n))], [Qt, Mt.T]])
    eigs = sla.eigvals(M, N)
    finite = eigs[np.isfinite(eigs)]
    return bool(np.any(np.abs(np.abs(finite) - 1.0) < 1e-7))


def _refine_peak(sys: StateSpace, w_lo: float, w_hi: float, iters: int = 80) -> float:
    """Golden-section maximization of the largest singular value over [w_lo, w_hi]."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = w_lo, w_hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = np.linalg.norm(eval_at(sys, np.exp(1j * c)), 2)
    fd = np.linalg.norm(eval_at(sys, np.exp(1j * d)), 2)
    for _ in range(iters):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = np.linalg.norm(eval_at(sys, np.exp(1j * c)), 2)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = np.linalg.norm(eval_at(sys, np.exp(1j * d)), 2)
    return float(max(fc, fd))


def hinf_norm(sys: StateSpace, rtol: float = DEFAULT_RTOL) -> float:
    """Supremum of the largest singular value over the unit circle.

    Bisection on a level-crossing eigenvalue test of the associated
    symplectic pencil, seeded and cross-checked by an adaptively refined
    frequency grid.  Works for stable, antistable, and mixed realizations
    (it is the boundary sup in every case); realizations with poles on the
    unit circle are rejected.
    """
    if _unit_circle_poles(sys.A):
        raise ValueError("system has a pole on the unit circle")
    if sys.n == 0 or not np.any(sys.B) or not np.any(sys.C):
        return float(np.linalg.norm(sys.D, 2))
    grid = np.linspace(0.0, np.pi, GRID_BASE)
    vals = np.array([np.linalg.norm(eval_at(sys, np.exp(1j * w)), 2) for w in grid])
    # Refine around the three best grid peaks.
    lb = float(vals.max())
    order = np.argsort(vals)[::-1][:3]
    for idx in order:
        w_lo = grid[max(idx - 1, 0)]
        w_hi = grid[min(idx + 1, GRID_BASE - 1)]
        lb = max(lb, _refine_peak(sys, w_lo, w_hi))
    if lb == 0.0:
        return 0.0
    # Exponential search for a certified upper bound, then bisection.
    step = max(rtol, 1e-9)
    hi = lb * (1.0 + step)
    guard = 0
    while _has_circle_crossing(sys, hi):
        step *= 2.0
        hi = lb * (1.0 + step)
        guard += 1
        if guard > 60:
            raise RuntimeError("H-infinity upper bound search failed")
    lo = lb if step == max(rtol, 1e-9) else lb * (1.0 + step / 2.0)
    while (hi - lo) > 0.2 * rtol * lo:
        mid = 0.5 * (lo + hi)
        if _has_circle_crossing(sys, mid):
            lo = mid
        else:
            hi = mid
    return float(hi)


# ---------------------------------------------------------------------------
# Stable / antistable splitting
# ---------------------------------------------------------------------------

def split_stable_antistable(sys: StateSpace) -> tuple[StateSpace, StateSpace, np.ndarray]:
    """Additive decomposition into strictly stable and antistable parts.

    The feedthrough stays with the stable part; the third return value is a
    zero direct-term matrix kept for signature completeness.
    """
    direct = np.zeros((sys.m, sys.p))
    if sys.n == 0:
        return sys, StateSpace.zeros(sys.m, sys.p), direct
    if _unit_circle_poles(sys.A):
        raise ValueError("cannot split: eigenvalue on the unit circle")
    T, Z, sdim = sla.schur(sys.A, output="real", sort="iuc")
    if sdim == sys.n:
        return sys, StateSpace.zeros(sys.m, sys.p), direct
    if sdim == 0:
        stable = StateSpace.static(sys.D)
        anti = StateSpace(sys.A, sys.B, sys.C, np.zeros((sys.m, sys.p)), stable=False)
        return stable, anti, direct
    s = sdim
    T11, T12, T22 = T[:s, :s], T[:s, s:], T[s:, s:]
    X = sla.solve_sylvester(T11, -T22, -T12)
    W = Z @ np.block([[np.eye(s), X], [np.zeros((sys.n - s, s)), np.eye(sys.n - s)]])
    Winv = np.block([[np.eye(s), -X], [np.zeros((sys.n - s, s)), np.eye(sys.n - s)]]) @ Z.T
    Bt = Winv @ sys.B
    Ct = sys.C @ W
    stable = StateSpace(T11, Bt[:s], Ct[:, :s], sys.D, stable=True)
    anti = StateSpace(T22, Bt[s:], Ct[:, s:], np.zeros((sys.m, sys.p)), stable=False)
    return stable, anti, direct


# ---------------------------------------------------------------------------
# Hankel / best stable approximation
# ---------------------------------------------------------------------------

def _flip_triple(anti: StateSpace) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map the antistable part through z -> 1/z to a stable triple whose
    Markov parameters are the anticausal expansion coefficients."""
    Ai = np.linalg.inv(anti.A)
    return Ai, Ai @ anti.B, -anti.C


def hankel_norm_antistable(anti: StateSpace) -> float:
    """Hankel norm of a strictly proper antistable system (via the flipped
    realization's Gramian product)."""
    if anti.n == 0:
        return 0.0
    At, Bt, Ct = _flip_triple(anti)
    P = sla.solve_discrete_lyapunov(At, Bt @ Bt.T)
    Q = sla.solve_discrete_lyapunov(At.T, Ct.T @ Ct)
    eigs = np.linalg.eigvals(P @ Q)
    return float(np.sqrt(max(np.max(eigs.real), 0.0)))


def _scalar_best_error(anti: StateSpace, At, Bt, Ct, P, Q, sigma: float) -> StateSpace:
    """All-pass optimal error system for a scalar antistable symbol.

    Built from the dominant singular pair of the Hankel operator: the error
    is sigma * V(z) / U(z) where V and U are the (rational) singular
    functions realized in state space.
    """
    M = P @ Q
    eigvals_, eigvecs = np.linalg.eig(M)
    x = np.real(eigvecs[:, int(np.argmax(eigvals_.real))])
    x = x / np.linalg.norm(x)
    # Numerator: V(z) = Ct (I - z At)^{-1} x, realized causally with poles of
    # the original antistable symbol.
    v_sys = StateSpace(anti.A, -anti.A @ x.reshape(-1, 1), Ct, np.zeros((1, 1)))
    # Denominator (flipped singular function), a stable scalar system.
    qx = (Q @ x).reshape(-1, 1)
    u_sys = StateSpace(At.T, qx, (Bt.T @ At.T).reshape(1, -1), (Bt.T @ qx).reshape(1, 1))
    return scale(series(v_sys, inverse(u_sys)), sigma ** 2)


def nehari_distance(G: StateSpace, rtol: float = DEFAULT_RTOL
                    ) -> tuple[float, StateSpace]:
    """Distance from G to the stable systems sharing its causal expansion,
    together with a stable minimizer.

    The distance is the Hankel norm of the antistable part computed on the
    flipped (z -> 1/z) realization, which counts the full anticausal
    coefficient sequence of the boundary expansion.  The returned Q keeps
    the stable part of G exactly and appends a strictly proper stable
    correction; for scalar symbols the correction is the exact optimizer
    (the error is all-pass of modulus equal to the distance).
    """
    stable_part, anti, _ = split_stable_antistable(G)
    if anti.n == 0:
        return 0.0, G
    At, Bt, Ct = _flip_triple(anti)
    P = sla.solve_discrete_lyapunov(At, Bt @ Bt.T)
    Q = sla.solve_discrete_lyapunov(At.T, Ct.T @ Ct)
    eigs = np.linalg.eigvals(P @ Q)
    sigma = float(np.sqrt(max(np.max(eigs.real), 0.0)))
    if sigma < 1e-14:
        return sigma, stable_part
    if G.m == 1 and G.p == 1:
        err = _scalar_best_error(anti, At, Bt, Ct, P, Q, sigma)
        raw = parallel(anti, scale(err, -1.0))
        corr_stable, corr_anti, _ = split_stable_antistable(raw)
        leak = max_singular_on_grid(corr_anti, FrequencyGrid.default(64)) if corr_anti.n else 0.0
        if leak > 1e-6 * max(1.0, sigma):
            raise RuntimeError("best-approximation extraction left unstable residue")
        return sigma, parallel(stable_part, corr_stable)
    corr = _suboptimal_correction_mimo(anti, At, Bt, Ct, P, Q, sigma, rtol)
    return sigma, parallel(stable_part, corr)


def _suboptimal_correction_mimo(anti, At, Bt, Ct, P, Q, sigma, rtol):
    """Strictly proper stable correction for a matrix-valued antistable part."""
    raise NotImplementedError(
        "matrix-valued best stable approximation is not supported; "
        "the distance is exact but a minimizer is only constructed for "
        "scalar symbols")


# ---------------------------------------------------------------------------
# Balanced truncation (optional order control for composition chains)
# ---------------------------------------------------------------------------

def _psd_factor(P: np.ndarray) -> np.ndarray:
    """Return L with L @ L.T == P for symmetric positive semidefinite P."""
    w, V = np.linalg.eigh(sym(P))
    w = np.clip(w, 0.0, None)
    return V * np.sqrt(w)


def reduce_balanced(sys: StateSpace, tol: float = 1e-10) -> StateSpace:
    """Drop states whose Hankel singular values fall below tol * largest.

    Only the strictly stable part is reduced; the antistable part (if any)
    and the feedthrough are kept exactly.
    """
    stable_part, anti, _ = split_stable_antistable(sys)
    if stable_part.n == 0:
        return sys
    A, B, C, D = stable_part.A, stable_part.B, stable_part.C, stable_part.D
    P = sla.solve_discrete_lyapunov(A, B @ B.T)
    Q = sla.solve_discrete_lyapunov(A.T, C.T @ C)
    # Square-root balancing; eigh-based factors tolerate singular Gramians.
    Lp = _psd_factor(P)
    Lq = _psd_factor(Q)
    U, svals, Vt = np.linalg.svd(Lq.T @ Lp)
    if svals[0] <= 0:
        reduced = StateSpace.static(D)
    else:
        keep = svals > tol * svals[0]
        k = int(np.sum(keep))
        s_half = np.diag(svals[:k] ** -0.5)
        Tl = s_half @ U[:, :k].T @ Lq.T
        Tr = Lp @ Vt[:k, :].T @ s_half
        reduced = StateSpace(Tl @ A @ Tr, Tl @ B, C @ Tr, D, stable=True)
    if anti.n == 0:
        return reduced
    return parallel(reduced, anti)
