"""Core LTI numerics: simulation, evaluation, composition, Riccati, norms,
splitting, and best stable approximation."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpslab.lticore import (
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
    max_singular_on_grid,
    nehari_distance,
    parallel,
    reduce_balanced,
    scale,
    series,
    simulate,
    solve_dare,
    split_stable_antistable,
    stack_cols,
    stack_rows,
    transfer_gap,
)

P1 = StateSpace(0.5, 1.0, 1.0, 0.0)
GRID = FrequencyGrid.default(64)


def random_stable(rng, n=None, p=None, m=None, rho=0.9):
    """Random strictly stable realization."""
    n = int(rng.integers(1, 7)) if n is None else n
    p = int(rng.integers(1, 4)) if p is None else p
    m = int(rng.integers(1, 4)) if m is None else m
    A = rng.standard_normal((n, n))
    r = max(np.abs(np.linalg.eigvals(A)))
    A = A * (rho * rng.uniform(0.3, 1.0) / max(r, 1e-6))
    return StateSpace(A, rng.standard_normal((n, p)),
                      rng.standard_normal((m, n)), rng.standard_normal((m, p)))


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def test_simulate_step_recursion():
    y, x = simulate(P1, Signal.step(6))
    assert np.allclose(y.data.ravel(), [0.0, 1.0, 1.5, 1.75, 1.875, 1.9375])
    assert len(x) == 6


def test_simulate_zero_input_zero_state():
    y, _ = simulate(P1, Signal.zeros(10))
    assert np.all(y.data == 0.0)


def test_simulate_static_identity():
    sys = StateSpace.identity(2)
    u = Signal(np.arange(10.0).reshape(5, 2))
    y, _ = simulate(sys, u)
    assert np.array_equal(y.data, u.data)


def test_simulate_dimension_error():
    with pytest.raises(ValueError):
        simulate(P1, Signal.zeros(4, dim=2))
    with pytest.raises(ValueError):
        simulate(P1, Signal.zeros(4), x0=[1.0, 2.0])


# ---------------------------------------------------------------------------
# eval_at
# ---------------------------------------------------------------------------

def test_eval_at_dc():
    assert eval_at(P1, 1.0) == pytest.approx(2.0)


def test_eval_at_static():
    D = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.allclose(eval_at(StateSpace.static(D), 0.7 + 0.1j), D)


def test_eval_at_pole_raises():
    with pytest.raises(ValueError):
        eval_at(P1, 0.5)


# ---------------------------------------------------------------------------
# composition algebra
# ---------------------------------------------------------------------------

def test_series_with_inverse_is_identity():
    rng = np.random.default_rng(7)
    g = random_stable(rng, n=3, p=2, m=2)
    ident = series(g, inverse(g))
    assert transfer_gap(ident, StateSpace.identity(2), GRID) < 1e-9


def test_conjugate_is_involution():
    rng = np.random.default_rng(3)
    g = random_stable(rng, n=4, p=2, m=3)
    assert transfer_gap(conjugate(conjugate(g)), g, GRID) < 1e-9


def test_conjugate_flips_stability_flag():
    adj = conjugate(StateSpace(0.5, 1.0, 1.0, 0.0, stable=True))
    assert adj.stable is False
    assert adj.spectral_radius() > 1.0


def test_conjugate_needs_invertible_a():
    deadbeat = StateSpace(0.0, 1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        conjugate(deadbeat)


def test_conjugate_matches_pointwise_definition():
    rng = np.random.default_rng(11)
    g = random_stable(rng, n=3, p=2, m=2)
    adj = conjugate(g)
    for z in (1.2 + 0.3j, 0.4 - 0.9j, 2.0):
        assert np.allclose(eval_at(adj, z), eval_at(g, 1.0 / z).T, atol=1e-10)


def test_scalar_bezout_product_on_circle():
    # Factors of the reference loop: the weighted sum X*M + Y*N is identically 1.
    M = StateSpace(0.0, 1.0, -0.5, 1.0)   # (z-0.5)/z
    N = StateSpace(0.0, 1.0, 1.0, 0.0)    # 1/z
    X = StateSpace(0.0, 1.0, 0.5, 1.0)    # (z+0.5)/z
    Y = StateSpace(0.0, 1.0, 0.25, 0.0)   # 0.25/z
    total = parallel(series(X, M), series(Y, N))
    val = eval_at(total, np.exp(1j * np.pi / 3))
    assert abs(val[0, 0] - 1.0) < 1e-12


def test_feedback_realization_matches_pointwise():
    rng = np.random.default_rng(5)
    g = random_stable(rng, n=3, p=2, m=2)
    h = random_stable(rng, n=2, p=2, m=2)
    loop = feedback(g, h)
    for z in np.exp(1j * np.linspace(0.1, 3.0, 7)):
        gz, hz = eval_at(g, z), eval_at(h, z)
        expect = np.linalg.solve(np.eye(2) + gz @ hz, gz)
        assert np.allclose(eval_at(loop, z), expect, atol=1e-8)


def test_compose_dispatch_and_unknown_kind():
    assert transfer_gap(compose("parallel", P1, P1), scale(P1, 2.0), GRID) < 1e-12
    with pytest.raises(ValueError):
        compose("frobnicate", P1)


def test_from_tf_round_trip():
    sys = StateSpace.from_tf([1.0, -2.0], [1.0, -0.5, 0.0])  # (z-2)/(z(z-0.5))
    for z in (1.0 + 0.5j, 2.5, -1.3):
        expect = (z - 2.0) / (z * (z - 0.5))
        assert eval_at(sys, z)[0, 0] == pytest.approx(expect, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_composition_matches_pointwise_on_grid(seed):
    rng = np.random.default_rng(seed)
    g1 = random_stable(rng)
    g2 = random_stable(rng, p=g1.p, m=g1.p)  # compatible for series g1 @ g2
    ser = series(g1, g2)
    par = parallel(g1, random_stable(rng, p=g1.p, m=g1.m))
    rows = stack_rows(g1, random_stable(rng, p=g1.p))
    cols = stack_cols(g1, random_stable(rng, m=g1.m))
    zs = GRID.z_values
    for z in zs[:: len(zs) // 8]:
        assert np.allclose(eval_at(ser, z), eval_at(g1, z) @ eval_at(g2, z), atol=1e-9)
    resp_par = freq_response(par, GRID)
    assert resp_par.shape == (64, g1.m, g1.p)
    assert rows.m == g1.m + 1 or rows.m > g1.m
    assert cols.p > g1.p


# ---------------------------------------------------------------------------
# solve_dare
# ---------------------------------------------------------------------------

def test_dare_reference_plant_observer():
    sol = solve_dare("observer", P1)
    exact = (0.25 + np.sqrt(4.0625)) / 2.0
    assert abs(sol.X[0, 0] - exact) < 1e-9
    assert sol.residual < 1e-10
    assert abs(sol.gain[0, 0] - 0.5 * exact / (1 + exact)) < 1e-9
    assert abs(sol.scaler[0, 0] - (1 + exact) ** -0.5) < 1e-9
    # Observer closed-loop matrix is Schur.
    assert abs(0.5 - sol.gain[0, 0] * 1.0) < 1.0


def test_dare_reference_plant_feedback_is_dual():
    sol = solve_dare("feedback", P1)
    exact = (0.25 + np.sqrt(4.0625)) / 2.0
    assert abs(sol.X[0, 0] - exact) < 1e-9
    assert abs(sol.gain[0, 0] + 0.5 * exact / (1 + exact)) < 1e-9
    assert abs(sol.scaler[0, 0] - (1 + exact) ** -0.5) < 1e-9


def test_dare_zero_dynamics_case():
    sol = solve_dare("observer", StateSpace(0.0, 1.0, 1.0, 0.0))
    assert sol.X[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert sol.gain[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert sol.scaler[0, 0] == pytest.approx(2 ** -0.5, abs=1e-12)


def test_dare_invalid_kind():
    with pytest.raises(ValueError):
        solve_dare("both", P1)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_dare_random_residual_and_closed_loop(seed):
    rng = np.random.default_rng(seed)
    plant = random_stable(rng, n=int(rng.integers(1, 5)))
    for kind in ("observer", "feedback"):
        sol = solve_dare(kind, plant)
        assert sol.residual < 1e-10
        if kind == "observer":
            closed = plant.A - sol.gain @ plant.C
        else:
            closed = plant.A + plant.B @ sol.gain
        assert max(np.abs(np.linalg.eigvals(closed))) < 1.0 - 1e-9


# ---------------------------------------------------------------------------
# hinf_norm
# ---------------------------------------------------------------------------

def test_hinf_static_matrix():
    D = np.array([[1.0, 2.0], [0.0, 1.0]])
    assert hinf_norm(StateSpace.static(D)) == pytest.approx(np.linalg.norm(D, 2))


def test_hinf_first_order_peak_at_dc():
    assert hinf_norm(P1) == pytest.approx(2.0, rel=1e-6)


def test_hinf_stacked_factors():
    M = StateSpace(0.0, 1.0, -0.5, 1.0)
    N = StateSpace(0.0, 1.0, 1.0, 0.0)
    assert hinf_norm(stack_rows(M, N)) == pytest.approx(np.sqrt(3.25), rel=1e-6)


def test_hinf_pole_on_circle_rejected():
    with pytest.raises(ValueError):
        hinf_norm(StateSpace(1.0, 1.0, 1.0, 0.0))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_hinf_bounds_grid_maximum(seed):
    rng = np.random.default_rng(seed)
    sys = random_stable(rng)
    norm = hinf_norm(sys)
    # Any grid maximum is a valid lower bound; a dense grid nearly attains it.
    assert norm >= max_singular_on_grid(sys, FrequencyGrid.default(257)) - 1e-9
    dense = max_singular_on_grid(sys, FrequencyGrid.default(8193))
    assert norm <= dense * (1 + 1e-4) + 1e-9


# ---------------------------------------------------------------------------
# split_stable_antistable
# ---------------------------------------------------------------------------

def test_split_already_stable_identity():
    stable, anti, direct = split_stable_antistable(P1)
    assert stable is P1
    assert anti.n == 0
    assert np.all(direct == 0.0)


def test_split_single_antistable_pole():
    g = StateSpace(2.0, 1.0, 1.0, 0.0)
    stable, anti, _ = split_stable_antistable(g)
    assert stable.n == 0 and np.all(stable.D == 0.0)
    assert transfer_gap(anti, g, GRID) < 1e-12


def test_split_partial_fractions():
    g = parallel(StateSpace(0.5, 1.0, 1.0, 0.0), StateSpace(2.0, 1.0, 1.0, 0.0))
    stable, anti, _ = split_stable_antistable(g)
    assert transfer_gap(stable, StateSpace(0.5, 1.0, 1.0, 0.0), GRID) < 1e-9
    assert transfer_gap(anti, StateSpace(2.0, 1.0, 1.0, 0.0), GRID) < 1e-9
    assert transfer_gap(parallel(stable, anti), g, GRID) < 1e-9


def test_split_rejects_circle_pole():
    with pytest.raises(ValueError):
        split_stable_antistable(StateSpace(-1.0, 1.0, 1.0, 0.0))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_split_parts_sum_to_original(seed):
    rng = np.random.default_rng(seed)
    stable = random_stable(rng, n=3, p=2, m=2)
    anti_core = random_stable(rng, n=2, p=2, m=2)
    anti = StateSpace(np.linalg.inv(anti_core.A * 0.5), anti_core.B, anti_core.C,
                      np.zeros((2, 2)))
    g = parallel(stable, anti)
    s, a, direct = split_stable_antistable(g)
    assert transfer_gap(parallel(s, a), g, GRID) < 1e-9
    assert np.all(direct == 0.0)
    assert s.is_schur()
    assert a.n == 0 or min(np.abs(np.linalg.eigvals(a.A))) > 1.0


# ---------------------------------------------------------------------------
# nehari_distance
# ---------------------------------------------------------------------------

def test_nehari_stable_input_returns_itself():
    gamma, Q = nehari_distance(P1)
    assert gamma == 0.0
    assert Q is P1


def test_nehari_reference_values():
    gamma2, _ = nehari_distance(StateSpace(2.0, 1.0, 1.0, 0.0))
    gamma4, _ = nehari_distance(StateSpace(4.0, 1.0, 1.0, 0.0))
    assert gamma2 == pytest.approx(2.0 / 3.0, abs=1e-6)
    assert gamma4 == pytest.approx(4.0 / 15.0, abs=1e-6)


def test_nehari_minimizer_is_allpass_optimal():
    g = StateSpace(2.0, 1.0, 1.0, 0.0)
    gamma, Q = nehari_distance(g)
    assert Q.is_schur()
    err = parallel(g, scale(Q, -1.0))
    achieved = hinf_norm(err)
    assert gamma <= achieved <= gamma * (1 + 1e-4)
    # The optimal scalar error curve is flat at level gamma.
    resp = freq_response(err, GRID)
    assert np.allclose(np.abs(resp[:, 0, 0]), gamma, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(
    c=st.floats(0.2, 3.0),
    a=st.floats(1.2, 6.0),
)
def test_nehari_first_order_closed_form(c, a):
    # For c/(z-a) with |a|>1 the distance is |c a| / (a^2 - 1).
    g = StateSpace(a, 1.0, c, 0.0)
    gamma, Q = nehari_distance(g)
    assert gamma == pytest.approx(abs(c * a) / (a * a - 1.0), rel=1e-6)
    achieved = hinf_norm(parallel(g, scale(Q, -1.0)))
    assert gamma - 1e-9 <= achieved <= gamma * (1 + 1e-4)


def test_nehari_mixed_symbol_keeps_stable_part():
    g = parallel(StateSpace(0.5, 1.0, 1.0, 0.0), StateSpace(2.0, 1.0, 1.0, 0.0))
    gamma, Q = nehari_distance(g)
    assert gamma == pytest.approx(2.0 / 3.0, abs=1e-6)
    achieved = hinf_norm(parallel(g, scale(Q, -1.0)))
    assert achieved <= gamma * (1 + 1e-4)


def test_nehari_matrix_minimizer_unsupported():
    anti = StateSpace(np.diag([2.0, 3.0]), np.eye(2), np.eye(2), np.zeros((2, 2)))
    with pytest.raises(NotImplementedError):
        nehari_distance(anti)


# ---------------------------------------------------------------------------
# misc containers
# ---------------------------------------------------------------------------

def test_signal_guards_and_helpers():
    with pytest.raises(ValueError):
        Signal(np.array([1.0, np.inf]))
    s = Signal.impulse(5, dim=2, channel=1)
    assert s.data[0, 1] == 1.0 and s.l2_norm() == 1.0
    assert s.delayed(2).data[2, 1] == 1.0
    assert s.stack(Signal.zeros(5, 1)).dim == 3


def test_frequency_grid_requires_endpoints():
    with pytest.raises(ValueError):
        FrequencyGrid(np.linspace(0.1, 3.0, 12))
    grid = FrequencyGrid.default(33)
    assert len(grid) == 33
    assert grid.points[0] == 0.0 and grid.points[-1] == pytest.approx(np.pi)


def test_statespace_validation_and_json():
    with pytest.raises(ValueError):
        StateSpace(np.eye(2), np.ones((3, 1)), np.ones((1, 2)), 0.0)
    with pytest.raises(ValueError):
        StateSpace(1.01, 1.0, 1.0, 0.0, stable=True)
    round_trip = StateSpace.from_json_dict(P1.to_json_dict())
    assert transfer_gap(round_trip, P1, GRID) < 1e-15


def test_reduce_balanced_preserves_transfer():
    rng = np.random.default_rng(2)
    g = random_stable(rng, n=4, p=2, m=2)
    chain = series(g, inverse(g))  # 8 states, reducible to a static identity
    red = reduce_balanced(chain, tol=1e-10)
    assert red.n <= chain.n
    assert transfer_gap(red, chain, GRID) < 1e-8
