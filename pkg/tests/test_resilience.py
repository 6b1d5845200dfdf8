"""Resilient two-site synthesis: matching problems, deployment, margins."""

import numpy as np
import pytest
from scipy.linalg import hankel

from cpslab.factorization import build_normalized_octet, build_octet
from cpslab.lticore import (
    FrequencyGrid,
    Signal,
    StateSpace,
    conjugate,
    hinf_norm,
    inverse,
    max_singular_on_grid,
    parallel,
    scale,
    series,
    simulate,
    split_stable_antistable,
    transfer_gap,
)
from cpslab.resilience import (
    MODES,
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
from cpslab.simloop import AttackSpec, FaultSpec, run_closed_loop

P1 = StateSpace(0.5, 1.0, 1.0, 0.0)
P2 = StateSpace(0.4, 1.0, 0.3, 0.0)
ZERO_PLANT = StateSpace(0.3, 1.0, 0.0, 0.0)

# Independently frozen levels for the two scalar benchmark loops.
P1_ATTACK_LEVEL = 4.831955546343297
P1_FAULT_LEVEL = 1.3983468304052895
P2_ATTACK_LEVEL = 0.9692381620988826
P2_FAULT_LEVEL = 0.4777337674704565

GRID = FrequencyGrid.default(64)
EYE1 = np.eye(1)


@pytest.fixture(scope="module")
def norm1():
    return build_normalized_octet(P1)


@pytest.fixture(scope="module")
def norm2():
    return build_normalized_octet(P2)


@pytest.fixture(scope="module")
def design1(norm1):
    return ResilientDesign.solve(norm1)


@pytest.fixture(scope="module")
def design2(norm2):
    return ResilientDesign.solve(norm2)


@pytest.fixture(scope="module")
def deployed2(norm2, design2):
    return deploy_two_site(P2, norm2, design2)


def pair_energy(u, y):
    return float(np.sum(np.square(u)) + np.sum(np.square(y)))


# ---------------------------------------------------------------------------
# Causal/anticausal projection
# ---------------------------------------------------------------------------

class TestHardySplit:
    def test_stable_system_is_its_own_causal_part(self):
        causal, anti = hardy_split(P1)
        assert anti is None
        assert transfer_gap(causal, P1, GRID) < 1e-12

    def test_parts_reassemble(self):
        sys = parallel(P1, conjugate(StateSpace(0.6, 1.0, 0.8, 0.3)))
        causal, anti = hardy_split(sys)
        assert transfer_gap(parallel(causal, anti), sys, GRID) < 1e-10

    def test_adjoint_of_strictly_proper_has_no_causal_part(self):
        # The adjoint of a strictly proper stable system expands entirely in
        # positive powers, including none at lag zero; a split that leaves
        # the realization's feedthrough on the causal side would miss this.
        causal, anti = hardy_split(conjugate(P1))
        assert max_singular_on_grid(causal, GRID) < 1e-12
        assert transfer_gap(anti, conjugate(P1), GRID) < 1e-10

    def test_anticausal_part_is_antistable(self):
        _, anti = hardy_split(conjugate(P1))
        assert np.all(np.abs(anti.poles()) > 1.0)


# ---------------------------------------------------------------------------
# Station-side matching problem
# ---------------------------------------------------------------------------

def hankel_lower_bound(symbol, size=512):
    """Largest singular value of a finite section of the Hankel operator.

    Built from the boundary expansion coefficients of the symbol's
    antistable realization, pairing strictly-past inputs with
    present-and-future outputs (the solver's convention, which keeps the
    zero-lag coefficient with the anticausal block).  Every finite section
    certifies a lower bound on the attainable level.
    """
    _, anti, _ = split_stable_antistable(symbol)
    a_inv = np.linalg.inv(anti.A)
    coeffs = []
    power = a_inv
    for _ in range(2 * size - 1):
        coeffs.append(float((anti.C @ power @ anti.B)[0, 0]))
        power = power @ a_inv
    matrix = hankel(coeffs[:size], coeffs[size - 1:])
    return float(np.linalg.norm(matrix, 2))


class TestAttackMatching:
    def test_levels_match_frozen_values(self, norm1, norm2):
        _, level1, lifted1 = solve_mmp_attack(norm1)
        _, level2, _ = solve_mmp_attack(norm2)
        assert level1 == pytest.approx(P1_ATTACK_LEVEL, rel=1e-9)
        assert level2 == pytest.approx(P2_ATTACK_LEVEL, rel=1e-9)
        assert lifted1 == pytest.approx(np.sqrt(level1**2 + 1), rel=1e-12)

    def test_zero_plant_level_vanishes(self):
        _, level, lifted = solve_mmp_attack(build_normalized_octet(ZERO_PLANT))
        assert level == 0.0
        assert lifted == 1.0

    def test_hankel_sandwich(self, norm1):
        param, level, _ = solve_mmp_attack(norm1)
        lower = hankel_lower_bound(attack_symbol(norm1))
        achieved = hinf_norm(parallel(attack_symbol(norm1), param))
        assert lower <= level + 1e-12
        assert level <= lower * (1 + 1e-4)
        assert achieved >= level * (1 - 1e-9)
        assert achieved <= level * (1 + 1e-4)

    def test_param_is_stable(self, norm1):
        param, _, _ = solve_mmp_attack(norm1)
        assert param.is_schur()

    def test_rejects_unnormalized_octet(self):
        with pytest.raises(ValueError, match="normalized"):
            solve_mmp_attack(build_octet(P1))

    def test_matrix_channel_boundary(self):
        plant = StateSpace(
            np.array([[0.5, 0.1], [0.0, 0.3]]), np.eye(2),
            np.array([[1.0, 0.0], [0.2, 0.8]]), np.zeros((2, 2)))
        with pytest.raises(NotImplementedError):
            solve_mmp_attack(build_normalized_octet(plant))


# ---------------------------------------------------------------------------
# Plant-side matching problem
# ---------------------------------------------------------------------------

class TestFaultMatching:
    def test_levels_match_frozen_values(self, norm1, norm2):
        _, level1, lifted1 = solve_mmp_fault(norm1)
        _, level2, _ = solve_mmp_fault(norm2)
        assert level1 == pytest.approx(P1_FAULT_LEVEL, rel=1e-9)
        assert level2 == pytest.approx(P2_FAULT_LEVEL, rel=1e-9)
        assert lifted1 == pytest.approx(np.sqrt(level1**2 + 1), rel=1e-12)

    def test_zero_plant_level_vanishes(self):
        _, level, _ = solve_mmp_fault(build_normalized_octet(ZERO_PLANT))
        assert level == 0.0

    def test_achieved_column_attains_lifted_level(self, norm1, design1):
        lifted = np.sqrt(design1.fault_level**2 + 1)
        achieved = hinf_norm(fault_error_channel(norm1, design1))
        assert achieved >= lifted * (1 - 1e-6)
        assert achieved <= lifted * (1 + 1e-4)

    def test_column_orthogonal_to_image_subspace(self, norm1, design1):
        column = fault_error_channel(norm1, design1)
        causal, _ = hardy_split(series(conjugate(norm1.image_column()), column))
        assert max_singular_on_grid(causal, GRID) < 1e-5

    def test_optimal_column_beats_untuned_column(self, norm1, design1):
        untuned = hinf_norm(norm1.residual_column())
        tuned = hinf_norm(fault_error_channel(norm1, design1))
        assert tuned < untuned - 1e-3

    def test_param_is_stable(self, norm1):
        param, _, _ = solve_mmp_fault(norm1)
        assert param.is_schur()

    def test_matrix_channels_supported(self):
        plant = StateSpace(
            np.array([[0.5, 0.1], [0.0, 0.3]]), np.eye(2),
            np.array([[1.0, 0.0], [0.2, 0.8]]), np.zeros((2, 2)))
        param, level, _ = solve_mmp_fault(build_normalized_octet(plant))
        assert param.is_schur()
        assert level > 0.0

    def test_rejects_unnormalized_octet(self):
        with pytest.raises(ValueError, match="normalized"):
            solve_mmp_fault(build_octet(P1))


# ---------------------------------------------------------------------------
# Design container
# ---------------------------------------------------------------------------

class TestResilientDesign:
    def test_station_param_negates_attack_param(self, design1):
        negated = scale(design1.attack_param, -1.0)
        assert transfer_gap(design1.station_param, negated, GRID) < 1e-12

    def test_plant_param_presence(self, design1, design2):
        assert design1.plant_param is None
        assert design2.plant_param is not None
        assert design2.plant_param.is_schur()

    def test_invalid_mode_rejected(self, design1):
        with pytest.raises(ValueError, match="mode"):
            design1.with_mode("aggressive")

    def test_negative_level_rejected(self, design1):
        with pytest.raises(ValueError, match="nonnegative"):
            ResilientDesign(attack_param=design1.attack_param,
                            attack_level=-1.0,
                            fault_param=design1.fault_param,
                            fault_level=design1.fault_level)

    def test_unstable_param_rejected(self, design1):
        with pytest.raises(ValueError, match="stable"):
            ResilientDesign(attack_param=StateSpace(2.0, 1.0, 1.0, 0.0),
                            attack_level=1.0,
                            fault_param=design1.fault_param,
                            fault_level=design1.fault_level)

    def test_json_round_trip(self, design1):
        restored = ResilientDesign.from_json_dict(design1.to_json_dict())
        assert restored.mode == design1.mode
        assert restored.attack_level == design1.attack_level
        assert restored.fault_level == design1.fault_level
        assert transfer_gap(restored.attack_param, design1.attack_param,
                            GRID) < 1e-12
        assert transfer_gap(restored.station_param, design1.station_param,
                            GRID) < 1e-12

    def test_mode_cycle(self, design1):
        for mode in MODES:
            assert design1.with_mode(mode).mode == mode


# ---------------------------------------------------------------------------
# Deployment
# ---------------------------------------------------------------------------

class TestDeployment:
    def test_nominal_mode_recovers_central_law(self, norm1, design1):
        deployed = deploy_two_site(P1, norm1, design1.with_mode("nominal"))
        assert deployed.extension is None
        assert deployed.policy.youla_q is None
        assert transfer_gap(deployed.station, norm1.central_controller(),
                            GRID) < 1e-12
        assert transfer_gap(deployed.combined, deployed.station, GRID) < 1e-12

    def test_combined_mode_unrealizable_on_first_benchmark(self, norm1,
                                                           design1):
        with pytest.raises(ValueError, match="unstable K factor"):
            deploy_two_site(P1, norm1, design1)

    def test_fault_mode_deploys_on_first_benchmark(self, norm1, design1):
        deployed = deploy_two_site(P1, norm1,
                                   design1.with_mode("fault_tolerant"))
        assert deployed.plant_param.is_schur()
        assert deployed.extension is not None
        # The split law is equivalent to a single site running the combined
        # parameter.
        from cpslab.factorization import youla_controller
        single = youla_controller(norm1, design1.fault_param)
        assert transfer_gap(deployed.combined, single, GRID) < 1e-10

    def test_working_octet_reproduces_normalized_law(self, norm1, design1):
        # The full control law is coordinate-invariant: station transfer for
        # the station-only mode, combined transfer when the plant side is
        # active (the station alone then runs the working octet's own
        # central law, which legitimately differs between octets).
        deadbeat = build_octet(P1)
        attack = design1.with_mode("attack_resilient")
        reference = deploy_two_site(P1, norm1, attack)
        mapped = deploy_two_site(P1, deadbeat, attack)
        assert transfer_gap(mapped.station, reference.station, GRID) < 1e-10
        assert transfer_gap(mapped.combined, reference.combined,
                            GRID) < 1e-10
        fault = design1.with_mode("fault_tolerant")
        reference = deploy_two_site(P1, norm1, fault)
        mapped = deploy_two_site(P1, deadbeat, fault)
        assert mapped.extension is not None
        assert transfer_gap(mapped.combined, reference.combined,
                            GRID) < 1e-10

    def test_stable_station_request(self, norm1, norm2, design1, design2):
        with pytest.raises(ValueError, match="unstable K factor"):
            deploy_two_site(P1, norm1, design1.with_mode("attack_resilient"),
                            require_stable_station=True)
        deployed = deploy_two_site(P2, norm2, design2,
                                   require_stable_station=True)
        assert deployed.station.is_schur()

    def test_dimension_mismatch_rejected(self, norm1, design1):
        wide = StateSpace(0.5, np.array([[1.0, 0.0]]), 1.0,
                          np.zeros((1, 2)))
        with pytest.raises(ValueError, match="dimensions"):
            deploy_two_site(wide, norm1, design1)

    def test_combined_deploy_matches_single_site_run(self, norm2, design2,
                                                     deployed2):
        from cpslab.simloop import StationPolicy
        horizon = 300
        v = Signal(np.zeros((horizon, 1)))
        v.data[0:3, 0] = (1.0, -0.5, 0.25)
        two_site = run_closed_loop(P2, norm2, controller=deployed2.policy,
                                   v=v, horizon=horizon,
                                   plant_side=deployed2.extension)
        single = run_closed_loop(
            P2, norm2, controller=StationPolicy(youla_q=design2.fault_param),
            v=v, horizon=horizon)
        np.testing.assert_allclose(two_site.u_attacked, single.u_attacked,
                                   atol=1e-10)
        np.testing.assert_allclose(two_site.y, single.y, atol=1e-10)
        assert not two_site.diverged


# ---------------------------------------------------------------------------
# Deviation channels and the energy budget
# ---------------------------------------------------------------------------

class TestDeviationChannels:
    def test_attack_channel_attains_lifted_level(self, norm1, design1):
        lifted = np.sqrt(design1.attack_level**2 + 1)
        achieved = hinf_norm(attack_error_channel(norm1, design1))
        assert achieved >= lifted * (1 - 1e-6)
        assert achieved <= lifted * (1 + 1e-4)

    def test_channel_energy_budget(self, norm1, design1):
        # Injections anywhere on the channel plus an impulse residual
        # forcing: the two deviation contributions are orthogonal, so their
        # energies add and each is capped by its lifted level.
        horizon = 300
        rng = np.random.default_rng(7)
        eta = Signal(np.zeros((horizon, 2)))
        eta.data[5:40] = rng.normal(size=(35, 2)) * 0.5
        forcing = Signal(np.zeros((horizon, 1)))
        forcing.data[0, 0] = 1.0
        via_attack, _ = simulate(attack_error_channel(norm1, design1), eta)
        via_fault, _ = simulate(fault_error_channel(norm1, design1), forcing)
        total = np.square(via_attack.data + via_fault.data).sum()
        split = via_attack.l2_norm()**2 + via_fault.l2_norm()**2
        assert abs(total - split) / total < 1e-6
        budget = ((design1.attack_level**2 + 1) * eta.l2_norm()**2
                  + (design1.fault_level**2 + 1) * forcing.l2_norm()**2)
        assert total <= budget + 1e-6

    def test_engine_run_matches_channel_prediction(self, norm2, design2,
                                                   deployed2):
        horizon = 400
        rng = np.random.default_rng(7)
        v = Signal(np.zeros((horizon, 1)))
        v.data[0:3, 0] = (1.0, -0.5, 0.25)
        # Shape the additive fault so the output residual it feeds becomes a
        # unit impulse, keeping the two contributions orthogonal.
        delta = Signal(np.zeros((horizon, 1)))
        delta.data[0, 0] = 1.0
        fault_signal, _ = simulate(inverse(norm2.left_den), delta)
        eta_u = Signal(np.zeros((horizon, 1)))
        eta_u.data[10:60, 0] = rng.normal(size=50) * 0.4
        eta_y = Signal(np.zeros((horizon, 1)))
        eta_y.data[20:70, 0] = rng.normal(size=50) * 0.3
        attack = AttackSpec.additive(
            input_selector=EYE1, input_injection=eta_u,
            output_selector=EYE1, output_injection=eta_y,
            window=(0, horizon))
        fault = FaultSpec(additive=fault_signal, window=(0, horizon))
        clean = run_closed_loop(P2, norm2, controller=deployed2.policy, v=v,
                                horizon=horizon,
                                plant_side=deployed2.extension)
        hit = run_closed_loop(P2, norm2, controller=deployed2.policy, v=v,
                              horizon=horizon, plant_side=deployed2.extension,
                              attack=attack, fault=fault)
        deviation = np.hstack([hit.u_attacked - clean.u_attacked,
                               hit.y - clean.y])

        pair = Signal(np.hstack([eta_u.data, -eta_y.data]))
        via_attack, _ = simulate(attack_error_channel(norm2, design2), pair)
        via_fault, _ = simulate(fault_error_channel(norm2, design2), delta)
        np.testing.assert_allclose(
            deviation, via_attack.data + via_fault.data, atol=1e-10)

        total = float(np.square(deviation).sum())
        split = via_attack.l2_norm()**2 + via_fault.l2_norm()**2
        assert abs(total - split) / total < 1e-6
        budget = ((design2.attack_level**2 + 1)
                  * (eta_u.l2_norm()**2 + eta_y.l2_norm()**2)
                  + (design2.fault_level**2 + 1) * delta.l2_norm()**2)
        assert total <= budget + 1e-6


# ---------------------------------------------------------------------------
# Margins
# ---------------------------------------------------------------------------

class TestStabilityMargins:
    def test_uncorrupted_loop_has_zero_contraction(self, design1):
        margins = stability_margins(design1)
        assert margins["b"] == 0.0
        assert margins["b_attack_condition"] is True
        assert margins["bound_on_e"] == 0.0

    def test_attack_only_contraction_formula(self, design2):
        operator = StateSpace.static(
            np.array([[0.25, 0.35], [0.3, -0.2]]) * 0.6)
        margins = stability_margins(design2, attack=operator)
        lifted = np.sqrt(design2.attack_level**2 + 1)
        expected = lifted * hinf_norm(attack_feedback_gain(operator, 1, 1))
        assert margins["b"] == pytest.approx(expected, rel=1e-12)
        assert margins["b_attack_condition"] == (
            hinf_norm(attack_feedback_gain(operator, 1, 1)) < 1 / lifted)

    def test_bound_infinite_beyond_contraction(self, design2):
        operator = StateSpace.static(
            np.array([[0.25, 0.35], [0.3, -0.2]]) * 4.0)
        margins = stability_margins(design2, attack=operator,
                                    reference_norm=1.0)
        assert margins["b"] >= 1.0
        assert margins["bound_on_e"] == np.inf

    def test_operator_dimension_checks(self, design2):
        with pytest.raises(ValueError, match="pair"):
            stability_margins(design2, attack=StateSpace.static(np.eye(3)))
        with pytest.raises(ValueError, match="residual"):
            stability_margins(design2,
                              fault=StateSpace.static(np.eye(2)))

    def test_contraction_predicts_engine_boundedness(self, norm2, design2):
        # Sufficiency sweep: whenever the certified contraction factor is
        # below one the corrupted loop stays bounded over a long run, and
        # any observed divergence only happens above one.
        design = design2.with_mode("attack_resilient")
        deployed = deploy_two_site(P2, norm2, design)
        base = np.array([[0.25, 0.35], [0.3, -0.2]])
        horizon = 10_000
        v = Signal(np.zeros((horizon, 1)))
        v.data[0:3, 0] = (1.0, -0.5, 0.25)
        saw_divergence = False
        for alpha in (0.2, 1.0, 1.8, 4.0):
            operator = StateSpace.static(base * alpha)
            b = stability_margins(design, attack=operator)["b"]
            attack = AttackSpec.multiplicative(
                loop_operator=operator, tap="clean", window=(0, 2 * horizon))
            trace = run_closed_loop(P2, norm2, controller=deployed.policy,
                                    v=v, horizon=horizon, attack=attack)
            if b < 1.0:
                assert not trace.diverged
                assert np.max(np.abs(trace.y)) < 1e6
            if trace.diverged:
                saw_divergence = True
                assert b >= 1.0
        assert saw_divergence

    def test_energy_bound_covers_seeded_runs(self, norm2, design2,
                                             deployed2):
        # Fifty randomized corrupted runs at a contraction factor of 0.8:
        # the certified deviation bound must dominate every observed
        # deviation energy.
        lifted_fault = np.sqrt(design2.fault_level**2 + 1)
        scalar_op = StateSpace(0.2, 1.0, 0.3, 0.5)
        pick_output = StateSpace.static(np.array([[0.0, 1.0]]))
        measurement_op = series(scalar_op, pick_output)
        residual_op = series(norm2.left_den, measurement_op)
        beta = 0.8 / (lifted_fault * hinf_norm(residual_op))
        margins = stability_margins(design2, fault=scale(residual_op, beta))
        assert margins["b"] == pytest.approx(0.8, abs=1e-9)

        horizon = 500
        worst = 0.0
        for seed in range(50):
            rng = np.random.default_rng(1000 + seed)
            v = Signal(np.zeros((horizon, 1)))
            v.data[0:5, 0] = rng.normal(size=5)
            eta_u = Signal(np.zeros((horizon, 1)))
            eta_u.data[5:45, 0] = rng.normal(size=40) * 0.3
            eta_y = Signal(np.zeros((horizon, 1)))
            eta_y.data[5:45, 0] = rng.normal(size=40) * 0.3
            extra = Signal(np.zeros((horizon, 1)))
            extra.data[10:30, 0] = rng.normal(size=20) * 0.2
            attack = AttackSpec.additive(
                input_selector=EYE1, input_injection=eta_u,
                output_selector=EYE1, output_injection=eta_y,
                window=(0, horizon))
            fault = FaultSpec(multiplicative=scale(measurement_op, beta),
                              additive=extra, window=(0, horizon))
            clean = run_closed_loop(P2, norm2, controller=deployed2.policy,
                                    v=v, horizon=horizon,
                                    plant_side=deployed2.extension)
            hit = run_closed_loop(P2, norm2, controller=deployed2.policy,
                                  v=v, horizon=horizon,
                                  plant_side=deployed2.extension,
                                  attack=attack, fault=fault)
            assert not hit.diverged
            observed = np.sqrt(pair_energy(
                hit.u_attacked - clean.u_attacked, hit.y - clean.y))
            residual_forcing, _ = simulate(norm2.left_den, extra)
            bound = stability_margins(
                design2, fault=scale(residual_op, beta),
                reference_norm=np.sqrt(pair_energy(clean.u_attacked,
                                                   clean.y)),
                attack_signal_norm=float(np.sqrt(
                    eta_u.l2_norm()**2 + eta_y.l2_norm()**2)),
                fault_signal_norm=residual_forcing.l2_norm())["bound_on_e"]
            assert observed <= bound
            worst = max(worst, observed / bound)
        assert worst < 1.0


# ---------------------------------------------------------------------------
# Mode selection
# ---------------------------------------------------------------------------

class TestSelectMode:
    def test_verdict_table(self):
        assert select_mode() == "nominal"
        assert select_mode("none") == "nominal"
        assert select_mode("fault") == "fault_tolerant"
        assert select_mode("attack") == "attack_resilient"
        assert select_mode("fault", "attack") == "combined"
        assert select_mode("none", "attack", "none") == "attack_resilient"

    def test_accepts_report_objects(self):
        class Report:
            verdict = "fault"

        assert select_mode(Report()) == "fault_tolerant"
        assert select_mode(Report(), "attack") == "combined"

    def test_unknown_verdict_rejected(self):
        with pytest.raises(ValueError, match="verdict"):
            select_mode("suspicious")


class TestSymbols:
    def test_attack_symbol_shape(self, norm1):
        symbol = attack_symbol(norm1)
        assert (symbol.p, symbol.m) == (1, 1)
        assert not symbol.is_schur()

    def test_fault_symbol_matches_column_residue(self, norm1, design1):
        # The causal projection of the symbol is the negated plant-side
        # parameter, so symbol plus parameter is purely strictly anticausal.
        remainder = parallel(fault_symbol(norm1), design1.fault_param)
        causal, anti = hardy_split(remainder)
        assert max_singular_on_grid(causal, GRID) < 1e-9
        assert hinf_norm(anti) == pytest.approx(design1.fault_level,
                                                rel=1e-9)
