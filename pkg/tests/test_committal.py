import csv
import json
import math

import numpy as np
import pytest

from committal_lab.bandit import BanditInstance, softmax
from committal_lab.committal import (ALL_SUBOPTIMAL, Committal, GreedinessLost,
                                     estimate_committal_rate, fixed_action_trajectory,
                                     forever_probability_lower_bound, linear_fit, tail_indices,
                                     verify_optimality_smart)
from committal_lab.errors import InvalidParameterError, UnsupportedRuleError
from committal_lab.rules import SambaState, UpdateRuleSpec, step

INST = BanditInstance([1.0, 0.5])
INST8 = BanditInstance([1.0, 0.8])


def generic_residuals(rule, theta1, inst, arm, T):
    """Reference path through the general stepping interface."""
    state = SambaState(softmax(theta1)) if rule.kind.value == "SAMBA" else np.asarray(theta1, float)
    out = []
    for _ in range(T):
        p = state.probs if isinstance(state, SambaState) else softmax(state)
        out.append(np.delete(p, arm).sum())
        with np.errstate(over="ignore"):
            state = step(rule, state, inst, arm)
        if not isinstance(state, SambaState) and not np.all(np.isfinite(state)):
            break
    return np.array(out)


class TestFixedActionTrajectory:
    @pytest.mark.parametrize("rule,inst,arm", [
        (UpdateRuleSpec("PG_STOCH", 0.7), BanditInstance([1.0, 0.8, 0.3]), 1),
        (UpdateRuleSpec("PG_STOCH", 1.0, eta_policy="committal"), INST8, 1),
        (UpdateRuleSpec("NPG_STOCH", 0.05), BanditInstance([1.0, 0.8, 0.3]), 2),
        (UpdateRuleSpec("GNPG_STOCH", 0.3), BanditInstance([1.0, 0.8, 0.3, 0.6]), 0),
        (UpdateRuleSpec("GNPG_STOCH", 0.3), INST8, 1),
        (UpdateRuleSpec("NPG_ORACLE_BASELINE", 0.05, 0.9), INST8, 1),
        (UpdateRuleSpec("NPG_LARGE_BASELINE", 0.05, 1.2), BanditInstance([1.0, 0.8, 0.3]), 0),
        (UpdateRuleSpec("SAMBA", 0.1), INST8, 0),
    ])
    def test_matches_generic_stepper(self, rule, inst, arm):
        theta1 = np.linspace(0.2, -0.2, inst.num_arms)
        if rule.kind.value == "SAMBA":
            theta1 = np.zeros(inst.num_arms)
        traj = fixed_action_trajectory(rule, theta1, inst, arm, 150)
        ref = generic_residuals(rule, theta1, inst, arm, 150)
        assert ref.size >= 40
        np.testing.assert_allclose(traj.residuals[: ref.size], ref, rtol=1e-9, atol=1e-300)

    def test_npg_envelope(self):
        traj = fixed_action_trajectory(UpdateRuleSpec("NPG_STOCH", 1.0), [0.0, 0.0], INST, 0, 2000)
        t = np.arange(1, 2001)
        assert np.all(traj.log_residuals <= -(t - 1) + 1e-12)

    def test_staying_constant(self):
        traj = fixed_action_trajectory(UpdateRuleSpec("STAYING"), [0.3, 0.0, -1.0],
                                       BanditInstance([1.0, 0.8, 0.3]), 1, 500)
        assert np.all(traj.residuals == traj.residuals[0])

    def test_pg_committal_schedule_bound(self):
        for arm in (0, 1):
            traj = fixed_action_trajectory(UpdateRuleSpec("PG_STOCH", 1.0, eta_policy="committal"),
                                           [0.0, 0.0], INST, arm, 20_000)
            t = np.arange(1, 20_001)
            assert np.all(t * traj.residuals <= 10 / 0.5 ** 2)

    def test_running_product_vanishes_for_pg(self):
        traj = fixed_action_trajectory(UpdateRuleSpec("PG_STOCH", 1.0), [0.0, 0.0], INST8, 1, 10**6)
        assert traj.running_product < 1e-3

    def test_saturation_is_flagged(self):
        rule = UpdateRuleSpec("NPG_LARGE_BASELINE", 1.0, 1.5)
        traj = fixed_action_trajectory(rule, [0.0, 0.0, 0.0], BanditInstance([1.0, 0.8, 0.3]), 2, 300)
        sat = traj.saturated_at
        assert sat is not None
        assert np.all(traj.residuals[sat - 1:] == 1.0)
        assert traj.running_product == 0.0
        assert np.all(np.diff(traj.residuals) >= 0)

    def test_optimal_arm_underflows_without_saturation(self):
        traj = fixed_action_trajectory(UpdateRuleSpec("NPG_STOCH", 1.0), [0.0, 0.0], INST, 0, 5000)
        assert traj.saturated_at is None
        assert traj.residuals[-1] == 0.0 and np.all(np.isfinite(traj.log_residuals))

    def test_errors(self):
        with pytest.raises(UnsupportedRuleError):
            fixed_action_trajectory(UpdateRuleSpec("NPG_TRUE"), [0.0, 0.0], INST, 0, 10)
        with pytest.raises(InvalidParameterError):
            fixed_action_trajectory(UpdateRuleSpec("NPG_STOCH"), [0.0, 0.0], INST, 2, 10)
        with pytest.raises(InvalidParameterError):
            fixed_action_trajectory(UpdateRuleSpec("NPG_STOCH"), [0.0, 0.0], INST, 0, 1)
        with pytest.raises(InvalidParameterError):
            fixed_action_trajectory(UpdateRuleSpec("SAMBA", 0.5), [0.0, 0.0], INST8, 0, 10)

    def test_samba_needs_greedy_arm(self):
        with pytest.raises(GreedinessLost):
            fixed_action_trajectory(UpdateRuleSpec("SAMBA", 0.1), [0.0, 0.0], INST8, 1, 10)

    def test_csv_roundtrip(self, tmp_path):
        traj = fixed_action_trajectory(UpdateRuleSpec("PG_STOCH", 0.3), [0.0, 0.0], INST, 1, 50)
        traj.to_csv(tmp_path / "u.csv")
        with open(tmp_path / "u.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["t", "u_t", "log_u_t", "running_product"]
        assert [float(r["u_t"]) for r in rows] == traj.residuals.tolist()


class TestEstimator:
    def test_window(self):
        ts = tail_indices(10_000)
        assert ts[0] == 100 and ts[-1] == 10_000
        assert np.all(np.diff(ts) > 0)

    def test_linear_fit_exact_line(self):
        x = np.arange(10.0)
        slope, icpt, r2 = linear_fit(x, 3 - 2 * x)
        assert slope == pytest.approx(-2) and icpt == pytest.approx(3) and r2 == pytest.approx(1)

    def test_pg_committal_schedule(self):
        rule = UpdateRuleSpec("PG_STOCH", 1.0, eta_policy="committal")
        est = estimate_committal_rate(fixed_action_trajectory(rule, [0.0, 0.0], INST8, 1, 10**5))
        assert est.classification is Committal.POLYNOMIAL
        assert 0.8 <= est.alpha_hat <= 1.2

    def test_npg_exponential(self):
        est = estimate_committal_rate(fixed_action_trajectory(UpdateRuleSpec("NPG_STOCH"), [0.0, 0.0],
                                                              INST8, 1, 1000))
        assert est.classification is Committal.EXPONENTIAL
        assert est.underflow
        assert json.loads(json.dumps(est.to_json()))["alpha_hat"] is None

    def test_gnpg_exponential_without_underflow(self):
        est = estimate_committal_rate(fixed_action_trajectory(UpdateRuleSpec("GNPG_STOCH", 0.01),
                                                              [0.0, 0.0], INST8, 1, 1000))
        assert est.classification is Committal.EXPONENTIAL and not est.underflow

    def test_samba(self):
        est = estimate_committal_rate(fixed_action_trajectory(UpdateRuleSpec("SAMBA", 0.1), [0.0, 0.0],
                                                              INST8, 0, 10**5))
        assert est.classification is Committal.POLYNOMIAL
        assert 0.8 <= est.alpha_hat <= 1.2

    def test_staying_zero(self):
        est = estimate_committal_rate(fixed_action_trajectory(UpdateRuleSpec("STAYING"), [0.0, 0.0],
                                                              INST8, 1, 200))
        assert est.classification is Committal.ZERO and est.alpha_hat == 0.0

    def test_synthetic_power_laws(self):
        # hand-built residuals t^-0.5 and exp(-t/50) exercise the classifier directly
        for alpha in (0.5, 1.0, 2.0):
            traj = fixed_action_trajectory(UpdateRuleSpec("STAYING"), [0.0, 0.0], INST, 0, 4000)
            t = np.arange(1, 4001.0)
            fake = type(traj)(t ** -alpha, -alpha * np.log(t), np.zeros(4000), traj.rule, 0)
            est = estimate_committal_rate(fake)
            assert est.classification is Committal.POLYNOMIAL
            assert est.alpha_hat == pytest.approx(alpha, rel=1e-9)
        t = np.arange(1, 4001.0)
        fake = type(traj)(np.exp(-t / 50), -t / 50, np.zeros(4000), traj.rule, 0)
        assert estimate_committal_rate(fake).classification is Committal.EXPONENTIAL

    def test_short_trajectory(self):
        traj = fixed_action_trajectory(UpdateRuleSpec("NPG_STOCH"), [0.0, 0.0], INST, 1, 50)
        with pytest.raises(InvalidParameterError):
            estimate_committal_rate(traj)


class TestForeverBound:
    def test_npg_hand(self):
        b = forever_probability_lower_bound(UpdateRuleSpec("NPG_STOCH", 1.0), [0.0, 0.0], INST, 1)
        assert b == pytest.approx(math.exp(-(math.exp(0.5) / 0.5)), rel=1e-14)

    def test_gnpg_hand(self):
        for arm in (0, 1):
            b = forever_probability_lower_bound(UpdateRuleSpec("GNPG_STOCH", 1.0), [0.0, 0.0], INST, arm)
            assert b == pytest.approx(math.exp(-math.sqrt(2) * math.exp(1 / math.sqrt(2))), rel=1e-14)

    def test_all_suboptimal(self):
        inst = BanditInstance([1.0, 0.6, 0.4])
        b = forever_probability_lower_bound(UpdateRuleSpec("NPG_STOCH", 1.0), np.zeros(3), inst, ALL_SUBOPTIMAL)
        assert b == pytest.approx(math.exp(-math.exp(0.4 / 2) / 0.4), rel=1e-14)

    def test_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            k = int(rng.integers(2, 6))
            inst = BanditInstance(rng.uniform(0.05, 1.0, k))
            kind = "NPG_STOCH" if rng.random() < 0.5 else "GNPG_STOCH"
            b = forever_probability_lower_bound(UpdateRuleSpec(kind, float(rng.uniform(0.2, 3))),
                                                rng.normal(0, 1, k), inst, int(rng.integers(k)))
            assert 0.0 <= b < 1.0

    def test_unsupported(self):
        with pytest.raises(UnsupportedRuleError):
            forever_probability_lower_bound(UpdateRuleSpec("PG_STOCH"), [0.0, 0.0], INST, 1)


class TestOptimalitySmart:
    @pytest.mark.parametrize("kind", ["PG_STOCH", "GNPG_STOCH"])
    def test_dominating_exhaustive(self, kind):
        rep = verify_optimality_smart(UpdateRuleSpec(kind, 1.0), [0.0, 0.0], INST, 10, dominating_only=True)
        assert rep.exhaustive and rep.sequences == 1024
        assert rep.max_violation <= 1e-12

    def test_staying(self):
        rep = verify_optimality_smart(UpdateRuleSpec("STAYING"), [0.0, 0.0], INST, 6)
        assert rep.max_violation == 0.0

    def test_npg_small_step(self):
        rep = verify_optimality_smart(UpdateRuleSpec("NPG_STOCH", 0.1), [0.0, 0.0], INST, 10)
        assert rep.max_violation <= 1e-12

    def test_npg_unit_step_counterexample(self):
        # z = theta(1) - theta(0); sampling arm 0 gives z -= 1 + e^z, arm 1 gives z += 0.5 (1 + e^-z)
        def a_star(z):
            return z - (1 + math.exp(z))

        forced = a_star(a_star(a_star(0.0)))
        detour = a_star(0.0)
        detour = detour + 0.5 * (1 + math.exp(-detour))
        detour = a_star(detour)
        gap = 1 / (1 + math.exp(detour)) - 1 / (1 + math.exp(forced))
        rep = verify_optimality_smart(UpdateRuleSpec("NPG_STOCH", 1.0), [0.0, 0.0], INST, 10)
        assert rep.max_violation == pytest.approx(gap, rel=1e-9)
        assert rep.worst_sequence[:3] == (0, 1, 0)

    def test_sampled_branch(self):
        rep = verify_optimality_smart(UpdateRuleSpec("PG_STOCH", 1.0), [0.0, 0.0], INST, 13,
                                      dominating_only=True, n_samples=300)
        assert not rep.exhaustive and rep.sequences == 300
        assert rep.max_violation <= 1e-12
