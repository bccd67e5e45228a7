import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from committal_lab.bandit import (BanditInstance, discrete_nl_factor, expected_reward,
                                  gradient_direction,
                                  log_softmax, natural_nl_slack, nl_inequality_slack, softmax,
                                  spectral_radius, spectral_radius_info, suboptimality,
                                  true_gradient, value_hessian)
from committal_lab.errors import DimensionError, InvalidParameterError


def charpoly_radius(m):
    """Independent oracle: Faddeev-LeVerrier coefficients, then polynomial roots."""
    k = m.shape[0]
    coeffs = [1.0]
    mk = np.zeros_like(m)
    for i in range(1, k + 1):
        mk = m @ mk + coeffs[-1] * np.eye(k)
        coeffs.append(-np.trace(m @ mk) / i)
    return float(np.max(np.abs(np.roots(coeffs))))


def fd_grad(inst, theta, h=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (softmax(theta + e) @ inst.rewards - softmax(theta - e) @ inst.rewards) / (2 * h)
    return g


class TestInstance:
    def test_properties(self):
        inst = BanditInstance([0.3, 1.0, 0.8])
        assert inst.num_arms == 3
        assert inst.optimal_arm == 1
        assert inst.gap == pytest.approx(0.2)
        assert inst.min_reward == 0.3

    @pytest.mark.parametrize("r", [[1.0], [1.0, 1.0], [1.2, 0.5], [0.0, 0.5], [np.nan, 0.5]])
    def test_rejects(self, r):
        with pytest.raises(InvalidParameterError):
            BanditInstance(r)

    def test_json_roundtrip(self):
        inst = BanditInstance([1.0, 0.5])
        again = BanditInstance.from_json(inst.to_json())
        np.testing.assert_array_equal(again.rewards, inst.rewards)

    def test_rewards_frozen(self):
        inst = BanditInstance([1.0, 0.5])
        with pytest.raises(ValueError):
            inst.rewards[0] = 0.2


class TestSoftmax:
    def test_uniform_and_shift(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])
        for c in (-700.0, 0.0, 3.0, 900.0):
            np.testing.assert_allclose(softmax([c, c, c]), [1 / 3] * 3, rtol=1e-15)

    def test_hand_value(self):
        np.testing.assert_allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], rtol=1e-15)

    def test_large_logits(self):
        p = softmax([1000.0, 0.0])
        assert np.all(np.isfinite(p)) and p[0] == 1.0

    def test_log_softmax_matches(self):
        th = np.array([0.3, -2.0, 5.0])
        np.testing.assert_allclose(np.exp(log_softmax(th)), softmax(th), rtol=1e-14)

    @pytest.mark.parametrize("bad", [[np.inf, 0.0], [np.nan, 1.0]])
    def test_non_finite(self, bad):
        with pytest.raises(InvalidParameterError):
            softmax(bad)

    def test_matrix_rejected(self):
        with pytest.raises(DimensionError):
            softmax(np.zeros((2, 2)))


class TestValues:
    def test_expected_reward(self):
        inst = BanditInstance([1.0, 0.5])
        assert expected_reward([0.5, 0.5], inst) == 0.75
        assert expected_reward([1.0, 0.0], inst) == 1.0
        assert expected_reward([1 / 3] * 3, BanditInstance([0.9, 0.6, 0.3])) == pytest.approx(0.6, abs=1e-15)

    def test_suboptimality(self):
        inst = BanditInstance([1.0, 0.5])
        assert suboptimality([1.0, 0.0], inst) == 0.0
        assert suboptimality([0.5, 0.5], inst) == 0.25

    def test_suboptimality_keeps_tiny_values(self):
        inst = BanditInstance([1.0, 0.5])
        # 1 - pi(a*) is far below machine epsilon here
        assert suboptimality(softmax([60.0, 0.0]), inst) == pytest.approx(0.5 * math.exp(-60), rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            expected_reward([0.2, 0.3, 0.5], BanditInstance([1.0, 0.5]))


class TestGradient:
    def test_hand_value(self):
        rep = true_gradient([0.0, 0.0], BanditInstance([1.0, 0.5]))
        np.testing.assert_allclose(rep.gradient, [0.125, -0.125], rtol=1e-15)
        assert rep.l2_norm == pytest.approx(0.125 * math.sqrt(2))
        assert rep.inner_with_r == pytest.approx(0.125 * 0.5)

    def test_stationary_limit(self):
        inst = BanditInstance([1.0, 0.5])
        for th in ([40.0, -40.0], [-40.0, 40.0]):
            assert true_gradient(th, inst).l2_norm < 1e-15

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2**31 - 1))
    def test_matches_finite_differences(self, k, seed):
        rng = np.random.default_rng(seed)
        inst = BanditInstance(rng.uniform(0.05, 1.0, k))
        th = rng.normal(0, 2, k)
        g = true_gradient(th, inst).gradient
        fd = fd_grad(inst, th)
        assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(g), 1e-3)

    def test_wrong_length(self):
        with pytest.raises(DimensionError):
            true_gradient([0.0, 0.0, 0.0], BanditInstance([1.0, 0.5]))


def mp_direction(theta, r):
    """Arbitrary-precision reference; precision grows with the logit spread."""
    spread = float(np.max(theta) - np.min(theta))
    with mpmath.workdps(50 + int(spread / 2.3)):
        e = [mpmath.e ** mpmath.mpf(float(t)) for t in theta]
        z = sum(e)
        pi = [x / z for x in e]
        pr = sum(p * mpmath.mpf(float(x)) for p, x in zip(pi, r))
        g = [p * (mpmath.mpf(float(x)) - pr) for p, x in zip(pi, r)]
        n = mpmath.sqrt(sum(x * x for x in g))
        return np.array([float(x / n) for x in g])


class TestGradientDirection:
    def test_against_high_precision(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            k = int(rng.integers(2, 8))
            r = rng.uniform(0.05, 1.0, k)
            th = rng.normal(0, 4, k)
            np.testing.assert_allclose(gradient_direction(th, r)[0], mp_direction(th, r), atol=1e-14)

    def test_far_past_float_saturation(self):
        th = np.array([300.0, -400.0, -450.0])
        r = [1.0, 0.5, 0.9]
        np.testing.assert_allclose(gradient_direction(th, r)[0], mp_direction(th, r), atol=1e-14)

    def test_rows_independent(self):
        th = np.array([[0.0, 1.0, -1.0], [900.0, 0.0, 5.0]])
        out = gradient_direction(th, [1.0, 0.5, 0.2])
        np.testing.assert_array_equal(out[1], gradient_direction(th[1], [1.0, 0.5, 0.2])[0])


class TestHessian:
    def test_fd_of_gradient(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            k = int(rng.integers(2, 7))
            inst = BanditInstance(rng.uniform(0.05, 1.0, k))
            th = rng.normal(0, 1.5, k)
            h = 1e-4
            fd = np.column_stack([(true_gradient(th + h * e, inst).gradient
                                   - true_gradient(th - h * e, inst).gradient) / (2 * h)
                                  for e in np.eye(k)])
            s = value_hessian(th, inst)
            assert np.max(np.abs(s - fd)) <= 1e-4 * max(np.max(np.abs(s)), 1e-3)

    def test_symmetric_zero_rowsum(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            k = int(rng.integers(2, 9))
            inst = BanditInstance(rng.uniform(0.05, 1.0, k))
            s = value_hessian(rng.normal(0, 3, k), inst)
            assert np.max(np.abs(s - s.T)) <= 1e-12
            assert np.max(np.abs(s.sum(axis=1))) <= 1e-10

    def test_hand_values(self):
        inst = BanditInstance([1.0, 0.5])
        np.testing.assert_allclose(value_hessian([0.0, 0.0], inst), np.zeros((2, 2)), atol=1e-17)
        # pi = (2/3, 1/3), pi.r = 5/6, centred rewards (1/6, -1/3)
        expect = np.array([[-1.0, 1.0], [1.0, -1.0]]) / 27
        np.testing.assert_allclose(value_hessian([math.log(2), 0.0], inst), expect, rtol=1e-14)


class TestSpectralRadius:
    def test_trivial(self):
        assert spectral_radius(np.eye(3)) == pytest.approx(1.0, rel=1e-12)
        assert spectral_radius(np.diag([3.0, -5.0, 2.0])) == pytest.approx(5.0, rel=1e-12)
        assert spectral_radius(np.zeros((3, 3))) == 0.0

    def test_plus_minus_pair(self):
        m = np.array([[0.0, 1.0], [1.0, 0.0]])
        info = spectral_radius_info(m)
        assert info.converged and info.value == pytest.approx(1.0, rel=1e-12)

    def test_charpoly_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(300):
            k = int(rng.integers(2, 5))
            a = rng.normal(size=(k, k))
            m = a + a.T
            assert spectral_radius(m) == pytest.approx(charpoly_radius(m), abs=1e-8)

    def test_hessians_against_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            k = int(rng.integers(2, 5))
            inst = BanditInstance(rng.uniform(0.05, 1.0, k))
            s = value_hessian(rng.normal(0, 2, k), inst)
            assert spectral_radius(s) == pytest.approx(charpoly_radius(s), abs=1e-8)

    def test_start_in_null_space(self):
        # (1, 2) is orthogonal to the only nonzero eigenvector here
        m = np.outer([2.0, -1.0], [2.0, -1.0])
        assert spectral_radius(m) == pytest.approx(5.0, rel=1e-12)

    def test_rejects_asymmetric(self):
        with pytest.raises(InvalidParameterError):
            spectral_radius(np.array([[1.0, 2.0], [0.0, 1.0]]))
        with pytest.raises(DimensionError):
            spectral_radius(np.ones((2, 3)))


class TestInequalities:
    def test_nl_hand_value(self):
        inst = BanditInstance([1.0, 0.5])
        assert nl_inequality_slack([0.0, 0.0], inst) == pytest.approx(0.125 * math.sqrt(2) - 0.125)

    def test_nl_optimal_limit(self):
        assert abs(nl_inequality_slack([40.0, -40.0], BanditInstance([1.0, 0.5]))) < 1e-15

    def test_two_arm_tightness(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            inst = BanditInstance(np.sort(rng.uniform(0.05, 1.0, 2))[::-1].copy())
            cont, disc = natural_nl_slack(rng.normal(0, 3, 2), inst)
            assert abs(cont) < 1e-12
            assert abs(disc(float(rng.uniform(0.01, 10)))) < 1e-12

    def test_many_arms_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(500):
            k = int(rng.integers(3, 7))
            inst = BanditInstance(rng.uniform(0.05, 1.0, k))
            th = rng.normal(0, 2, k)
            cont, disc = natural_nl_slack(th, inst)
            assert nl_inequality_slack(th, inst) >= -1e-12
            assert cont >= -1e-12
            assert disc(float(rng.uniform(1e-3, 10))) >= -1e-12

    def test_discrete_factor(self):
        assert discrete_nl_factor(0.5, 0.5, 1.0) == pytest.approx(1 - 1 / (0.5 * (math.e ** 0.5 - 1) + 1))

    def test_discrete_needs_positive_eta(self):
        _, disc = natural_nl_slack([0.0, 0.0], BanditInstance([1.0, 0.5]))
        with pytest.raises(InvalidParameterError):
            disc(0.0)
