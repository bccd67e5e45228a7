"""Softmax policies on one-state bandits: values, gradients, Hessians."""
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidParameterError, ZeroGradientError


@dataclass(frozen=True)
class BanditInstance:
    rewards: np.ndarray

    def __post_init__(self):
        r = np.array(self.rewards, dtype=float).reshape(-1)
        if r.size < 2:
            raise InvalidParameterError("a bandit needs at least two arms")
        if not np.all(np.isfinite(r)) or np.any(r <= 0.0) or np.any(r > 1.0):
            raise InvalidParameterError(f"rewards must lie in (0, 1], got {r.tolist()}")
        best = int(np.argmax(r))
        if np.count_nonzero(r == r[best]) > 1:
            raise InvalidParameterError("optimal arm is not unique")
        r.setflags(write=False)
        object.__setattr__(self, "rewards", r)

    @property
    def num_arms(self):
        return self.rewards.size

    @property
    def optimal_arm(self):
        return int(np.argmax(self.rewards))

    @property
    def gap(self):
        r = self.rewards
        return float(r[self.optimal_arm] - np.max(np.delete(r, self.optimal_arm)))

    @property
    def min_reward(self):
        return float(np.min(np.delete(self.rewards, self.optimal_arm)))

    def to_json(self):
        return {"rewards": [float(x) for x in self.rewards]}

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict) or "rewards" not in obj:
            raise InvalidParameterError("bandit instance JSON needs a 'rewards' list")
        return cls(np.asarray(obj["rewards"], dtype=float))


@dataclass(frozen=True)
class GradientReport:
    gradient: np.ndarray
    l2_norm: float
    inner_with_r: float


def as_logits(theta, k=None):
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise DimensionError("logits must be a vector")
    if k is not None and theta.size != k:
        raise DimensionError(f"expected {k} logits, got {theta.size}")
    if not np.all(np.isfinite(theta)):
        raise InvalidParameterError("logits must be finite")
    return theta


def softmax(theta):
    theta = as_logits(theta)
    z = np.exp(theta - theta.max())
    return z / z.sum()


def log_softmax(theta):
    theta = as_logits(theta)
    shifted = theta - theta.max()
    return shifted - np.log(np.exp(shifted).sum())


def _check_dims(pi, inst):
    pi = np.asarray(pi, dtype=float)
    if pi.shape != inst.rewards.shape:
        raise DimensionError(f"policy has shape {pi.shape}, instance has {inst.num_arms} arms")
    return pi


def expected_reward(pi, inst):
    pi = _check_dims(pi, inst)
    return float(pi @ inst.rewards)


def suboptimality(pi, inst):
    # summed over the gaps so that tiny values keep their relative precision
    pi = _check_dims(pi, inst)
    r = inst.rewards
    return float(pi @ (r[inst.optimal_arm] - r))


def true_gradient(theta, inst):
    theta = as_logits(theta, inst.num_arms)
    pi = softmax(theta)
    r = inst.rewards
    g = pi * (r - pi @ r)
    return GradientReport(g, float(np.linalg.norm(g)), float(g @ r))


def gradient_direction(theta, rewards):
    """Unit vectors along the value gradient, one per row of ``theta``.

    The gradient is rescaled by 1 / (pi(k) e^m), with k the top arm and m
    the largest remaining logit gap, so the direction stays defined after
    the policy has become one-hot in floating point.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    r = np.asarray(rewards, dtype=float)
    rows = np.arange(theta.shape[0])
    k = np.argmax(theta, axis=1)
    z = theta - theta[rows, k][:, None]
    z[rows, k] = -np.inf
    m = z.max(axis=1)
    s = np.exp(z - m[:, None])
    rk = r[k]
    lead = np.sum(s * (rk[:, None] - r[None, :]), axis=1)
    em = np.exp(m)
    pi_k = 1.0 / (1.0 + em * s.sum(axis=1))
    d = s * (r[None, :] - rk[:, None] + (pi_k * em * lead)[:, None])
    d[rows, k] = pi_k * lead
    n = np.linalg.norm(d, axis=1, keepdims=True)
    if np.any(n == 0.0):
        raise ZeroGradientError("normalized step at a stationary point")
    return d / n


def value_hessian(theta, inst):
    theta = as_logits(theta, inst.num_arms)
    pi = softmax(theta)
    c = inst.rewards - pi @ inst.rewards
    pc = pi * c
    outer = np.outer(pi, pi)
    return np.diag(pc) - outer * c[:, None] - outer * c[None, :]


@dataclass(frozen=True)
class SpectralEstimate:
    value: float
    converged: bool
    iterations: int


def spectral_radius_info(matrix, rtol=1e-10, max_iter=10_000):
    """Dominant absolute eigenvalue of a symmetric matrix by power iteration.

    The iterate is multiplied by ``M = S @ S`` raised to doubling powers,
    with ``M`` renormalized after each squaring; squaring first removes the
    oscillation caused by an eigenvalue pair ``+l, -l``. The start vector
    is fixed so results are reproducible bit for bit.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError("spectral radius needs a square matrix")
    if not np.all(np.isfinite(m)):
        raise InvalidParameterError("matrix has non-finite entries")
    scale = np.max(np.abs(m)) if m.size else 0.0
    if np.max(np.abs(m - m.T), initial=0.0) > 1e-8 * max(1.0, scale):
        raise InvalidParameterError("matrix is not symmetric")
    if scale == 0.0:
        return SpectralEstimate(0.0, True, 0)
    s = 0.5 * (m + m.T) / scale
    k = s.shape[0]
    x = np.arange(1, k + 1, dtype=float)
    x /= np.linalg.norm(x)
    power = s @ s
    prev = np.linalg.norm(s @ x)
    restarts = 0
    for it in range(1, max_iter + 1):
        y = power @ x
        ny = np.linalg.norm(y)
        if ny == 0.0 or not np.isfinite(ny):
            if restarts >= k:
                break
            # start vector fell in a null space; restart from a shifted unit vector
            restarts += 1
            x = np.roll(np.arange(1, k + 1, dtype=float), restarts) ** 2
            x /= np.linalg.norm(x)
            power = s @ s
            continue
        x = y / ny
        est = np.linalg.norm(s @ x)
        if abs(est - prev) <= rtol * est:
            return SpectralEstimate(float(est * scale), True, it)
        prev = est
        power = power @ power
        power /= np.max(np.abs(power))
    return SpectralEstimate(float(prev * scale), False, max_iter)


def spectral_radius(matrix):
    return spectral_radius_info(matrix).value


def nl_inequality_slack(theta, inst):
    theta = as_logits(theta, inst.num_arms)
    pi = softmax(theta)
    g = true_gradient(theta, inst)
    return g.l2_norm - pi[inst.optimal_arm] * suboptimality(pi, inst)


def discrete_nl_factor(pi_star, gap, eta):
    """Fraction of the gap that one exact NPG step is guaranteed to close."""
    return 1.0 - 1.0 / (pi_star * np.expm1(eta * gap) + 1.0)


def natural_nl_slack(theta, inst):
    """Continuous slack and a closure computing the discrete slack for a step size."""
    theta = as_logits(theta, inst.num_arms)
    pi = softmax(theta)
    a_star = inst.optimal_arm
    sub = suboptimality(pi, inst)
    g = true_gradient(theta, inst)
    continuous = g.inner_with_r - pi[a_star] * inst.gap * sub

    def discrete(eta):
        if not eta > 0:
            raise InvalidParameterError("eta must be positive")
        sub_next = suboptimality(softmax(theta + eta * inst.rewards), inst)
        return (sub - sub_next) - discrete_nl_factor(pi[a_star], inst.gap, eta) * sub

    return continuous, discrete
