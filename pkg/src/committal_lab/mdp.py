"""Finite tabular MDPs with softmax policies: exact values, gradients, updates."""
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidParameterError, ZeroGradientError
from .rules import RuleKind

MDP_KINDS = frozenset({RuleKind.PG_TRUE, RuleKind.NPG_TRUE, RuleKind.GNPG_TRUE,
                       RuleKind.PG_STOCH, RuleKind.NPG_STOCH, RuleKind.GNPG_STOCH})


@dataclass(frozen=True)
class FiniteMdp:
    """``transition[s, a, s']`` is P(s'|s, a); ``rewards[s, a]`` lies in (0, 1]."""
    transition: np.ndarray
    rewards: np.ndarray
    gamma: float
    mu: np.ndarray
    rho: np.ndarray = None

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        r = np.array(self.rewards, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or r.shape != P.shape[:2]:
            raise DimensionError(f"transition {P.shape} and rewards {r.shape} disagree")
        if not np.all(np.isfinite(P)) or np.any(P < 0) or np.max(np.abs(P.sum(-1) - 1)) > 1e-12:
            raise InvalidParameterError("each P(.|s,a) must be a probability vector")
        if not np.all(np.isfinite(r)) or np.any(r <= 0) or np.any(r > 1):
            raise InvalidParameterError("rewards must lie in (0, 1]")
        gamma = float(self.gamma)
        if not 0.0 <= gamma < 1.0:
            raise InvalidParameterError(f"discount must lie in [0, 1), got {gamma}")
        mu = self._distribution(self.mu, P.shape[0], "mu")
        if mu.min() <= 0:
            raise InvalidParameterError("mu must be strictly positive")
        rho = mu.copy() if self.rho is None else self._distribution(self.rho, P.shape[0], "rho")
        for name, arr in (("transition", P), ("rewards", r), ("mu", mu), ("rho", rho)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "gamma", gamma)

    @staticmethod
    def _distribution(x, n, name):
        x = np.array(x, dtype=float).reshape(-1)
        if x.size != n or not np.all(np.isfinite(x)) or np.any(x < 0) or abs(x.sum() - 1) > 1e-12:
            raise InvalidParameterError(f"{name} must be a distribution over {n} states")
        return x

    @property
    def num_states(self):
        return self.transition.shape[0]

    @property
    def num_actions(self):
        return self.transition.shape[1]

    def to_json(self):
        return {"P": self.transition.tolist(), "r": self.rewards.tolist(),
                "gamma": self.gamma, "mu": self.mu.tolist(), "rho": self.rho.tolist()}

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(obj["P"], obj["r"], obj["gamma"], obj["mu"], obj.get("rho"))
        except (KeyError, TypeError) as exc:
            raise InvalidParameterError(f"malformed MDP JSON: {exc}") from None


def random_mdp(rng, num_states, num_actions, gamma, reward_floor=0.05):
    S, A = num_states, num_actions
    P = rng.dirichlet(np.ones(S), size=(S, A))
    P /= P.sum(-1, keepdims=True)
    r = rng.uniform(reward_floor, 1.0, size=(S, A))
    mu = rng.dirichlet(np.ones(S)) + 0.05
    rho = rng.dirichlet(np.ones(S)) + 0.05
    return FiniteMdp(P, r, gamma, mu / mu.sum(), rho / rho.sum())


@dataclass(frozen=True)
class MdpPolicy:
    logits: np.ndarray

    def __post_init__(self):
        th = np.array(self.logits, dtype=float)
        if th.ndim != 2:
            raise DimensionError("MDP logits must be an S x A array")
        if not np.all(np.isfinite(th)):
            raise InvalidParameterError("logits must be finite")
        th.setflags(write=False)
        object.__setattr__(self, "logits", th)

    @property
    def probs(self):
        z = np.exp(self.logits - self.logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    @classmethod
    def uniform(cls, mdp):
        return cls(np.zeros((mdp.num_states, mdp.num_actions)))


def _policy_probs(policy, mdp):
    if isinstance(policy, MdpPolicy):
        pi = policy.probs
    else:
        pi = np.asarray(policy, dtype=float)
    if pi.shape != (mdp.num_states, mdp.num_actions):
        raise DimensionError(f"policy shape {pi.shape} does not match the MDP")
    return pi


@dataclass(frozen=True)
class ValueBundle:
    pi: np.ndarray
    V: np.ndarray
    Q: np.ndarray
    adv: np.ndarray
    d_mu: np.ndarray
    d_rho: np.ndarray

    def value(self, dist):
        return float(np.asarray(dist) @ self.V)


def _row_dot(a, b):
    return np.array([a[s] @ b[s] for s in range(a.shape[0])])


def solve_values(mdp, policy):
    """Exact V, Q, advantage and discounted state distributions for a policy.

    Takes either an ``MdpPolicy`` or an explicit S x A probability table.
    """
    pi = _policy_probs(policy, mdp)
    P, g = mdp.transition, mdp.gamma
    S = mdp.num_states
    P_pi = np.einsum("sa,sat->st", pi, P)
    r_pi = _row_dot(pi, mdp.rewards)
    M = np.eye(S) - g * P_pi
    V = np.linalg.solve(M, r_pi)
    Q = mdp.rewards + g * (P @ V)
    d = np.linalg.solve(M.T, np.column_stack([(1 - g) * mdp.mu, (1 - g) * mdp.rho]))
    return ValueBundle(pi, V, Q, Q - V[:, None], d[:, 0], d[:, 1])


def value_of(mdp, logits, dist=None):
    vb = solve_values(mdp, MdpPolicy(logits))
    return vb.value(mdp.mu if dist is None else dist)


def bellman_residual(mdp, vb):
    backup = _row_dot(vb.pi, mdp.rewards) + mdp.gamma * (np.einsum("sa,sat->st", vb.pi, mdp.transition) @ vb.V)
    return float(np.max(np.abs(vb.V - backup)))


def mdp_true_gradient(mdp, policy, values=None):
    vb = solve_values(mdp, policy) if values is None else values
    return (1.0 / (1.0 - mdp.gamma)) * vb.d_mu[:, None] * vb.pi * vb.adv


def _check_actions(actions, mdp):
    acts = np.asarray(actions)
    if acts.shape != (mdp.num_states,) or not np.issubdtype(acts.dtype, np.integer):
        raise InvalidParameterError("need one integer action per state")
    if np.any(acts < 0) or np.any(acts >= mdp.num_actions):
        raise InvalidParameterError("sampled action out of range")
    return acts


def parallel_is_estimate(mdp, policy, actions, values):
    acts = _check_actions(actions, mdp)
    pi = values.pi if policy is None else _policy_probs(policy, mdp)
    rows = np.arange(mdp.num_states)
    q_hat = np.zeros_like(values.Q)
    q_hat[rows, acts] = values.Q[rows, acts] / pi[rows, acts]
    return q_hat


def stochastic_gradient(mdp, values, q_hat):
    pi = values.pi
    centred = q_hat - _row_dot(pi, q_hat)[:, None]
    return (1.0 / (1.0 - mdp.gamma)) * values.d_mu[:, None] * pi * centred


def parallel_is_moments(mdp, values, kind=RuleKind.NPG_STOCH):
    """Exact mean and second moment of the per-iteration stochastic direction.

    States sample independently and both quantities separate over states,
    so the expectation is a per-state weighted sum over the A outcomes.
    """
    kind = RuleKind.parse(kind)
    pi = values.pi
    S, A = pi.shape
    mean = np.zeros((S, A))
    second = 0.0
    for a in range(A):
        acts = np.full(S, a)
        q_hat = parallel_is_estimate(mdp, None, acts, values)
        if kind is RuleKind.NPG_STOCH:
            d = q_hat
        elif kind is RuleKind.PG_STOCH:
            d = stochastic_gradient(mdp, values, q_hat)
        elif kind is RuleKind.GNPG_STOCH:
            raise InvalidParameterError("GNPG normalization couples states; no separable moments")
        else:
            raise InvalidParameterError(f"{kind.value} has no stochastic estimator")
        w = pi[:, a]
        mean += w[:, None] * d
        second += float(w @ np.sum(d * d, axis=1))
    return mean, second


def step_mdp(kind, mdp, policy, eta, actions=None, values=None):
    kind = RuleKind.parse(kind)
    if kind not in MDP_KINDS:
        raise InvalidParameterError(f"{kind.value} is not defined for MDPs")
    if not eta > 0:
        raise InvalidParameterError("eta must be positive")
    pol = policy if isinstance(policy, MdpPolicy) else MdpPolicy(policy)
    vb = solve_values(mdp, pol) if values is None else values
    theta = pol.logits
    if kind is RuleKind.NPG_TRUE:
        return MdpPolicy(theta + eta * vb.Q)
    if kind in (RuleKind.PG_TRUE, RuleKind.GNPG_TRUE):
        g = mdp_true_gradient(mdp, pol, vb)
    else:
        if actions is None:
            raise InvalidParameterError("stochastic MDP rules need one sampled action per state")
        q_hat = parallel_is_estimate(mdp, None, actions, vb)
        if kind is RuleKind.NPG_STOCH:
            return MdpPolicy(theta + eta * q_hat)
        g = stochastic_gradient(mdp, vb, q_hat)
    if kind in (RuleKind.GNPG_TRUE, RuleKind.GNPG_STOCH):
        n = np.linalg.norm(g)
        if n == 0.0:
            raise ZeroGradientError("normalized MDP step with a zero gradient")
        g = g / n
    return MdpPolicy(theta + eta * g)


def greedy_gaps(Q):
    """Greedy action per state and its gap to the runner-up."""
    order = np.argsort(-Q, axis=1, kind="stable")
    rows = np.arange(Q.shape[0])
    best = order[:, 0]
    gap = Q[rows, best] - Q[rows, order[:, 1]]
    return best, gap


def adaptive_npg_learning_rate(mdp, policy, values=None):
    vb = solve_values(mdp, policy) if values is None else values
    best, gap = greedy_gaps(vb.Q)
    if np.any(gap <= 0):
        raise InvalidParameterError("tied greedy action values; the greedy gap is zero")
    rows = np.arange(mdp.num_states)
    return float(1.0 / np.min(vb.pi[rows, best] * gap))


def natural_nl_factor(mdp, values, eta):
    best, gap = greedy_gaps(values.Q)
    if np.any(gap <= 0):
        raise InvalidParameterError("tied greedy action values; the greedy gap is zero")
    p = values.pi[np.arange(mdp.num_states), best]
    return float(np.min(1.0 - 1.0 / (p * np.expm1(eta * gap) + 1.0)))


def gnpg_mdp_learning_rate(mdp):
    # the concentrability constant is replaced by its bound 1 / min_s mu(s)
    g = mdp.gamma
    c_inf = 1.0 / float(mdp.mu.min())
    return (1 - g) * g / (6 * (1 - g) * g + 4 * (c_inf - (1 - g))) / math.sqrt(mdp.num_states)


@dataclass(frozen=True)
class OptimalSolution:
    actions: np.ndarray
    policy: np.ndarray
    values: ValueBundle
    min_gap: float

    @property
    def unique(self):
        return self.min_gap > 1e-9


def policy_iteration(mdp, max_iter=10_000):
    S, A = mdp.num_states, mdp.num_actions
    acts = np.argmax(mdp.rewards, axis=1)
    for _ in range(max_iter):
        pi = np.zeros((S, A))
        pi[np.arange(S), acts] = 1.0
        vb = solve_values(mdp, pi)
        q = vb.Q
        best = np.argmax(q, axis=1)
        rows = np.arange(S)
        # switch only on a strict improvement so that the iteration cannot cycle on ties
        improve = q[rows, best] > q[rows, acts] + 1e-13 * np.maximum(1.0, np.abs(q[rows, acts]))
        if not np.any(improve):
            _, gap = greedy_gaps(q)
            return OptimalSolution(acts, pi, vb, float(np.min(gap)))
        acts = np.where(improve, best, acts)
    raise InvalidParameterError("policy iteration did not terminate")


def performance_difference_residual(mdp, pol_a, pol_b):
    """|V^a(rho) - V^b(rho) - sum_s d_rho^a(s) sum_a pi_a(a|s) A^b(s,a) / (1 - gamma)|."""
    va = solve_values(mdp, pol_a)
    vb = solve_values(mdp, pol_b)
    lhs = va.value(mdp.rho) - vb.value(mdp.rho)
    rhs = float(va.d_rho @ _row_dot(va.pi, vb.adv)) / (1 - mdp.gamma)
    return abs(lhs - rhs)


def value_suboptimality_residual(mdp, policy, opt=None):
    opt = policy_iteration(mdp) if opt is None else opt
    vb = solve_values(mdp, policy)
    lhs = opt.values.value(mdp.rho) - vb.value(mdp.rho)
    inner = _row_dot(opt.policy - vb.pi, opt.values.Q)
    rhs = float(vb.d_rho @ inner) / (1 - mdp.gamma)
    return abs(lhs - rhs)


def general_nl_slack(mdp, policy, opt=None):
    opt = policy_iteration(mdp) if opt is None else opt
    vb = solve_values(mdp, policy)
    grad = mdp_true_gradient(mdp, policy, vb)
    ratio = np.max(opt.values.d_rho / vb.d_mu)
    p_star = np.min(vb.pi[np.arange(mdp.num_states), opt.actions])
    sub = opt.values.value(mdp.rho) - vb.value(mdp.rho)
    return float(np.linalg.norm(grad) - p_star * sub / (ratio * math.sqrt(mdp.num_states)))


def natural_nl_general_slack(mdp, policy, eta, opt=None, factor=None):
    """Exact-NPG one-step improvement minus its guaranteed share of the gap.

    ``factor`` overrides the state-wise constant c(theta); pass 0.5 to check
    the adaptive step-size guarantee.
    """
    opt = policy_iteration(mdp) if opt is None else opt
    pol = policy if isinstance(policy, MdpPolicy) else MdpPolicy(policy)
    vb = solve_values(mdp, pol)
    nxt = solve_values(mdp, step_mdp(RuleKind.NPG_TRUE, mdp, pol, eta, values=vb))
    c = natural_nl_factor(mdp, vb, eta) if factor is None else factor
    conc = np.max(opt.values.d_rho / mdp.rho)
    v_star = opt.values.value(mdp.rho)
    gain = nxt.value(mdp.rho) - vb.value(mdp.rho)
    return float(gain - c * (1 - mdp.gamma) / conc * (v_star - vb.value(mdp.rho)))


def forced_mdp_trajectory(kind, mdp, theta1, eta, actions, T):
    """pi_t(actions(s) | s) for t = 1..T when each state always samples the given action."""
    acts = _check_actions(actions, mdp)
    pol = MdpPolicy(theta1)
    rows = np.arange(mdp.num_states)
    out = np.empty((T, mdp.num_states))
    for t in range(T):
        out[t] = pol.probs[rows, acts]
        if t + 1 < T:
            pol = step_mdp(kind, mdp, pol, eta, acts)
    return out
