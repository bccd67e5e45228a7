"""Update rules for softmax bandits behind a single stepping interface."""
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .bandit import as_logits, gradient_direction, softmax, true_gradient
from .errors import (DimensionError, InvalidParameterError, SimplexError,
                     UnsupportedRuleError)


class RuleKind(str, Enum):
    PG_TRUE = "PG_TRUE"
    NPG_TRUE = "NPG_TRUE"
    GNPG_TRUE = "GNPG_TRUE"
    PG_STOCH = "PG_STOCH"
    NPG_STOCH = "NPG_STOCH"
    GNPG_STOCH = "GNPG_STOCH"
    NPG_ORACLE_BASELINE = "NPG_ORACLE_BASELINE"
    NPG_LARGE_BASELINE = "NPG_LARGE_BASELINE"
    STAYING = "STAYING"
    SAMBA = "SAMBA"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().upper().replace("-", "_")
        aliases = {"PG": "PG_TRUE", "NPG": "NPG_TRUE", "GNPG": "GNPG_TRUE",
                   "ORACLE_BASELINE": "NPG_ORACLE_BASELINE",
                   "LARGE_BASELINE": "NPG_LARGE_BASELINE"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise InvalidParameterError(f"unknown rule kind {name!r}") from None


TRUE_KINDS = frozenset({RuleKind.PG_TRUE, RuleKind.NPG_TRUE, RuleKind.GNPG_TRUE})
STOCH_KINDS = frozenset({RuleKind.PG_STOCH, RuleKind.NPG_STOCH, RuleKind.GNPG_STOCH})
BASELINE_KINDS = frozenset({RuleKind.NPG_ORACLE_BASELINE, RuleKind.NPG_LARGE_BASELINE})
# kinds whose state is a logit vector and that consume a sampled action
SAMPLED_LOGIT_KINDS = STOCH_KINDS | BASELINE_KINDS | {RuleKind.STAYING}


class EtaPolicy(str, Enum):
    FIXED = "fixed"
    # eta_t = pi_t(a) / (5 r(a)) for the sampled arm a
    COMMITTAL = "committal"
    # eta_t = ||true gradient|| / 12
    GRAD_NORM = "grad_norm"


@dataclass(frozen=True)
class UpdateRuleSpec:
    kind: RuleKind
    eta: float = 1.0
    baseline_b: float = None
    eta_policy: EtaPolicy = EtaPolicy.FIXED

    def __post_init__(self):
        object.__setattr__(self, "kind", RuleKind.parse(self.kind))
        object.__setattr__(self, "eta_policy", EtaPolicy(self.eta_policy))
        eta = float(self.eta)
        if not (np.isfinite(eta) and eta > 0):
            raise InvalidParameterError(f"eta must be positive, got {self.eta}")
        object.__setattr__(self, "eta", eta)
        if self.kind in BASELINE_KINDS:
            if self.baseline_b is None or not np.isfinite(self.baseline_b):
                raise InvalidParameterError(f"{self.kind.value} needs a finite baseline_b")
            object.__setattr__(self, "baseline_b", float(self.baseline_b))
        if self.eta_policy is EtaPolicy.GRAD_NORM and self.kind is not RuleKind.PG_STOCH:
            raise InvalidParameterError("grad_norm eta policy applies to PG_STOCH only")
        if self.eta_policy is EtaPolicy.COMMITTAL and self.kind not in (RuleKind.PG_STOCH, RuleKind.PG_TRUE):
            raise InvalidParameterError("committal eta policy applies to PG rules only")

    @property
    def is_true_gradient(self):
        return self.kind in TRUE_KINDS

    def validate_for(self, inst):
        """Check instance-dependent admissibility; returns self for chaining."""
        r_star, gap = inst.rewards[inst.optimal_arm], inst.gap
        b = self.baseline_b
        if self.kind is RuleKind.NPG_ORACLE_BASELINE and not (r_star - gap < b < r_star):
            raise InvalidParameterError(
                f"oracle baseline must lie in ({r_star - gap}, {r_star}), got {b}")
        if self.kind is RuleKind.NPG_LARGE_BASELINE and not b > r_star:
            raise InvalidParameterError(f"large baseline must exceed {r_star}, got {b}")
        if self.kind is RuleKind.SAMBA and not self.eta < gap / (r_star - gap):
            raise InvalidParameterError(
                f"SAMBA needs eta < {gap / (r_star - gap)}, got {self.eta}")
        return self

    def to_json(self):
        out = {"kind": self.kind.value, "eta": self.eta}
        if self.baseline_b is not None:
            out["baseline_b"] = self.baseline_b
        if self.eta_policy is not EtaPolicy.FIXED:
            out["eta_policy"] = self.eta_policy.value
        return out

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict) or "kind" not in obj:
            raise InvalidParameterError("rule JSON needs a 'kind'")
        return cls(obj["kind"], obj.get("eta", 1.0), obj.get("baseline_b"),
                   obj.get("eta_policy", "fixed"))


@dataclass(frozen=True)
class IsEstimate:
    r_hat: np.ndarray
    sampled_action: int


@dataclass(frozen=True)
class SambaState:
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        check_simplex(p)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def greedy(self):
        return int(np.argmax(self.probs))


def check_simplex(p, tol=1e-12):
    if p.ndim != 1 or p.size < 2:
        raise DimensionError("simplex point must be a vector of length >= 2")
    if not np.all(np.isfinite(p)) or np.any(p <= 0.0) or np.any(p >= 1.0):
        raise SimplexError(f"probabilities must lie strictly inside (0, 1): {p.tolist()}")
    if abs(p.sum() - 1.0) > tol:
        raise SimplexError(f"probabilities sum to {p.sum()!r}")


def _check_action(action, k):
    if action is None:
        raise InvalidParameterError("this rule needs a sampled action")
    a = int(action)
    if a != action or not 0 <= a < k:
        raise InvalidParameterError(f"action {action} out of range for {k} arms")
    return a


def is_estimate(inst, pi, action):
    pi = np.asarray(pi, dtype=float)
    if pi.shape != inst.rewards.shape:
        raise DimensionError("policy and instance sizes differ")
    a = _check_action(action, inst.num_arms)
    if not pi[a] > 0:
        raise InvalidParameterError("sampled action has zero probability")
    r_hat = np.zeros_like(pi)
    r_hat[a] = inst.rewards[a] / pi[a]
    return IsEstimate(r_hat, a)


def effective_eta(spec, theta, inst, action=None):
    if spec.eta_policy is EtaPolicy.FIXED:
        return spec.eta
    if spec.eta_policy is EtaPolicy.GRAD_NORM:
        return true_gradient(theta, inst).l2_norm / 12.0
    a = inst.optimal_arm if action is None else action
    return softmax(theta)[a] / (5.0 * inst.rewards[a])


def step_true(spec, theta, inst):
    theta = as_logits(theta, inst.num_arms)
    eta = effective_eta(spec, theta, inst)
    if spec.kind is RuleKind.PG_TRUE:
        return theta + eta * true_gradient(theta, inst).gradient
    if spec.kind is RuleKind.NPG_TRUE:
        return theta + eta * inst.rewards
    if spec.kind is RuleKind.GNPG_TRUE:
        return theta + eta * gradient_direction(theta, inst.rewards)[0]
    raise UnsupportedRuleError(f"{spec.kind.value} is not a true-gradient rule")


def _others_softmax(theta, a):
    """Softmax over all arms except a, with a zero inserted at a."""
    rest = np.delete(theta, a)
    z = np.exp(rest - rest.max())
    q = np.insert(z / z.sum(), a, 0.0)
    return q


def stochastic_direction(kind, theta, inst, action):
    """Update direction for one sampled action; the step is eta times this."""
    k = inst.num_arms
    a = _check_action(action, k)
    r = inst.rewards
    if kind is RuleKind.PG_STOCH:
        pi = softmax(theta)
        d = -r[a] * pi
        d[a] = r[a] * (np.sum(pi[:a]) + np.sum(pi[a + 1:]))
        return d
    if kind is RuleKind.NPG_STOCH:
        d = np.zeros(k)
        d[a] = r[a] * _inv_prob(theta, a)
        return d
    if kind is RuleKind.GNPG_STOCH:
        # e_a - pi is parallel to e_a - q, and q stays well scaled as pi(a) -> 1
        v = -_others_softmax(theta, a)
        v[a] = 1.0
        return v / np.linalg.norm(v)
    raise UnsupportedRuleError(f"{kind.value} is not a stochastic rule")


def _inv_prob(theta, a):
    shifted = theta - theta[a]
    return float(np.exp(shifted).sum())


def step_stochastic(spec, theta, inst, action):
    theta = as_logits(theta, inst.num_arms)
    a = _check_action(action, inst.num_arms)
    eta = effective_eta(spec, theta, inst, a)
    return theta + eta * stochastic_direction(spec.kind, theta, inst, a)


def step_baseline(spec, theta, inst, action):
    if spec.kind not in BASELINE_KINDS:
        raise UnsupportedRuleError(f"{spec.kind.value} is not a baseline rule")
    theta = as_logits(theta, inst.num_arms)
    a = _check_action(action, inst.num_arms)
    return theta + spec.eta * baseline_direction(spec, theta, inst, a)


def baseline_direction(spec, theta, inst, a):
    d = np.zeros(inst.num_arms)
    d[a] = (inst.rewards[a] - spec.baseline_b) * _inv_prob(theta, a)
    return d


def step_samba(state, inst, action, eta):
    p = state.probs
    if p.size != inst.num_arms:
        raise DimensionError("state and instance sizes differ")
    a = _check_action(action, inst.num_arms)
    g = state.greedy
    r = inst.rewards[a]
    new = p.copy()
    if a == g:
        mask = np.arange(p.size) != g
        new[mask] -= eta * p[mask] ** 2 * r / p[a]
    else:
        new[a] += eta * p[a] * r
    new[g] = 0.0
    new[g] = 1.0 - new.sum()
    check_simplex(new)
    return SambaState(new)


def step(spec, state, inst, action=None):
    """Advance any rule by one iteration; true-gradient kinds ignore the action."""
    kind = spec.kind
    if kind is RuleKind.SAMBA:
        return step_samba(state, inst, action, spec.eta)
    if kind in TRUE_KINDS:
        return step_true(spec, state, inst)
    if kind in STOCH_KINDS:
        return step_stochastic(spec, state, inst, action)
    if kind in BASELINE_KINDS:
        return step_baseline(spec, state, inst, action)
    _check_action(action, inst.num_arms)
    return state


def stochastic_moment_oracle(spec, theta, inst):
    """Exact mean and second moment of the per-sample update direction.

    The expectation runs over the K possible sampled actions weighted by
    the current policy, so no randomness is involved.
    """
    kind = spec.kind
    if kind in TRUE_KINDS or kind is RuleKind.SAMBA:
        raise UnsupportedRuleError(f"{kind.value} has no per-sample estimator")
    theta = as_logits(theta, inst.num_arms)
    pi = softmax(theta)
    k = inst.num_arms
    mean = np.zeros(k)
    second = 0.0
    for a in range(k):
        if kind in STOCH_KINDS:
            d = stochastic_direction(kind, theta, inst, a)
        elif kind in BASELINE_KINDS:
            d = baseline_direction(spec, theta, inst, a)
        else:
            d = np.zeros(k)
        mean += pi[a] * d
        second += pi[a] * float(d @ d)
    return mean, second
