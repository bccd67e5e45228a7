"""Forced-arm trajectories, committal-rate estimation, sample-path bounds."""
import csv
import itertools
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .bandit import as_logits, softmax
from .errors import InvalidParameterError, LabError, SimplexError, UnsupportedRuleError
from .rules import (BASELINE_KINDS, STOCH_KINDS, EtaPolicy, RuleKind, SambaState, step)

FORCEABLE_KINDS = STOCH_KINDS | BASELINE_KINDS | {RuleKind.STAYING, RuleKind.SAMBA}
EXHAUSTIVE_LIMIT = 4096
R2_MARGIN = 0.05
DECAY_FLOOR = 1e-6
STAGNATION_RATIO = 0.9
MIN_ESTIMATOR_T = 100


class GreedinessLost(LabError):
    pass


@dataclass(frozen=True)
class FixedActionTrajectory:
    """Residuals ``u_t`` for t = 1..T while ``forced_arm`` is sampled every step.

    ``log_residuals`` stays finite after ``u_t`` underflows. ``saturated_at``
    is the first t at which the logits left float range; from there on the
    state is frozen at its float limit.
    """
    residuals: np.ndarray
    log_residuals: np.ndarray
    log_products: np.ndarray
    rule: object
    forced_arm: int
    saturated_at: int = None

    @property
    def running_product(self):
        return float(np.exp(self.log_products[-1]))

    @property
    def horizon(self):
        return self.residuals.size

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "u_t", "log_u_t", "running_product"])
            for t in range(self.horizon):
                w.writerow([t + 1, f"{self.residuals[t]:.17g}", f"{self.log_residuals[t]:.17g}",
                            f"{math.exp(self.log_products[t]):.17g}"])


def _log_residual(theta, a):
    """(log u, log pi(a)) computed from logit differences."""
    z = np.delete(theta, a) - theta[a]
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    log_pi = -np.logaddexp(0.0, lse)
    return lse + log_pi, log_pi


def fixed_action_trajectory(rule, theta1, inst, arm, T):
    kind = rule.kind
    if kind not in FORCEABLE_KINDS:
        raise UnsupportedRuleError(f"{kind.value} does not consume sampled actions")
    if T < 2:
        raise InvalidParameterError("horizon must be at least 2")
    k = inst.num_arms
    if not (isinstance(arm, (int, np.integer)) and 0 <= arm < k):
        raise InvalidParameterError(f"arm {arm} out of range for {k} arms")
    arm = int(arm)
    rule.validate_for(inst)
    theta = as_logits(theta1, k).copy()
    log_u = np.empty(T)
    log_p = np.empty(T)
    saturated = None
    if rule.eta_policy is EtaPolicy.GRAD_NORM:
        raise UnsupportedRuleError("grad_norm eta policy is not defined for forced sampling")

    if kind is RuleKind.SAMBA:
        _samba_loop(rule, softmax(theta), inst, arm, log_u, log_p)
    else:
        saturated = _relative_logit_loop(rule, theta, inst, arm, log_u, log_p)
    residuals = np.exp(log_u)
    return FixedActionTrajectory(residuals, log_u, np.cumsum(log_p), rule, arm, saturated)


def _samba_loop(rule, p, inst, a, log_u, log_p):
    eta, r = rule.eta, inst.rewards[a]
    others = np.delete(p, a)
    T = log_u.size
    for t in range(T):
        rest = others.sum()
        pa = 1.0 - rest
        # greedy means strictly most likely, or tied with a lower index
        top = others.max()
        if not (pa > top or (pa == top and a <= int(np.argmax(np.insert(others, a, pa))))):
            raise GreedinessLost(f"arm {a} is not greedy at t={t + 1}")
        log_u[t] = math.log(rest)
        log_p[t] = math.log(pa)
        others = others - (eta * r / pa) * others * others
        if np.any(others <= 0.0):
            raise SimplexError(f"probability left (0, 1) at t={t + 2}")


def _relative_logit_loop(rule, theta, inst, a, log_u, log_p):
    """Evolve z = theta(others) - theta(a) under forced sampling of a.

    Each rule's update collapses to a closed-form change of z, which is
    all that u_t and pi_t(a) depend on. Returns the saturation time or None.
    """
    kind = rule.kind
    eta = rule.eta
    r = inst.rewards[a]
    b = rule.baseline_b if rule.baseline_b is not None else 0.0
    committal_eta = rule.eta_policy is EtaPolicy.COMMITTAL
    z = np.delete(theta, a) - theta[a]
    T = log_u.size
    if z.size == 1:
        return _two_arm_loop(kind, eta, r, b, committal_eta, float(z[0]), log_u, log_p)
    for t in range(T):
        m = z.max()
        e = np.exp(z - m)
        se = e.sum()
        lse = m + math.log(se)
        sp = lse + math.log1p(math.exp(-lse)) if lse > 0 else math.log1p(math.exp(lse))
        log_u[t] = lse - sp
        log_p[t] = -sp
        if t + 1 == T or kind is RuleKind.STAYING:
            continue
        if lse > 700.0:
            # 1/pi(a) is past float range; the forced arm is already numerically dead
            log_u[t + 1:] = 0.0
            log_p[t + 1:] = -np.inf
            return t + 2
        if kind is RuleKind.PG_STOCH:
            pi_a = math.exp(-sp)
            u = math.exp(lse - sp)
            step_eta = pi_a / (5.0 * r) if committal_eta else eta
            z = z - step_eta * r * (np.exp(z - sp) + u)
        elif kind is RuleKind.NPG_STOCH:
            z = z - eta * r * (1.0 + math.exp(lse))
        elif kind in BASELINE_KINDS:
            z = z - eta * (r - b) * (1.0 + math.exp(lse))
        elif kind is RuleKind.GNPG_STOCH:
            q = e / se
            z = z - eta * (q + 1.0) / math.sqrt(1.0 + float(q @ q))
    return None


def _two_arm_loop(kind, eta, r, b, committal_eta, z, log_u, log_p):
    """Scalar version of the relative-logit recurrence for two arms."""
    T = log_u.size
    for t in range(T):
        sp = z + math.log1p(math.exp(-z)) if z > 0 else math.log1p(math.exp(z))
        log_u[t] = z - sp
        log_p[t] = -sp
        if t + 1 == T or kind is RuleKind.STAYING:
            continue
        if z > 700.0:
            log_u[t + 1:] = 0.0
            log_p[t + 1:] = -np.inf
            return t + 2
        if kind is RuleKind.PG_STOCH:
            pi_a = math.exp(-sp)
            step_eta = pi_a / (5.0 * r) if committal_eta else eta
            z -= step_eta * r * 2.0 * math.exp(z - sp)
        elif kind is RuleKind.NPG_STOCH:
            z -= eta * r * (1.0 + math.exp(z))
        elif kind in BASELINE_KINDS:
            z -= eta * (r - b) * (1.0 + math.exp(z))
        elif kind is RuleKind.GNPG_STOCH:
            z -= eta * math.sqrt(2.0)
    return None


class Committal(str, Enum):
    POLYNOMIAL = "POLYNOMIAL"
    EXPONENTIAL = "EXPONENTIAL"
    ZERO = "ZERO"


@dataclass(frozen=True)
class CommittalEstimate:
    classification: Committal
    alpha_hat: float
    fit_r2_poly: float
    fit_r2_exp: float
    tail_window: tuple
    slope_exp: float = float("nan")
    underflow: bool = False

    def to_json(self):
        return {"classification": self.classification.value,
                "alpha_hat": self.alpha_hat if math.isfinite(self.alpha_hat) else None,
                "fit_r2_poly": self.fit_r2_poly,
                "fit_r2_exp": self.fit_r2_exp,
                "slope_exp": self.slope_exp if math.isfinite(self.slope_exp) else None,
                "tail_window": list(self.tail_window),
                "underflow": self.underflow}


def tail_indices(T, points=256):
    """Log-spaced 1-based times covering the upper half of [1, T] in log t."""
    lo = max(1, int(math.floor(math.sqrt(T))))
    ts = np.unique(np.round(np.geomspace(lo, T, points)).astype(int))
    return ts


def linear_fit(x, y):
    """Least-squares line; returns (slope, intercept, r2)."""
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def estimate_committal_rate(traj):
    T = traj.horizon
    if T < MIN_ESTIMATOR_T:
        raise InvalidParameterError(f"need at least {MIN_ESTIMATOR_T} steps, got {T}")
    ts = tail_indices(T)
    window = (int(ts[0]), int(ts[-1]))
    log_u = traj.log_residuals[ts - 1]
    underflow = bool(np.any(traj.residuals == 0.0))
    finite = np.isfinite(log_u)
    if not np.all(finite):
        return CommittalEstimate(Committal.EXPONENTIAL, float("inf"), float("nan"),
                                 float("nan"), window, float("nan"), True)
    t = ts.astype(float)
    s_poly, _, r2_poly = linear_fit(np.log(t), log_u)
    s_exp, _, r2_exp = linear_fit(t, log_u)
    if underflow:
        return CommittalEstimate(Committal.EXPONENTIAL, float("inf"), r2_poly, r2_exp,
                                 window, s_exp, True)
    half = traj.log_residuals[T // 2 - 1]
    if math.exp(traj.log_residuals[-1] - half) > STAGNATION_RATIO:
        return CommittalEstimate(Committal.ZERO, 0.0, r2_poly, r2_exp, window, s_exp)
    if r2_exp - r2_poly > R2_MARGIN and s_exp < -DECAY_FLOOR:
        return CommittalEstimate(Committal.EXPONENTIAL, float("inf"), r2_poly, r2_exp,
                                 window, s_exp)
    return CommittalEstimate(Committal.POLYNOMIAL, max(0.0, -s_poly), r2_poly, r2_exp,
                             window, s_exp)


ALL_SUBOPTIMAL = "all-suboptimal"


def forever_probability_lower_bound(rule, theta1, inst, arm):
    """Closed-form lower bound on the probability that on-policy sampling
    never leaves ``arm`` (or, for NPG, never touches the optimal arm)."""
    theta = as_logits(theta1, inst.num_arms)
    eta = rule.eta
    if rule.kind is RuleKind.NPG_STOCH and arm == ALL_SUBOPTIMAL:
        a_star = inst.optimal_arm
        mean_other = np.mean(np.delete(theta, a_star))
        rate = eta * inst.min_reward
        k = inst.num_arms
        expo = math.exp(theta[a_star] - mean_other) * math.exp(rate / (k - 1)) / rate
        return math.exp(-expo)
    if not (isinstance(arm, (int, np.integer)) and 0 <= arm < inst.num_arms):
        raise InvalidParameterError(f"arm {arm!r} out of range")
    ratio = float(np.exp(np.delete(theta, arm) - theta[arm]).sum())
    if rule.kind is RuleKind.NPG_STOCH:
        x = eta * inst.rewards[arm]
        return math.exp(-ratio * math.exp(x) / x)
    if rule.kind is RuleKind.GNPG_STOCH:
        return math.exp(-ratio * math.sqrt(2.0) * math.exp(eta / math.sqrt(2.0)) / eta)
    raise UnsupportedRuleError(f"no closed-form bound for {rule.kind.value}")


@dataclass
class OptimalitySmartReport:
    max_violation: float
    sequences: int
    exhaustive: bool
    pruned: int = 0
    worst_sequence: tuple = field(default_factory=tuple)

    def to_json(self):
        return {"max_violation": self.max_violation, "sequences": self.sequences,
                "exhaustive": self.exhaustive, "pruned": self.pruned,
                "worst_sequence": list(self.worst_sequence)}


SATURATION_MARGIN = 800.0


def _saturate(theta):
    """Replace overflowed logits by values whose softmax is already one-hot in float."""
    bad = ~np.isfinite(theta)
    if np.any(np.isnan(theta)):
        raise SimplexError("logit update produced NaN")
    fin = theta[~bad]
    out = theta.copy()
    out[bad & (theta > 0)] = (fin.max() if fin.size else 0.0) + SATURATION_MARGIN
    out[bad & (theta < 0)] = (fin.min() if fin.size else 0.0) - SATURATION_MARGIN
    return out - out.max()


def _pi_star_path(rule, theta1, inst, seq):
    """pi_t(a*) for t = 1..len(seq)+1 together with per-step dominance flags."""
    a_star = inst.optimal_arm
    theta = as_logits(theta1, inst.num_arms)
    if rule.kind is RuleKind.SAMBA:
        state = SambaState(softmax(theta))
        out = [state.probs[a_star]]
        dom = []
        for a in seq:
            dom.append(state.probs[a_star] >= state.probs.max())
            state = step(rule, state, inst, a)
            out.append(state.probs[a_star])
        return np.array(out), dom
    pi = softmax(theta)
    out = [pi[a_star]]
    dom = []
    for a in seq:
        dom.append(pi[a_star] >= pi.max())
        with np.errstate(over="ignore"):
            theta = step(rule, theta, inst, a)
        if not np.all(np.isfinite(theta)):
            theta = _saturate(theta)
        pi = softmax(theta)
        out.append(pi[a_star])
    return np.array(out), dom


def verify_optimality_smart(rule, theta1, inst, T, dominating_only=False,
                            n_samples=10_000, seed=0):
    """Largest excess of pi_t(a*) along any action sequence over the forced-a* path.

    With ``dominating_only`` a sequence is cut at the first suboptimal
    sample drawn while a* is not the most likely arm; later steps of that
    sequence are not compared.
    """
    k = inst.num_arms
    a_star = inst.optimal_arm
    reference, _ = _pi_star_path(rule, theta1, inst, (a_star,) * T)
    exhaustive = k ** T <= EXHAUSTIVE_LIMIT
    if exhaustive:
        seqs = itertools.product(range(k), repeat=T)
        n = k ** T
    else:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, T, k])))
        n = n_samples
        seqs = (tuple(int(x) for x in rng.integers(0, k, T)) for _ in range(n))
    worst, worst_seq, pruned = -np.inf, (), 0
    for seq in seqs:
        path, dom = _pi_star_path(rule, theta1, inst, seq)
        stop = T + 1
        if dominating_only:
            for i, (a, d) in enumerate(zip(seq, dom)):
                if a != a_star and not d:
                    stop = i + 1
                    pruned += 1
                    break
        v = float(np.max(path[:stop] - reference[:stop]))
        if v > worst:
            worst, worst_seq = v, seq
    return OptimalitySmartReport(max(worst, 0.0), n, exhaustive, pruned, tuple(worst_seq))
