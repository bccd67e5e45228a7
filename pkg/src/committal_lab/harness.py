"""Seeded Monte Carlo trials, failure probabilities, rate fits and ensembles."""
import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.stats import binomtest

from .bandit import BanditInstance, as_logits, gradient_direction
from .committal import linear_fit, tail_indices
from .errors import InvalidParameterError, NumericalAbort, SimplexError
from .mdp import FiniteMdp, MdpPolicy, policy_iteration, solve_values, step_mdp
from .rules import BASELINE_KINDS, EtaPolicy, RuleKind, UpdateRuleSpec

DEFAULT_SEED = 20210701
EPS_COMMIT = 1e-6
CHUNK = 4096


def trial_stream(seed, trial_index):
    """Counter-based generator owned by one trial; draws are consumed in step order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(trial_index)])))


class Outcome(str, Enum):
    CONVERGED_OPT = "CONVERGED_OPT"
    CONVERGED_SUBOPT = "CONVERGED_SUBOPT"
    UNDECIDED = "UNDECIDED"


@dataclass(frozen=True)
class TrialConfig:
    instance: object
    rule: UpdateRuleSpec
    horizon: int
    seed: int = DEFAULT_SEED
    trial_index: int = 0
    theta1: object = None
    eps_commit: float = EPS_COMMIT

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise InvalidParameterError("horizon must be at least 1")
        if not 0 <= int(self.seed) < 2 ** 64 or int(self.trial_index) < 0:
            raise InvalidParameterError("seed must be a 64-bit unsigned integer and trial_index >= 0")
        if not 0 < self.eps_commit < 1:
            raise InvalidParameterError("eps_commit must lie in (0, 1)")
        if isinstance(self.instance, BanditInstance):
            self.rule.validate_for(self.instance)

    def with_index(self, trial_index):
        return TrialConfig(self.instance, self.rule, self.horizon, self.seed, trial_index,
                           self.theta1, self.eps_commit)

    def initial_logits(self):
        if isinstance(self.instance, FiniteMdp):
            shape = (self.instance.num_states, self.instance.num_actions)
            th = np.zeros(shape) if self.theta1 is None else np.asarray(self.theta1, dtype=float)
            if th.shape != shape:
                raise InvalidParameterError(f"initial logits must have shape {shape}")
            return MdpPolicy(th).logits
        k = self.instance.num_arms
        return np.zeros(k) if self.theta1 is None else as_logits(self.theta1, k)


@dataclass
class BatchResult:
    """Per-trial records at the requested checkpoints (1-based iteration numbers).

    Column j of ``subopt`` is the sub-optimality of the policy in force at
    iteration ``checkpoints[j]``, before that iteration's update.
    """
    indices: np.ndarray
    checkpoints: np.ndarray
    subopt: np.ndarray
    pi_opt: np.ndarray
    final_probs: np.ndarray
    prev_probs: np.ndarray
    final_subopt: np.ndarray
    actions: np.ndarray = None


def _classify(probs, a_star, eps):
    """Outcome and committed arm for each row of a probability table."""
    arm = np.argmax(probs, axis=1)
    rows = np.arange(probs.shape[0])
    masked = probs.copy()
    masked[rows, arm] = 0.0
    committed = masked.sum(axis=1) < eps
    out = []
    for i in range(probs.shape[0]):
        if not committed[i]:
            out.append((Outcome.UNDECIDED, None))
        elif arm[i] == a_star:
            out.append((Outcome.CONVERGED_OPT, int(arm[i])))
        else:
            out.append((Outcome.CONVERGED_SUBOPT, int(arm[i])))
    return out


def _softmax_rows(theta):
    e = np.exp(theta - theta.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _sample(pi, u):
    # inverse CDF; the last arm absorbs any rounding shortfall of the cumulative sum
    cdf = np.cumsum(pi, axis=1)
    return np.sum(cdf[:, :-1] <= u[:, None], axis=1)


def _others_softmax_rows(theta, rows, a):
    t = theta.copy()
    t[rows, a] = -np.inf
    q = np.exp(t - t.max(axis=1, keepdims=True))
    return q / q.sum(axis=1, keepdims=True)


def _logit_update(rule, theta, pi, inst, a, rows):
    r = inst.rewards
    kind = rule.kind
    if kind is RuleKind.STAYING:
        return theta
    if kind is RuleKind.NPG_TRUE:
        return theta + rule.eta * r[None, :]
    if kind is RuleKind.GNPG_TRUE:
        return theta + rule.eta * gradient_direction(theta, r)
    if kind is RuleKind.PG_TRUE:
        return theta + rule.eta * pi * (r[None, :] - (pi @ r)[:, None])
    ra = r[a]
    if kind is RuleKind.PG_STOCH:
        masked = pi.copy()
        masked[rows, a] = 0.0
        u = masked.sum(axis=1)
        d = -ra[:, None] * pi
        d[rows, a] = ra * u
        if rule.eta_policy is EtaPolicy.COMMITTAL:
            eta = (pi[rows, a] / (5.0 * ra))[:, None]
        elif rule.eta_policy is EtaPolicy.GRAD_NORM:
            g = pi * (r[None, :] - (pi @ r)[:, None])
            eta = np.linalg.norm(g, axis=1, keepdims=True) / 12.0
        else:
            eta = rule.eta
        return theta + eta * d
    if kind is RuleKind.GNPG_STOCH:
        v = -_others_softmax_rows(theta, rows, a)
        v[rows, a] = 1.0
        return theta + rule.eta * v / np.linalg.norm(v, axis=1, keepdims=True)
    inv_pa = np.exp(theta - theta[rows, a][:, None]).sum(axis=1)
    out = theta.copy()
    if kind is RuleKind.NPG_STOCH:
        out[rows, a] += rule.eta * ra * inv_pa
    elif kind in BASELINE_KINDS:
        out[rows, a] += rule.eta * (ra - rule.baseline_b) * inv_pa
    else:
        raise InvalidParameterError(f"{kind.value} is not a bandit logit rule")
    return out


def _samba_update(rule, p, inst, a, rows):
    g = np.argmax(p, axis=1)
    ra = inst.rewards[a]
    pa = p[rows, a]
    on_greedy = a == g
    out = p.copy()
    shrink = (rule.eta * ra / pa)[:, None] * p * p
    out = np.where(on_greedy[:, None], p - shrink, out)
    grow = np.where(on_greedy, 0.0, rule.eta * pa * ra)
    out[rows, a] += grow
    out[rows, g] = 0.0
    out[rows, g] = 1.0 - out.sum(axis=1)
    if np.any(out <= 0.0) or np.any(out >= 1.0):
        raise SimplexError("SAMBA step left the open simplex")
    return out


def simulate_bandit(inst, rule, theta1, seed, indices, horizon, checkpoints=None,
                    keep_actions=False):
    """Run a batch of independent on-policy trials in lock step.

    Each row owns the stream keyed by (seed, its trial index), so a trial's
    trajectory does not depend on which other trials share the batch.
    """
    rule.validate_for(inst)
    indices = np.asarray(indices, dtype=np.int64)
    n, k, T = indices.size, inst.num_arms, int(horizon)
    cps = np.arange(1, T + 1) if checkpoints is None else np.asarray(sorted(set(int(c) for c in checkpoints)))
    if cps.size and (cps[0] < 1 or cps[-1] > T):
        raise InvalidParameterError("checkpoints must lie in [1, horizon]")
    cp_pos = np.full(T + 2, -1)
    cp_pos[cps] = np.arange(cps.size)
    theta0 = as_logits(np.zeros(k) if theta1 is None else theta1, k)
    samba = rule.kind is RuleKind.SAMBA
    state = np.tile(_softmax_rows(theta0[None, :]) if samba else theta0, (n, 1))
    gaps = inst.rewards[inst.optimal_arm] - inst.rewards
    a_star = inst.optimal_arm
    streams = [trial_stream(seed, i) for i in indices]
    sub = np.empty((n, cps.size))
    pstar = np.empty((n, cps.size))
    rows = np.arange(n)
    needs_sample = rule.kind not in (RuleKind.PG_TRUE, RuleKind.NPG_TRUE, RuleKind.GNPG_TRUE)
    keep_actions = keep_actions and needs_sample
    acts = np.empty((n, T), dtype=np.int16) if keep_actions else None
    prev = None
    pi = None
    for start in range(0, T, CHUNK):
        stop = min(T, start + CHUNK)
        if needs_sample:
            uni = np.stack([s.random(stop - start) for s in streams]) if n else np.empty((0, stop - start))
        for t in range(start, stop):
            pi = state if samba else _softmax_rows(state)
            j = cp_pos[t + 1]
            if j >= 0:
                sub[:, j] = pi @ gaps
                pstar[:, j] = pi[:, a_star]
            if needs_sample:
                a = _sample(pi, uni[:, t - start])
                if keep_actions:
                    acts[:, t] = a
            else:
                a = None
            prev = pi
            if samba:
                state = _samba_update(rule, state, inst, a, rows)
            else:
                with np.errstate(over="ignore", invalid="ignore"):
                    state = _logit_update(rule, state, pi, inst, a, rows)
                if not np.all(np.isfinite(state)):
                    bad = int(indices[np.flatnonzero(~np.all(np.isfinite(state), axis=1))[0]])
                    raise NumericalAbort(f"non-finite logits in trial {bad} at iteration {t + 1}", t + 1)
    final = state if samba else _softmax_rows(state)
    return BatchResult(indices, cps, sub, pstar, final, prev, final @ gaps, acts)


def _chunks(n_trials, first_index, threads):
    per = max(1, min(1000, math.ceil(n_trials / max(1, threads))))
    return [np.arange(first_index + s, first_index + min(n_trials, s + per))
            for s in range(0, n_trials, per)]


def _merge(parts):
    if len(parts) == 1:
        return parts[0]
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    acts = None if parts[0].actions is None else cat("actions")
    return BatchResult(cat("indices"), parts[0].checkpoints, cat("subopt"), cat("pi_opt"),
                       cat("final_probs"), cat("prev_probs"), cat("final_subopt"), acts)


def run_batch(cfg, n_trials, first_index=0, checkpoints=None, threads=1):
    """Trials ``first_index .. first_index + n_trials - 1`` of a bandit template.

    Work is split into contiguous index blocks; results are concatenated in
    index order whatever the completion order.
    """
    if not isinstance(cfg.instance, BanditInstance):
        raise InvalidParameterError("run_batch handles bandit instances; use run_trial for MDPs")
    blocks = _chunks(n_trials, first_index, threads)
    job = lambda idx: simulate_bandit(cfg.instance, cfg.rule, cfg.theta1, cfg.seed, idx,  # noqa: E731
                                      cfg.horizon, checkpoints)
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, blocks))
    else:
        parts = [job(b) for b in blocks]
    return _merge(parts)


@dataclass
class Trajectory:
    suboptimality: np.ndarray
    pi_opt: np.ndarray
    actions: np.ndarray
    outcome: Outcome
    committed_arm: object
    final_probs: np.ndarray
    prev_probs: np.ndarray = None

    @property
    def classification(self):
        if self.outcome is Outcome.CONVERGED_SUBOPT:
            return (self.outcome, self.committed_arm)
        return self.outcome

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "action", "suboptimality", "pi_opt"])
            for t in range(self.suboptimality.size):
                act = "" if self.actions is None else str(self.actions[t]).replace(" ", "")
                w.writerow([t + 1, act, f"{self.suboptimality[t]:.17g}", f"{self.pi_opt[t]:.17g}"])


def run_trial(cfg):
    """One on-policy trajectory with every iteration recorded."""
    if isinstance(cfg.instance, FiniteMdp):
        return _run_mdp_trial(cfg)
    res = simulate_bandit(cfg.instance, cfg.rule, cfg.theta1, cfg.seed, [cfg.trial_index],
                          cfg.horizon, keep_actions=True)
    (outcome, arm), = _classify(res.final_probs, cfg.instance.optimal_arm, cfg.eps_commit)
    return Trajectory(res.subopt[0], res.pi_opt[0],
                      None if res.actions is None else res.actions[0].astype(int), outcome, arm,
                      res.final_probs[0], res.prev_probs[0])


def _run_mdp_trial(cfg):
    mdp = cfg.instance
    kind = cfg.rule.kind
    opt = policy_iteration(mdp)
    v_star = opt.values.value(mdp.rho)
    pol = MdpPolicy(cfg.initial_logits())
    S, T = mdp.num_states, cfg.horizon
    rows = np.arange(S)
    stream = trial_stream(cfg.seed, cfg.trial_index)
    sub, pstar = np.empty(T), np.empty(T)
    acts = np.empty((T, S), dtype=int)
    stochastic = kind in (RuleKind.PG_STOCH, RuleKind.NPG_STOCH, RuleKind.GNPG_STOCH)
    prev = None
    for start in range(0, T, CHUNK):
        stop = min(T, start + CHUNK)
        uni = stream.random((stop - start, S))
        for t in range(start, stop):
            vb = solve_values(mdp, pol)
            sub[t] = v_star - vb.value(mdp.rho)
            pstar[t] = np.min(vb.pi[rows, opt.actions])
            a = _sample(vb.pi, uni[t - start])
            acts[t] = a
            prev = vb.pi
            pol = step_mdp(kind, mdp, pol, cfg.rule.eta, a if stochastic else None, vb)
            if not np.all(np.isfinite(pol.logits)):
                raise NumericalAbort(f"non-finite logits at iteration {t + 1}", t + 1)
    final = pol.probs
    states = _classify(final, -1, cfg.eps_commit)
    if all(o is not Outcome.UNDECIDED for o, _ in states):
        arms = tuple(int(x) for _, x in states)
        outcome = Outcome.CONVERGED_OPT if arms == tuple(int(x) for x in opt.actions) else Outcome.CONVERGED_SUBOPT
    else:
        arms, outcome = None, Outcome.UNDECIDED
    return Trajectory(sub, pstar, acts, outcome, arms, final, prev)


def wilson_interval(successes, n, confidence=0.95):
    ci = binomtest(int(successes), int(n)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass
class FailureEstimate:
    p_fail: float
    interval: tuple
    n_trials: int
    counts: dict
    arm_counts: dict = field(default_factory=dict)

    def commit_interval(self, arm):
        return wilson_interval(self.arm_counts.get(arm, 0), self.n_trials)

    def to_json(self):
        return {"p_fail": self.p_fail, "interval": list(self.interval), "n_trials": self.n_trials,
                "counts": dict(self.counts), "arm_counts": {str(k): v for k, v in self.arm_counts.items()}}


def summarize_outcomes(result, inst, eps=EPS_COMMIT):
    labels = _classify(result.final_probs, inst.optimal_arm, eps)
    counts = {o.value: 0 for o in Outcome}
    arms = {}
    for o, arm in labels:
        counts[o.value] += 1
        if arm is not None:
            arms[arm] = arms.get(arm, 0) + 1
    n = len(labels)
    fails = counts[Outcome.CONVERGED_SUBOPT.value]
    return FailureEstimate(fails / n, wilson_interval(fails, n), n, counts, arms), labels


def estimate_failure_probability(cfg, n_trials, threads=1, checkpoints=None):
    """Fraction of trials that end committed to a sub-optimal arm, with a Wilson interval."""
    if n_trials < 100:
        raise InvalidParameterError("need at least 100 trials")
    res = run_batch(cfg, n_trials, cfg.trial_index, checkpoints=checkpoints or [cfg.horizon],
                    threads=threads)
    est, _ = summarize_outcomes(res, cfg.instance, cfg.eps_commit)
    return est, res


class RateModel(str, Enum):
    INV_T = "INV_T"
    INV_SQRT_T = "INV_SQRT_T"
    EXP = "EXP"


@dataclass(frozen=True)
class RateFit:
    model: RateModel
    constant: float
    window: tuple
    r2: dict
    constants: dict

    def to_json(self):
        return {"model": self.model.value, "constant": self.constant, "window": list(self.window),
                "r2": {k.value: v for k, v in self.r2.items()},
                "constants": {k.value: v for k, v in self.constants.items()}}


def _fixed_slope_fit(x, y, slope):
    c = float(np.mean(y - slope * x))
    resid = y - (slope * x + c)
    ss = float(np.sum((y - y.mean()) ** 2))
    return c, (1.0 - float(resid @ resid) / ss) if ss > 0 else 1.0


def fit_rate(traj):
    """Best of C/t, C/sqrt(t) and exp(-c t) for a sub-optimality sequence.

    Accepts a ``Trajectory`` or a plain array indexed by t = 1..T. The
    power-law models keep their exponent fixed and fit only the constant;
    the exponential model fits a free line in (t, log delta).
    """
    delta = np.asarray(getattr(traj, "suboptimality", traj), dtype=float)
    T = delta.size
    if T < 4:
        raise InvalidParameterError("need at least 4 points to fit a rate")
    ts = tail_indices(T)
    window = (int(ts[0]), int(ts[-1]))
    d = delta[ts - 1]
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise InvalidParameterError("sub-optimality must be finite and non-negative")
    if np.any(d == 0.0):
        # subnormal values carry too few significant bits for a log fit
        pos = np.flatnonzero(delta >= np.finfo(float).tiny)
        if pos.size < 2:
            raise InvalidParameterError("sub-optimality underflowed before two positive points")
        tt = (pos + 1).astype(float)[-min(pos.size, 64):]
        slope, _, r2 = linear_fit(tt, np.log(delta[tt.astype(int) - 1]))
        c = max(-slope, 0.0)
        return RateFit(RateModel.EXP, c, (int(tt[0]), int(tt[-1])), {RateModel.EXP: r2},
                       {RateModel.EXP: c})
    t = ts.astype(float)
    y = np.log(d)
    lt = np.log(t)
    log_c1, r2_1 = _fixed_slope_fit(lt, y, -1.0)
    log_c2, r2_2 = _fixed_slope_fit(lt, y, -0.5)
    slope, _, r2_e = linear_fit(t, y)
    consts = {RateModel.INV_T: math.exp(log_c1), RateModel.INV_SQRT_T: math.exp(log_c2),
              RateModel.EXP: -slope}
    r2 = {RateModel.INV_T: r2_1, RateModel.INV_SQRT_T: r2_2, RateModel.EXP: r2_e}
    candidates = [m for m in RateModel if m is not RateModel.EXP or slope < 0]
    best = max(candidates, key=lambda m: r2[m])
    return RateFit(best, consts[best], window, r2, consts)


def ensemble_size(p, delta):
    if not 0 < delta < 1:
        raise InvalidParameterError("delta must lie in (0, 1)")
    if p <= 0:
        raise InvalidParameterError(
            "estimated success probability is zero; run more probe trials or pass p explicitly")
    if p >= 1:
        return 1
    return max(1, math.ceil(math.log(1 / delta) / math.log(1 / (1 - p))))


@dataclass
class EnsembleReport:
    p_hat: float
    delta: float
    n_runs: int
    best_final_subopt: np.ndarray
    success_rate: float
    repetitions: int
    probe_trials: int

    @property
    def failure_rate(self):
        return 1.0 - self.success_rate

    def to_json(self):
        return {"p_hat": self.p_hat, "delta": self.delta, "n_runs": self.n_runs,
                "success_rate": self.success_rate, "failure_rate": self.failure_rate,
                "repetitions": self.repetitions, "probe_trials": self.probe_trials}


def run_ensemble(cfg, delta, n_probe, repetitions=1, p=None, threads=1):
    """Size an ensemble from probe trials, then run it ``repetitions`` times.

    Probes use trial indices [0, n_probe); repetition j uses the next
    ``n_runs`` indices after the previous repetition. A repetition succeeds
    when the run with the lowest final sub-optimality converged to a*.
    """
    first = cfg.trial_index
    if p is None:
        probe = run_batch(cfg, n_probe, first, checkpoints=[cfg.horizon], threads=threads)
        labels = _classify(probe.final_probs, cfg.instance.optimal_arm, cfg.eps_commit)
        p = sum(o is Outcome.CONVERGED_OPT for o, _ in labels) / n_probe
        used = n_probe
    else:
        used = 0
    n_runs = ensemble_size(p, delta)
    res = run_batch(cfg, n_runs * repetitions, first + used, checkpoints=[cfg.horizon],
                    threads=threads)
    labels = _classify(res.final_probs, cfg.instance.optimal_arm, cfg.eps_commit)
    ok = np.array([o is Outcome.CONVERGED_OPT for o, _ in labels]).reshape(repetitions, n_runs)
    sub = res.final_subopt.reshape(repetitions, n_runs)
    best = np.argmin(sub, axis=1)
    wins = ok[np.arange(repetitions), best]
    return EnsembleReport(float(p), delta, n_runs, sub[np.arange(repetitions), best],
                          float(wins.mean()), repetitions, used)


def table1_report(inst, T_true=10_000, T_stoch=1000, n_trials=1000, seed=DEFAULT_SEED,
                  threads=1, etas=None):
    """Outcome table for each policy-gradient rule with exact and sampled gradients."""
    etas = dict({"PG": 0.4, "NPG": 1.0, "GNPG": 1.0 / 6.0}, **(etas or {}))
    true_row, stoch_row = {}, {}
    for name in ("PG", "NPG", "GNPG"):
        rule = UpdateRuleSpec(name + "_TRUE", etas[name])
        traj = run_trial(TrialConfig(inst, rule, T_true, seed))
        true_row[name] = fit_rate(traj).to_json()
        srule = UpdateRuleSpec(name + "_STOCH", 1.0)
        est, _ = estimate_failure_probability(TrialConfig(inst, srule, T_stoch, seed), n_trials, threads)
        stoch_row[name] = est.to_json()
    return {"instance": inst.to_json(), "true": true_row, "stochastic": stoch_row,
            "T_true": T_true, "T_stoch": T_stoch, "n_trials": n_trials, "seed": seed}


def write_batch_csv(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial_index", "t", "suboptimality", "pi_opt"])
        for i, idx in enumerate(result.indices):
            for j, t in enumerate(result.checkpoints):
                w.writerow([int(idx), int(t), f"{result.subopt[i, j]:.17g}", f"{result.pi_opt[i, j]:.17g}"])


def _finite_or_null(obj):
    if isinstance(obj, dict):
        return {str(k.value if isinstance(k, Enum) else k): _finite_or_null(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_null(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _finite_or_null(obj.tolist())
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def dump_json(path, obj):
    """Strict JSON: sorted keys, non-finite floats written as null."""
    with open(path, "w") as fh:
        json.dump(_finite_or_null(obj), fh, indent=2, sort_keys=True, default=_json_default,
                  allow_nan=False)
        fh.write("\n")


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Enum):
        return x.value
    raise TypeError(f"not JSON serializable: {type(x).__name__}")
