"""Command-line front end: ``committal-lab <subcommand> [options]``.

Exit codes: 0 success, 1 property failure, 2 configuration error,
3 numerical abort.
"""
import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import committal as cm
from . import harness as hn
from . import mdp as mdp_mod
from .bandit import BanditInstance
from .errors import (ConfigError, LabError, NumericalAbort, SimplexError,
                     ZeroGradientError)
from .rules import UpdateRuleSpec
from .verify import SUITES, run_suite

CONFIG_VERSION = 1
OUT_ENV = "COMMITTAL_LAB_OUT"
EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p):
    p.add_argument("--config", type=Path, help="JSON config; flags override its values")
    p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV} or ./committal_out)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)


def _rule_flags(p):
    p.add_argument("--rule", help="rule kind, e.g. npg-stoch, pg-true, samba")
    p.add_argument("--rewards", type=_floats)
    p.add_argument("--eta", type=float)
    p.add_argument("--baseline", type=float, dest="baseline_b")
    p.add_argument("--eta-policy", choices=["fixed", "committal", "grad_norm"])
    p.add_argument("--theta1", type=_floats, help="initial logits (default all zero)")
    p.add_argument("--horizon", type=int)


def build_parser():
    top = _Parser(prog="committal-lab", description=__doc__.splitlines()[0])
    sub = top.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("run", help="on-policy trials of one rule on one bandit")
    _common(p)
    _rule_flags(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--trial-index", type=int)
    p.add_argument("--checkpoints", type=_ints)
    p.add_argument("--eps-commit", type=float)

    p = sub.add_parser("committal", help="forced-arm trajectory and committal-rate estimate")
    _common(p)
    _rule_flags(p)
    p.add_argument("--arm", type=int)

    p = sub.add_parser("verify", help="randomized property suite")
    _common(p)
    p.add_argument("--suites", help=f"comma list from {','.join(SUITES)}")
    p.add_argument("--n", type=int)
    p.add_argument("--n-mdp", type=int)
    p.add_argument("--perturb-hessian", action="store_true", help="negative control: wrong Hessian")

    p = sub.add_parser("ensemble", help="best-of-n ensemble sized from probe trials")
    _common(p)
    _rule_flags(p)
    p.add_argument("--delta", type=float)
    p.add_argument("--probes", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--p", type=float, help="use this success probability instead of probing")

    p = sub.add_parser("table1", help="outcome table for the three policy-gradient rules")
    _common(p)
    p.add_argument("--rewards", type=_floats)
    p.add_argument("--horizon-true", type=int)
    p.add_argument("--horizon-stoch", type=int)
    p.add_argument("--trials", type=int)

    p = sub.add_parser("mdp", help="one trajectory of an MDP rule")
    _common(p)
    p.add_argument("--rule")
    p.add_argument("--eta", help="step size, or 'adaptive' for exact NPG")
    p.add_argument("--horizon", type=int)
    p.add_argument("--random", type=_floats, metavar="S,A,GAMMA", help="random MDP instead of config")
    p.add_argument("--trial-index", type=int)
    return top


DEFAULTS = {"seed": hn.DEFAULT_SEED, "threads": 1, "horizon": 1000, "eta": 1.0, "trials": 1,
            "trial_index": 0, "eps_commit": hn.EPS_COMMIT, "delta": 0.1, "probes": 1000,
            "repetitions": 1, "n": 1000, "horizon_true": 10_000, "horizon_stoch": 1000}
COMMAND_DEFAULTS = {"table1": {"trials": 1000}}


def load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {cfg.get('version')!r}")
    flat = dict(cfg)
    rule = flat.pop("rule", None)
    if isinstance(rule, dict):
        flat.setdefault("rule", rule.get("kind"))
        for key in ("eta", "baseline_b", "eta_policy"):
            if key in rule:
                flat.setdefault(key, rule[key])
    elif rule is not None:
        flat["rule"] = rule
    inst = flat.pop("instance", None)
    if isinstance(inst, dict) and "rewards" in inst:
        flat.setdefault("rewards", inst["rewards"])
    return flat


def merged(args):
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS.get(args.command, {}))
    cfg.update(load_config(getattr(args, "config", None)))
    for key, val in vars(args).items():
        if val is not None and key not in ("config", "command"):
            cfg[key] = val
    return cfg


def out_dir(cfg):
    path = Path(cfg.get("out") or os.environ.get(OUT_ENV) or "committal_out")
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def _instance(cfg):
    if cfg.get("rewards") is None:
        raise ConfigError("missing rewards (use --rewards or an 'instance' entry in the config)")
    return BanditInstance(np.asarray(cfg["rewards"], dtype=float))


def _rule(cfg, default=None):
    kind = cfg.get("rule") or default
    if kind is None:
        raise ConfigError("missing rule (use --rule)")
    return UpdateRuleSpec(kind, cfg.get("eta", 1.0), cfg.get("baseline_b"), cfg.get("eta_policy") or "fixed")


def _trial_cfg(cfg, inst, rule):
    return hn.TrialConfig(inst, rule, int(cfg["horizon"]), int(cfg["seed"]), int(cfg["trial_index"]),
                          cfg.get("theta1"), float(cfg["eps_commit"]))


def cmd_run(cfg):
    inst = _instance(cfg)
    rule = _rule(cfg)
    tc = _trial_cfg(cfg, inst, rule)
    out = out_dir(cfg)
    summary = {"command": "run", "rule": rule.to_json(), "instance": inst.to_json(),
               "horizon": tc.horizon, "seed": tc.seed}
    n = int(cfg["trials"])
    if n <= 1:
        traj = hn.run_trial(tc)
        traj.to_csv(out / "trajectory.csv")
        summary.update(trial_index=tc.trial_index, outcome=traj.outcome.value,
                       committed_arm=traj.committed_arm,
                       final_suboptimality=float(traj.final_probs @ (inst.rewards[inst.optimal_arm] - inst.rewards)))
        if traj.suboptimality.size >= 4 and np.all(traj.suboptimality > 0):
            summary["rate_fit"] = hn.fit_rate(traj).to_json()
    else:
        cps = cfg.get("checkpoints") or sorted({int(x) for x in np.geomspace(1, tc.horizon, 8).round()})
        res = hn.run_batch(tc, n, tc.trial_index, checkpoints=cps, threads=int(cfg["threads"]))
        est, _ = hn.summarize_outcomes(res, inst, tc.eps_commit)
        hn.write_batch_csv(out / "trials.csv", res)
        summary.update(n_trials=n, first_index=tc.trial_index, failure=est.to_json(),
                       mean_suboptimality={str(int(t)): float(v) for t, v in zip(res.checkpoints, res.subopt.mean(0))})
    hn.dump_json(out / "summary.json", summary)
    return EXIT_OK


def cmd_committal(cfg):
    inst = _instance(cfg)
    rule = _rule(cfg)
    if cfg.get("arm") is None:
        raise ConfigError("missing --arm")
    theta1 = np.zeros(inst.num_arms) if cfg.get("theta1") is None else cfg["theta1"]
    traj = cm.fixed_action_trajectory(rule, theta1, inst, int(cfg["arm"]), int(cfg["horizon"]))
    est = cm.estimate_committal_rate(traj)
    out = out_dir(cfg)
    traj.to_csv(out / "committal.csv")
    hn.dump_json(out / "committal.json", {"command": "committal", "rule": rule.to_json(),
                                          "instance": inst.to_json(), "arm": int(cfg["arm"]),
                                          "horizon": int(cfg["horizon"]), "estimate": est.to_json(),
                                          "running_product": traj.running_product,
                                          "saturated_at": traj.saturated_at})
    print(f"{rule.kind.value} arm {cfg['arm']}: {est.classification.value}"
          + (f" alpha_hat={est.alpha_hat:.4f}" if est.classification is cm.Committal.POLYNOMIAL else ""))
    return EXIT_OK


def cmd_verify(cfg):
    raw = cfg.get("suites")
    suites = list(SUITES) if raw is None else [s.strip() for s in str(raw).split(",") if s.strip()]
    if not suites:
        raise ConfigError("empty suite selection")
    bad = [s for s in suites if s not in SUITES]
    if bad:
        raise ConfigError(f"unknown suites {bad}; choose from {list(SUITES)}")
    report = run_suite(int(cfg["seed"]), suites, int(cfg["n"]), bool(cfg.get("perturb_hessian")),
                       cfg.get("n_mdp"))
    out = out_dir(cfg)
    hn.dump_json(out / "verify.json", {"command": "verify", "seed": int(cfg["seed"]),
                                       "suites": suites, "ok": report.ok, "checks": report.to_json()})
    n_pass = sum(c.ok for c in report.checks.values())
    for name, c in sorted(report.checks.items()):
        print(f"{'PASS' if c.ok else 'FAIL'} {name} ({c.passed} passed, {c.failed} failed)")
    print(f"{n_pass}/{len(report.checks)} checks passed")
    return EXIT_OK if report.ok else EXIT_PROPERTY


def cmd_ensemble(cfg):
    inst = _instance(cfg)
    rule = _rule(cfg)
    tc = _trial_cfg(cfg, inst, rule)
    rep = hn.run_ensemble(tc, float(cfg["delta"]), int(cfg["probes"]), int(cfg["repetitions"]),
                          cfg.get("p"), int(cfg["threads"]))
    out = out_dir(cfg)
    hn.dump_json(out / "ensemble.json", dict(rep.to_json(), command="ensemble", rule=rule.to_json(),
                                             instance=inst.to_json(), horizon=tc.horizon, seed=tc.seed))
    print(f"n_runs={rep.n_runs} p_hat={rep.p_hat:.4f} failure_rate={rep.failure_rate:.4f}")
    return EXIT_OK


def cmd_table1(cfg):
    inst = _instance(cfg)
    report = hn.table1_report(inst, int(cfg["horizon_true"]), int(cfg["horizon_stoch"]),
                              int(cfg["trials"]),
                              int(cfg["seed"]), int(cfg["threads"]))
    out = out_dir(cfg)
    hn.dump_json(out / "table1.json", dict(report, command="table1"))
    for name in ("PG", "NPG", "GNPG"):
        s = report["stochastic"][name]
        print(f"{name:5s} true: {report['true'][name]['model']:10s} stochastic p_fail={s['p_fail']:.4f} "
              f"[{s['interval'][0]:.4f}, {s['interval'][1]:.4f}]")
    return EXIT_OK


def cmd_mdp(cfg):
    if cfg.get("random") is not None:
        S, A, g = cfg["random"]
        m = mdp_mod.random_mdp(np.random.default_rng(int(cfg["seed"])), int(S), int(A), float(g))
    elif isinstance(cfg.get("mdp"), dict):
        m = mdp_mod.FiniteMdp.from_json(cfg["mdp"])
    else:
        raise ConfigError("mdp needs an 'mdp' object in the config or --random S,A,GAMMA")
    kind = cfg.get("rule") or "NPG_TRUE"
    eta_raw = cfg.get("eta", 1.0)
    adaptive = str(eta_raw).lower() == "adaptive"
    spec = UpdateRuleSpec(kind, 1.0 if adaptive else float(eta_raw))
    if adaptive and spec.kind.value != "NPG_TRUE":
        raise ConfigError("adaptive step size is defined for exact NPG only")
    T = int(cfg["horizon"])
    opt = mdp_mod.policy_iteration(m)
    v_star = opt.values.value(m.rho)
    out = out_dir(cfg)
    if adaptive:
        pol = mdp_mod.MdpPolicy.uniform(m)
        rows = []
        for t in range(T):
            vb = mdp_mod.solve_values(m, pol)
            rows.append((t + 1, v_star - vb.value(m.rho)))
            _, gaps = mdp_mod.greedy_gaps(vb.Q)
            if np.any(gaps <= 0):
                break
            pol = mdp_mod.step_mdp("NPG_TRUE", m, pol, mdp_mod.adaptive_npg_learning_rate(m, pol, vb), values=vb)
        sub = np.array([r[1] for r in rows])
    else:
        tc = hn.TrialConfig(m, spec, T, int(cfg["seed"]), int(cfg["trial_index"]))
        traj = hn.run_trial(tc)
        sub = traj.suboptimality
    with open(out / "mdp_trajectory.csv", "w") as fh:
        fh.write("t,suboptimality\n")
        for t, v in enumerate(sub):
            fh.write(f"{t + 1},{v:.17g}\n")
    hn.dump_json(out / "mdp_summary.json", {"command": "mdp", "rule": spec.kind.value,
                                            "eta": "adaptive" if adaptive else spec.eta,
                                            "horizon": T, "v_star_rho": v_star,
                                            "final_suboptimality": float(sub[-1]),
                                            "optimal_actions": opt.actions.tolist(), "mdp": m.to_json()})
    return EXIT_OK


COMMANDS = {"run": cmd_run, "committal": cmd_committal, "verify": cmd_verify,
            "ensemble": cmd_ensemble, "table1": cmd_table1, "mdp": cmd_mdp}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](merged(args))
    except (NumericalAbort, SimplexError, ZeroGradientError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LabError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
