"""Randomized property suite over the bandit and MDP identities."""
from dataclasses import dataclass, field

import numpy as np

from . import bandit, mdp as mdp_mod
from .rules import RuleKind, UpdateRuleSpec, step, stochastic_moment_oracle

SUITES = ("gradient", "nl", "natural_nl", "ns", "smoothness", "moments", "mdp")


@dataclass
class Check:
    name: str
    passed: int = 0
    failed: int = 0
    worst: float = float("-inf")

    def record(self, ok, margin):
        """``margin`` is how far the value sits past its bound; positive means a violation."""
        if ok:
            self.passed += 1
        else:
            self.failed += 1
        self.worst = max(self.worst, float(margin))

    @property
    def ok(self):
        return self.failed == 0 and self.passed > 0


@dataclass
class SuiteReport:
    checks: dict = field(default_factory=dict)

    def check(self, name):
        return self.checks.setdefault(name, Check(name))

    @property
    def ok(self):
        return all(c.ok for c in self.checks.values())

    def to_json(self):
        return {n: {"passed": c.passed, "failed": c.failed, "worst_margin": c.worst}
                for n, c in sorted(self.checks.items())}


def perturbed_hessian(theta, inst):
    """Deliberately wrong Hessian used as a negative control."""
    pi = bandit.softmax(theta)
    return bandit.value_hessian(theta, inst) + np.diag(pi * (1 - pi))


def random_bandit(rng, k_min=2, k_max=8):
    k = int(rng.integers(k_min, k_max + 1))
    while True:
        r = rng.uniform(0.01, 1.0, k)
        if np.count_nonzero(r == r.max()) == 1:
            return bandit.BanditInstance(r)


def random_logits(rng, k, scale=None):
    scale = rng.choice([0.5, 2.0, 5.0]) if scale is None else scale
    return rng.normal(0.0, scale, k)


def fd_gradient(f, x, h):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def check_gradient(rng, n, report, tol=1e-6):
    c = report.check("bandit_gradient_fd")
    for _ in range(n):
        inst = random_bandit(rng)
        th = random_logits(rng, inst.num_arms, scale=1.0)
        g = bandit.true_gradient(th, inst).gradient
        fd = fd_gradient(lambda x: bandit.expected_reward(bandit.softmax(x), inst), th, 1e-5)
        e = rel_err(g, fd)
        c.record(e < tol, e - tol)
    return report


def check_mdp_gradient(rng, n, report, tol=1e-5):
    c = report.check("mdp_gradient_fd")
    for _ in range(n):
        m = mdp_mod.random_mdp(rng, int(rng.integers(1, 5)), int(rng.integers(2, 5)),
                               float(rng.choice([0.5, 0.9])))
        th = rng.normal(0.0, 1.0, (m.num_states, m.num_actions))
        g = mdp_mod.mdp_true_gradient(m, mdp_mod.MdpPolicy(th))
        fd = fd_gradient(lambda x: mdp_mod.value_of(m, x), th, 1e-5)
        e = rel_err(g, fd)
        c.record(e < tol, e - tol)
    return report


def check_nl(rng, n, report):
    c = report.check("nl")
    for _ in range(n):
        inst = random_bandit(rng)
        s = bandit.nl_inequality_slack(random_logits(rng, inst.num_arms), inst)
        c.record(s >= -1e-12, -s - 1e-12)
    return report


def check_natural_nl(rng, n, report):
    cont = report.check("natural_nl_continuous")
    disc = report.check("natural_nl_discrete")
    tight = report.check("natural_nl_two_arm_tightness")
    for _ in range(n):
        inst = random_bandit(rng)
        th = random_logits(rng, inst.num_arms)
        cs, ds = bandit.natural_nl_slack(th, inst)
        d = ds(rng.uniform(1e-3, 10.0))
        cont.record(cs >= -1e-12, -cs - 1e-12)
        disc.record(d >= -1e-12, -d - 1e-12)
        two = random_bandit(rng, 2, 2)
        cs2, ds2 = bandit.natural_nl_slack(random_logits(rng, 2), two)
        worst = max(abs(cs2), abs(ds2(rng.uniform(1e-3, 10.0))))
        tight.record(worst < 1e-12, worst - 1e-12)
    return report


def check_ns(rng, n, report, hessian=bandit.value_hessian):
    ns = report.check("ns_spectral_bound")
    fd = report.check("hessian_fd")
    sym = report.check("hessian_symmetric_zero_rowsum")
    for i in range(n):
        inst = random_bandit(rng)
        th = random_logits(rng, inst.num_arms)
        S = hessian(th, inst)
        g = bandit.true_gradient(th, inst).l2_norm
        rad = bandit.spectral_radius(S)
        ns.record(rad <= 3 * g + 1e-10, rad - 3 * g - 1e-10)
        asym = max(np.max(np.abs(S - S.T)), np.max(np.abs(S.sum(axis=1))))
        sym.record(asym <= 1e-10, asym - 1e-10)
        if i % 10 == 0:
            jac = _jacobian(inst, th)
            scale = max(np.max(np.abs(jac)), 1e-6)
            e = float(np.max(np.abs(S - jac)) / scale)
            fd.record(e < 1e-4, e - 1e-4)
    return report


def _jacobian(inst, th, h=1e-4):
    k = th.size
    J = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = h
        J[:, j] = (bandit.true_gradient(th + e, inst).gradient
                   - bandit.true_gradient(th - e, inst).gradient) / (2 * h)
    return J


def check_smoothness(rng, n, report):
    c = report.check("smoothness")
    for _ in range(n):
        inst = random_bandit(rng)
        th = random_logits(rng, inst.num_arms)
        dth = rng.normal(0.0, rng.choice([0.01, 0.3, 2.0]), inst.num_arms)
        v0 = bandit.expected_reward(bandit.softmax(th), inst)
        v1 = bandit.expected_reward(bandit.softmax(th + dth), inst)
        lhs = abs(v1 - v0 - bandit.true_gradient(th, inst).gradient @ dth)
        bound = 1.25 * float(dth @ dth)
        c.record(lhs <= bound + 1e-15, lhs - bound)
    return report


def check_moments(rng, n, report):
    pg_mean = report.check("pg_stoch_unbiased")
    pg_second = report.check("pg_stoch_second_moment_le_2")
    npg_mean = report.check("npg_stoch_unbiased")
    npg_second = report.check("npg_stoch_second_moment")
    expect = report.check("stochastic_expectation_identity")
    for _ in range(n):
        inst = random_bandit(rng)
        th = random_logits(rng, inst.num_arms)
        pi = bandit.softmax(th)
        grad = bandit.true_gradient(th, inst).gradient
        m, s2 = stochastic_moment_oracle(UpdateRuleSpec("PG_STOCH", 1.0), th, inst)
        e = float(np.max(np.abs(m - grad)))
        pg_mean.record(e <= 1e-12, e - 1e-12)
        pg_second.record(s2 <= 2.0, s2 - 2.0)
        m, s2 = stochastic_moment_oracle(UpdateRuleSpec("NPG_STOCH", 1.0), th, inst)
        e = float(np.max(np.abs(m - inst.rewards)))
        npg_mean.record(e <= 1e-12, e - 1e-12)
        target = float(np.sum(inst.rewards ** 2 / pi))
        e = abs(s2 - target) / max(1.0, target)
        npg_second.record(e <= 1e-10, e - 1e-10)
        eta = rng.uniform(0.1, 2.0)
        for kind in (RuleKind.PG_STOCH, RuleKind.NPG_STOCH, RuleKind.GNPG_STOCH):
            spec = UpdateRuleSpec(kind, eta)
            avg = sum(pi[a] * step(spec, th, inst, a) for a in range(inst.num_arms)) - th
            m, _ = stochastic_moment_oracle(spec, th, inst)
            e = float(np.max(np.abs(avg - eta * m))) / max(1.0, float(np.max(np.abs(th))))
            expect.record(e <= 1e-10, e - 1e-10)
    return report


def check_mdp(rng, n, report):
    names = ["bellman_residual", "d_normalized", "d_lower_bound", "value_range",
             "performance_difference", "value_suboptimality", "general_nl",
             "parallel_is_unbiased", "parallel_is_second_moment", "pg_mdp_second_moment",
             "npg_monotone", "natural_nl_general", "adaptive_npg_contraction"]
    c = {k: report.check("mdp_" + k) for k in names}
    for i in range(n):
        S, A = int(rng.integers(1, 7)), int(rng.integers(2, 7))
        g = (0.5, 0.9, 0.99)[i % 3]
        m = mdp_mod.random_mdp(rng, S, A, g)
        pol = mdp_mod.MdpPolicy(rng.normal(0.0, 1.5, (S, A)))
        vb = mdp_mod.solve_values(m, pol)
        vmax = 1.0 / (1.0 - g)
        br = mdp_mod.bellman_residual(m, vb)
        c["bellman_residual"].record(br < 1e-10, br - 1e-10)
        e = max(abs(vb.d_mu.sum() - 1), abs(vb.d_rho.sum() - 1))
        c["d_normalized"].record(e < 1e-10, e - 1e-10)
        e = float(np.max((1 - g) * m.mu - vb.d_mu))
        c["d_lower_bound"].record(e <= 1e-12, e - 1e-12)
        lo = min(vb.V.min(), vb.Q.min())
        hi = max(vb.V.max(), vb.Q.max())
        c["value_range"].record(lo > 0 and hi <= vmax * (1 + 1e-12), max(-lo, hi - vmax))
        other = mdp_mod.MdpPolicy(rng.normal(0.0, 1.5, (S, A)))
        e = mdp_mod.performance_difference_residual(m, other, pol)
        c["performance_difference"].record(e < 1e-10, e - 1e-10)
        opt = mdp_mod.policy_iteration(m)
        e = mdp_mod.value_suboptimality_residual(m, pol, opt)
        c["value_suboptimality"].record(e < 1e-10, e - 1e-10)
        if opt.unique:
            s = mdp_mod.general_nl_slack(m, pol, opt)
            c["general_nl"].record(s >= -1e-10, -s - 1e-10)
        mean, s2 = mdp_mod.parallel_is_moments(m, vb, "NPG_STOCH")
        e = float(np.max(np.abs(mean - vb.Q)))
        c["parallel_is_unbiased"].record(e < 1e-10, e - 1e-10)
        target = float(np.sum(vb.Q ** 2 / vb.pi))
        e = abs(s2 - target) / max(1.0, target)
        c["parallel_is_second_moment"].record(e < 1e-8, e - 1e-8)
        gmean, g2 = mdp_mod.parallel_is_moments(m, vb, "PG_STOCH")
        bound = 2.0 / (1 - g) ** 4
        e = float(np.max(np.abs(gmean - mdp_mod.mdp_true_gradient(m, pol, vb))))
        c["pg_mdp_second_moment"].record(g2 <= bound and e < 1e-10 * vmax, max(g2 - bound, e))
        nxt = mdp_mod.solve_values(m, mdp_mod.step_mdp("NPG_TRUE", m, pol, 1.0, values=vb))
        gain = nxt.value(m.rho) - vb.value(m.rho)
        c["npg_monotone"].record(gain >= -1e-10, -gain)
        _, gaps = mdp_mod.greedy_gaps(vb.Q)
        if opt.unique and np.all(gaps > 1e-9):
            s = mdp_mod.natural_nl_general_slack(m, pol, 1.0, opt)
            c["natural_nl_general"].record(s >= -1e-10, -s - 1e-10)
            eta = mdp_mod.adaptive_npg_learning_rate(m, pol, vb)
            s = mdp_mod.natural_nl_general_slack(m, pol, eta, opt, factor=0.5)
            c["adaptive_npg_contraction"].record(s >= -1e-10, -s - 1e-10)
    return report


def run_suite(seed=0, suites=SUITES, n=1000, perturb_hessian=False, n_mdp=None):
    """Run the selected property checks; each suite gets its own seeded stream."""
    suites = list(suites)
    unknown = [s for s in suites if s not in SUITES]
    if not suites or unknown:
        raise ValueError(f"unknown or empty suite selection: {unknown or suites}")
    report = SuiteReport()
    for i, name in enumerate(SUITES):
        if name not in suites:
            continue
        rng = np.random.default_rng([seed, i])
        if name == "gradient":
            check_gradient(rng, n, report)
            check_mdp_gradient(rng, n if n_mdp is None else n_mdp, report)
        elif name == "nl":
            check_nl(rng, n, report)
        elif name == "natural_nl":
            check_natural_nl(rng, n, report)
        elif name == "ns":
            hess = perturbed_hessian if perturb_hessian else bandit.value_hessian
            check_ns(rng, n, report, hess)
        elif name == "smoothness":
            check_smoothness(rng, n, report)
        elif name == "moments":
            check_moments(rng, n, report)
        elif name == "mdp":
            check_mdp(rng, n if n_mdp is None else n_mdp, report)
    return report
