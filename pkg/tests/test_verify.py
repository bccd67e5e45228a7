import numpy as np
import pytest

from committal_lab.bandit import BanditInstance, value_hessian
from committal_lab.verify import SUITES, Check, perturbed_hessian, run_suite


def test_default_suite_passes():
    rep = run_suite(seed=3, n=150, n_mdp=15)
    assert rep.ok
    assert {"nl", "ns_spectral_bound", "mdp_bellman_residual"} <= set(rep.checks)
    assert all(c.passed > 0 for c in rep.checks.values())


def test_negative_control_fails():
    rep = run_suite(seed=3, suites=["ns"], n=200, perturb_hessian=True)
    assert not rep.ok


def test_perturbation_is_real():
    inst = BanditInstance([1.0, 0.6, 0.2])
    th = np.array([0.4, -0.3, 1.1])
    assert np.max(np.abs(perturbed_hessian(th, inst) - value_hessian(th, inst))) > 1e-3


def test_reproducible():
    a = run_suite(seed=9, suites=["nl", "moments"], n=100).to_json()
    b = run_suite(seed=9, suites=["nl", "moments"], n=100).to_json()
    assert a == b


@pytest.mark.parametrize("suites", [[], ["gradient", "nope"]])
def test_bad_selection(suites):
    with pytest.raises(ValueError):
        run_suite(suites=suites)


def test_check_bookkeeping():
    c = Check("x")
    assert not c.ok
    c.record(True, -0.5)
    c.record(True, -0.1)
    assert c.ok and c.worst == -0.1
    c.record(False, 2.0)
    assert not c.ok and c.failed == 1 and c.worst == 2.0


def test_all_suites_named():
    rep = run_suite(seed=1, suites=SUITES, n=20, n_mdp=3)
    assert rep.ok
