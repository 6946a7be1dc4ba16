import numpy as np
import pytest

from sosrk import adaptive as A
from sosrk import problems as P
from sosrk.errors import InputError, IntegrationFailure
from sosrk.noise import FutureNoiseStack, NoiseStream
from sosrk.tableaus import builtin


def test_controller_validation():
    with pytest.raises(InputError):
        A.Controller(qmin=1.5)
    with pytest.raises(InputError):
        A.Controller(safety=0)
    with pytest.raises(InputError):
        A.Controller(abstol=0, reltol=0)


def test_error_norm_and_proposal():
    c = A.Controller(abstol=0.1, reltol=0.0, delta=2.0)
    e = A.error_norm(np.array([0.1, 0.0]), np.array([0.0, 0.2]), np.zeros(2), np.zeros(2), c)
    assert e == pytest.approx(2.0)
    assert A.propose_h(0.0, 1.0, c, 0.5) == c.qmax
    assert A.propose_h(np.inf, 1.0, c, 0.5) == c.qmin
    assert A.propose_h(1e6, 1.0, c, 0.5) == c.qmin
    assert A.propose_h(0.25, 1.0, c, 0.5) == pytest.approx(0.9 * 2.0)


def test_estimate_stiffness_recovers_linear_eigenvalue():
    tab = builtin("SOSRA2")
    f = lambda t, x: -40.0 * x
    g = lambda t, x: np.full_like(x, 0.1)
    H0 = [np.array([1.0]), np.array([0.5]), np.array([0.2])]
    est = A.estimate_stiffness(H0, [np.zeros(1)] * 3, f, g, 0.0, 0.1, tab, omega=5.0)
    assert est.lambdaD == pytest.approx(40.0)
    assert not est.stiff_flag                      # h*lambda/5 = 0.8
    est = A.estimate_stiffness(H0, [np.zeros(1)] * 3, f, g, 0.0, 1.0, tab, omega=5.0)
    assert est.stiff_flag                          # h*lambda/5 = 8
    with pytest.raises(InputError):
        A.estimate_stiffness(H0, H0, f, g, 0.0, 0.1, builtin("SOSRA"))


def test_estimate_stiffness_degenerate_stages():
    tab = builtin("SOSRI2")
    f = lambda t, x: -x
    H = [np.ones(1)] * 4
    est = A.estimate_stiffness(H, H, f, f, 0.0, 0.1, tab)
    assert est.degenerate and not est.stiff_flag


def test_sri_thresholds_use_stability_extent():
    tab = builtin("SOSRI2")
    f = lambda t, x: -400.0 * x
    g = lambda t, x: 0.0 * x
    H0 = [np.zeros(1), np.zeros(1), np.array([1.0]), np.array([0.0])]
    H1 = [np.zeros(1)] * 4
    # h lambda_D = 40 ~ 3.8 times the real-axis extent: stiff at omega=3, not at omega=5
    assert A.estimate_stiffness(H0, H1, f, g, 0.0, 0.1, tab, omega=3.0).stiff_flag
    assert not A.estimate_stiffness(H0, H1, f, g, 0.0, 0.1, tab, omega=5.0).stiff_flag


def test_integrate_reaches_end_and_records_path():
    sol = A.integrate(P.additive_test(), "SOSRA", A.Controller(1e-3, 1e-3), seed=3)
    assert sol.success
    assert sol.t[-1] == 1.0 and np.all(np.diff(sol.t) > 0)
    assert sol.n_accept == len(sol.t) - 1 == len(sol.increments)
    assert np.allclose(sol.W[-1], sum(p.dW for p in sol.increments))
    assert sum(p.h for p in sol.increments) == pytest.approx(1.0, abs=1e-12)


def test_integrate_is_reproducible():
    a = A.integrate(P.diagonal_test(), "SOSRI", seed=5, stream_id=2)
    b = A.integrate(P.diagonal_test(), "SOSRI", seed=5, stream_id=2)
    c = A.integrate(P.diagonal_test(), "SOSRI", seed=5, stream_id=3)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.t, b.t)
    assert not np.array_equal(a.W[-1], c.W[-1])


@pytest.mark.parametrize("prob,method", [(P.additive_test, "SOSRA"), (P.additive_test, "SKenCarp"),
                                         (P.diagonal_test, "SOSRI")])
def test_adaptive_error_is_small_and_shrinks_with_tolerance(prob, method):
    pr = prob()
    errs = []
    for tol in (1e-2, 1e-4):
        e = []
        for k in range(20):
            sol = A.integrate(pr, method, A.Controller(tol, tol), seed=11, stream_id=k)
            e.append(abs(sol.x[-1, 0] - pr.exact(1.0, sol.W[-1])[0]))
        errs.append(np.mean(e))
    assert errs[0] < 1e-2
    assert errs[1] < errs[0]


def test_forced_rejections_keep_the_prescribed_path():
    # Realize a path once, then integrate along it again while forcing random
    # rejections: the accepted increments must still add up to the same W(T).
    pr = P.additive_test()
    base = A.integrate(pr, "SOSRA", A.Controller(1e-2, 1e-2), seed=1)
    rng = np.random.default_rng(0)
    for trial in range(20):
        stack = FutureNoiseStack(NoiseStream(99, trial))
        stack.extend_future(base.increments)
        pattern = rng.random(10_000) < 0.3
        sol = A.integrate(pr, "SOSRA", A.Controller(1e-3, 1e-3), noise=stack,
                          inject_rejection=lambda i: bool(pattern[i]))
        assert sol.n_reject > 0
        assert abs(sol.W[-1, 0] - base.W[-1, 0]) <= 1e-12


def test_reference_on_same_path_converges():
    pr = P.additive_test()
    base = A.integrate(pr, "SOSRA", A.Controller(1e-2, 1e-2), seed=4)
    stack = FutureNoiseStack(NoiseStream(4, 1000))
    stack.extend_future(base.increments)
    fine = A.integrate(pr, "SOSRA", A.Controller(1e-7, 1e-7), noise=stack)
    exact = pr.exact(1.0, base.W[-1])[0]
    assert abs(fine.x[-1, 0] - exact) < 1e-5


def test_stiffness_detector_quiet_on_nonstiff_problem():
    sol = A.integrate(P.additive_test(), "SOSRA2", A.Controller(1e-3, 1e-3), stiffness=True)
    assert sol.stiff_t == []
    with pytest.raises(InputError):
        A.integrate(P.additive_test(), "SOSRA", stiffness=True)


def test_integration_failure_carries_partial_solution():
    p = P.SDEProblem(lambda t, x: x ** 3, lambda t, x: np.full_like(x, 0.1), [5.0], (0, 10),
                     noise_kind="additive")
    with np.errstate(all="ignore"), pytest.raises(IntegrationFailure) as ei:
        A.integrate(p, "SOSRA", A.Controller(1e-3, 1e-3))
    sol = ei.value.solution
    assert sol.status == "failed" and sol.n_reject > 0 and sol.t[-1] < 10


def test_max_steps_status():
    sol = A.integrate(P.additive_test(), "SOSRA", A.Controller(1e-6, 1e-6), max_steps=5)
    assert sol.status == "max_steps" and not sol.success


def test_diagnostics_callback():
    rows = []
    A.integrate(P.additive_test(), "SOSRA", diagnostics=rows.append)
    assert rows and all(r["accepted"] for r in rows)
    assert rows[-1]["t"] == 1.0


def test_lamperti_path_through_integrate():
    pr = P.gbm_affine()
    sol = A.integrate(pr, "SOSRA", A.Controller(1e-4, 1e-4), seed=2)
    assert sol.n_domain == 0
    assert sol.x[-1, 0] == pytest.approx(pr.exact(1.0, sol.W[-1])[0], rel=1e-10)


def test_affine_problem_with_sri_runs_as_diagonal():
    sol = A.integrate(P.gbm_affine(), "SOSRI", A.Controller(1e-4, 1e-4), seed=2)
    assert sol.success


def test_switching_hysteresis_with_forced_flags():
    flags = [True, True, False, True, True, True] + [False] * 1000
    sol = A.integrate_switching(P.additive_test(T=10.0), A.Controller(1e-5, 1e-5), K=3,
                                forced_flags=lambda i: flags[i] if i < len(flags) else False)
    used = sol.methods_used
    assert len(used) > 12
    assert used[:6] == ["SOSRA2"] * 6
    assert used[6:9] == ["SKenCarp"] * 3           # three clear steps before switching back
    assert used[9] == "SOSRA2"
    assert sol.switches == 2


def test_switching_stays_explicit_on_nonstiff_problem():
    sol = A.integrate_switching(P.additive_test(), A.Controller(1e-3, 1e-3))
    assert sol.switches == 0 and set(sol.methods_used) == {"SOSRA2"}


def test_switching_goes_implicit_on_stiff_linear_problem():
    p = P.SDEProblem(lambda t, x: -1e4 * (x - np.cos(t)), lambda t, x: np.full_like(x, 0.01), [1.0],
                     (0, 1), noise_kind="additive", jac=lambda t, x: np.full(x.shape + (1,), -1e4))
    sol = A.integrate_switching(p, A.Controller(1e-2, 1e-2), omega=1.0)
    assert sol.switches >= 1 and "SKenCarp" in sol.methods_used
    assert abs(sol.x[-1, 0] - np.cos(1.0)) < 0.05


def test_switching_rejects_diagonal_noise():
    with pytest.raises(InputError):
        A.integrate_switching(P.diagonal_test())


@pytest.mark.parametrize("prob,method", [(P.additive_test, "SOSRA"), (P.diagonal_test, "SOSRI"),
                                         (P.additive_test, "SKenCarp"), (P.lotka_additive, "SOSRA2")])
def test_ensemble_matches_single_trajectories_bitwise(prob, method):
    pr = prob() if prob is not P.lotka_additive else P.lotka_additive(T=2.0)
    ctrl = A.Controller(1e-3, 1e-3)
    res = A.integrate_ensemble(pr, method, 4, ctrl, seed=7)
    for k in range(4):
        sol = A.integrate(pr, method, ctrl, seed=7, stream_id=k)
        assert np.array_equal(res.x_final[k], sol.x[-1])
        assert res.n_accept[k] == sol.n_accept and res.n_reject[k] == sol.n_reject
    assert res.n_failed == 0 and res.all_finite
    assert np.allclose(res.mean_h, 1.0 / res.n_accept) or prob is P.lotka_additive


def test_ensemble_helper_and_paths():
    sols = A.ensemble(P.additive_test(), "SOSRA", 3, seed=1)
    assert len(sols) == 3 and all(s.success for s in sols)
    res = A.integrate_ensemble(P.additive_test(), "SOSRA", 3, seed=1, save_paths=True)
    assert len(res.paths[0]) == res.n_accept[0] + 1
    assert np.array_equal(res.paths[1][-1][1], sols[1].x[-1])
