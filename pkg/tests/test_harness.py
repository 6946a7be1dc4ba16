import json

import numpy as np
import pytest

from sosrk import harness as Hs
from sosrk import problems as P
from sosrk.errors import InputError


def test_fine_path_shapes_and_streams():
    dW, I10 = Hs.fine_path(3, 8, 2, 0.125, seed=4)
    assert dW.shape == I10.shape == (8, 3, 2)
    again, _ = Hs.fine_path(5, 8, 2, 0.125, seed=4)
    assert np.array_equal(dW, again[:, :3])            # trajectory k is independent of n_traj


def test_coarsen_matches_direct_integral():
    # I10 = int_0^h (W(s) - W(0)) ds is additive with the displacement correction.
    rng = np.random.default_rng(0)
    dt = 0.01
    dW = rng.standard_normal((8, 1, 1)) * np.sqrt(dt)
    dZ = rng.standard_normal((8, 1, 1)) * np.sqrt(dt)
    I10 = 0.5 * dt * (dW + dZ / np.sqrt(3))
    dWc, I10c = Hs.coarsen(dW, I10, dt, 4)
    W = np.concatenate([[0.0], np.cumsum(dW[:, 0, 0])])
    for c in range(2):
        sl = slice(4 * c, 4 * c + 4)
        want = sum(I10[k, 0, 0] + dt * (W[k] - W[4 * c]) for k in range(4 * c, 4 * c + 4))
        assert I10c[c, 0, 0] == pytest.approx(want, rel=1e-13)
        assert dWc[c, 0, 0] == pytest.approx(dW[sl, 0, 0].sum(), rel=1e-13)


def test_coarsen_moments():
    dW, I10 = Hs.fine_path(20_000, 8, 1, 1 / 8, seed=1)
    dWc, I10c = Hs.coarsen(dW, I10, 1 / 8, 8)
    assert I10c.var() == pytest.approx(1 / 3, rel=0.03)
    assert np.mean(I10c * dWc) == pytest.approx(0.5, rel=0.03)


def test_fit_slope():
    dts = np.array([0.1, 0.05, 0.025])
    s, b = Hs.fit_slope(dts, 3 * dts ** 2)
    assert s == pytest.approx(2.0) and b == pytest.approx(np.log(3))
    assert np.isnan(Hs.fit_slope([0.1], [1.0])[0])


def test_fixed_step_solve_small_dt_matches_exact():
    pr = P.additive_test()
    dW, I10 = Hs.fine_path(10, 256, 1, 1 / 256, seed=0)
    t, X = Hs.fixed_step_solve(pr, "SOSRA", 1 / 256, dW, I10)
    W = np.concatenate([np.zeros((1, 10, 1)), np.cumsum(dW, 0)])
    assert np.max(np.abs(X - pr.exact(t[:, None, None], W))) < 1e-7


def test_strong_convergence_small_run():
    r = Hs.strong_convergence(P.additive_test(), "SRA1", [2 ** -2, 2 ** -3, 2 ** -4, 2 ** -5], n_traj=50)
    assert 1.8 <= r.slope <= 2.2
    assert np.all(r.diverged == 0) and len(r.rows()) == 4
    em = Hs.strong_convergence(P.diagonal_test(alpha=1.0, beta=1.0), "EM",
                               [2 ** -4, 2 ** -5, 2 ** -6, 2 ** -7], n_traj=200)
    assert 0.35 <= em.slope <= 0.7                     # Euler-Maruyama is strong order 1/2


def test_strong_convergence_input_checks():
    with pytest.raises(InputError):
        Hs.strong_convergence(P.pathwise_stiff(), "SOSRA", [0.1])
    with pytest.raises(InputError):
        Hs.strong_convergence(P.additive_test(), "SOSRA", [0.3, 0.1])


def test_work_precision_rows():
    rows = Hs.work_precision(P.additive_test(), ["SOSRA", "SRA1"], tolerances=[1e-2, 1e-4], n_traj=5)
    assert len(rows) == 4
    by = {(r.method, r.value): r for r in rows}
    assert by[("SOSRA", 1e-4)].error < by[("SOSRA", 1e-2)].error
    assert by[("SOSRA", 1e-4)].n_accept > by[("SOSRA", 1e-2)].n_accept
    weak = Hs.work_precision(P.additive_test(), ["SOSRA"], tolerances=[1e-3], n_traj=5,
                             error_kind="weak_final")
    assert weak[0].error >= 0
    fixed = Hs.work_precision(P.additive_test(), ["SOSRA"], dts=[0.1], n_traj=5)
    assert fixed[0].setting == "dt" and set(fixed[0].as_dict()) >= {"method", "error", "ci95"}


def test_work_precision_reference_path_for_non_analytic():
    rows = Hs.work_precision(P.lotka_additive(T=1.0), ["SOSRA"], tolerances=[1e-2], n_traj=3)
    assert 0 < rows[0].error < 1e-2


def test_work_precision_input_checks():
    with pytest.raises(InputError):
        Hs.work_precision(P.additive_test(), ["SOSRA"])
    with pytest.raises(InputError):
        Hs.work_precision(P.additive_test(), ["SOSRA"], tolerances=[1e-2], error_kind="bogus")
    with pytest.raises(InputError):
        Hs.work_precision(P.lotka_additive(), ["SOSRA"], dts=[0.1])


def test_stability_raster_files(tmp_path):
    rep, grid = Hs.stability_raster("SRA1", "drift", N=3, M=2, dx=0.1, out=str(tmp_path / "r"))
    assert rep["method"] == "SRA1"
    for ext in ("pgm", "csv", "json"):
        assert (tmp_path / f"r.{ext}").exists()
    assert json.loads((tmp_path / "r.json").read_text())["area"] == pytest.approx(grid.area)


def test_stiffness_trace_rows():
    rows, sol = Hs.stiffness_trace(P.additive_test(), tol=1e-3)
    assert len(rows) == sol.n_accept
    assert not any(r["stiff_flag"] for r in rows)
    assert all(set(r) == {"t", "stiff_flag", "h", "fnorm"} for r in rows)
