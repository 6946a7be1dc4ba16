"""Experiment drivers: convergence sweeps, work-precision, rasters, traces."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, IntegrationFailure
from .noise import GaussianPair, NoiseStream, iterated_integrals
from .problems import AnalyticProblem, unwrap
from .steppers import kernel_for, lamperti_problem, NewtonOptions
from . import tableaus

_SQRT3 = np.sqrt(3.0)


def fine_path(n_traj, n_steps, m, dt, seed):
    """Fine-grid increments ``(dW, I10)`` with shape ``(n_steps, n_traj, m)``.

    Trajectory ``k`` draws from its own stream ``(seed, k)``.
    """
    dW = np.empty((n_steps, n_traj, m))
    dZ = np.empty((n_steps, n_traj, m))
    base = NoiseStream(seed)
    sq = np.sqrt(dt)
    for k in range(n_traj):
        xi = base.spawn(k).normals(2 * m * n_steps).reshape(n_steps, 2, m)
        dW[:, k] = sq * xi[:, 0]
        dZ[:, k] = sq * xi[:, 1]
    I10 = 0.5 * dt * (dW + dZ / _SQRT3)
    return dW, I10


def coarsen(dW, I10, dt, factor):
    """Aggregate ``factor`` consecutive fine increments exactly.

    ``I10`` over a union of windows is the sum of the pieces plus the
    Brownian displacement accumulated before each piece times its length.
    """
    n, *rest = dW.shape
    nc = n // factor
    w = dW[: nc * factor].reshape((nc, factor) + tuple(rest))
    i = I10[: nc * factor].reshape((nc, factor) + tuple(rest))
    before = np.cumsum(w, axis=1) - w
    dWc = w.sum(axis=1)
    I10c = i.sum(axis=1) + dt * before.sum(axis=1)
    return dWc, I10c


def _bundle(dW, I10, h):
    dZ = _SQRT3 * (2.0 * I10 / h - dW)
    return iterated_integrals(GaussianPair(dW, dZ, h))


def _stepper(problem, tab, imex=False):
    p = unwrap(problem)
    if p.noise_kind == "affine" and tab.family == "SRA":
        pz, lm = lamperti_problem(p)
        kern = kernel_for(pz, tab, imex)
        return pz, kern, lm
    return p, kernel_for(p, tab, imex), None


def fixed_step_solve(problem, method, dt, dW, I10, newton=None, imex=False, record_every=1):
    """Advance all trajectories with a fixed step; returns times and states."""
    tab = tableaus.builtin(method) if isinstance(method, str) else method
    p, kern, lm = _stepper(problem, tab, imex)
    n_steps, n_traj, _ = dW.shape
    x = np.broadcast_to(p.x0, (n_traj, p.d)).copy()
    t0 = p.tspan[0]
    kw = {}
    if kern.__name__ in ("step_sra_implicit", "step_skencarp_imex"):
        kw["newton"] = newton or NewtonOptions(abstol=1e-12, reltol=1e-12, kappa=1.0)
    times = [t0]
    states = [x.copy()]
    with np.errstate(all="ignore"):
        for k in range(n_steps):
            nb = _bundle(dW[k], I10[k], dt)
            x = kern(p, tab, t0 + k * dt, x, dt, nb, strict=False, **kw).x_next
            if (k + 1) % record_every == 0:
                times.append(t0 + (k + 1) * dt)
                states.append(x.copy())
    out = np.array(states)
    if lm is not None:
        out = lm.psi_inv(out)
    return np.array(times), out


@dataclass
class ConvergenceResult:
    method: str
    dts: np.ndarray
    errors: np.ndarray
    slope: float
    intercept: float
    n_traj: int
    diverged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    wall: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def rows(self):
        return [dict(method=self.method, dt=float(d), error=float(e), slope=self.slope)
                for d, e in zip(self.dts, self.errors)]


def fit_slope(dts, errors):
    """Least-squares slope of ``log(error)`` against ``log(dt)``."""
    dts = np.asarray(dts, dtype=float)
    errors = np.asarray(errors, dtype=float)
    ok = np.isfinite(errors) & (errors > 0)
    if ok.sum() < 2:
        return float("nan"), float("nan")
    slope, intercept = np.polyfit(np.log(dts[ok]), np.log(errors[ok]), 1)
    return float(slope), float(intercept)


def strong_convergence(problem: AnalyticProblem, method, dts, n_traj=1000, seed=0,
                       imex=False, newton=None) -> ConvergenceResult:
    """Strong l2 error versus step size on one shared Brownian path per trajectory.

    All levels are built by aggregating the finest level's increments, and
    errors are measured on the coarsest grid (common to every level).
    """
    if not isinstance(problem, AnalyticProblem):
        raise InputError("strong_convergence needs a problem with an exact solution")
    p = problem.problem
    dts = np.sort(np.asarray(dts, dtype=float))[::-1]
    t0, T = p.tspan
    steps = np.rint((T - t0) / dts).astype(int)
    if np.any(np.abs(steps * dts - (T - t0)) > 1e-9 * (T - t0)):
        raise InputError("every dt must divide the time span")
    n_fine = steps.max()
    dt_fine = (T - t0) / n_fine
    if np.any(n_fine % steps):
        raise InputError("step counts must nest")
    m = p.m
    dW, I10 = fine_path(n_traj, n_fine, m, dt_fine, seed)
    Wcum = np.concatenate([np.zeros((1, n_traj, m)), np.cumsum(dW, axis=0)])
    coarse_every = n_fine // steps.min()
    t_grid = t0 + dt_fine * np.arange(0, n_fine + 1, coarse_every)
    W_grid = Wcum[::coarse_every]
    exact = problem.exact(t_grid[:, None, None], W_grid)
    errors, diverged, wall = [], [], []
    name = method if isinstance(method, str) else method.name
    for dt, n in zip(dts, steps):
        factor = n_fine // n
        dWc, I10c = coarsen(dW, I10, dt_fine, factor)
        t1 = time.perf_counter()
        _, X = fixed_step_solve(problem, method, dt, dWc, I10c, newton=newton, imex=imex,
                                record_every=n // steps.min())
        wall.append(time.perf_counter() - t1)
        err = np.sqrt(np.mean(np.sum((X - exact) ** 2, axis=-1), axis=0))
        bad = ~np.isfinite(err)
        diverged.append(int(bad.sum()))
        errors.append(float(np.mean(err[~bad])) if np.any(~bad) else float("nan"))
    slope, icpt = fit_slope(dts, errors)
    return ConvergenceResult(name, dts, np.array(errors), slope, icpt, n_traj,
                             np.array(diverged), np.array(wall))


# ---------------------------------------------------------------------------
# work-precision

@dataclass
class WorkPrecisionRow:
    method: str
    setting: str
    value: float
    error: float
    ci95: float
    wall_per_traj: float
    n_accept: float
    n_reject: float
    flagged: int = 0

    def as_dict(self):
        return dict(self.__dict__)


def _reference_solution(p, method, sol, ref_tol, seed, k):
    """Low-tolerance solve on the same Brownian path as ``sol``."""
    from .adaptive import Controller, integrate
    from .noise import FutureNoiseStack

    stack = FutureNoiseStack(NoiseStream(seed + 7919, k), p.m)
    stack.extend_future(sol.increments)
    return integrate(p, method, Controller(ref_tol, ref_tol), noise=stack)


def work_precision(problem, methods, tolerances=None, dts=None, n_traj=100,
                   error_kind="strong_l2", seed=0, ref_tol=1e-6, ref_method=None):
    """Error versus cost rows for a set of methods.

    With ``tolerances`` each method runs adaptively at ``abstol = reltol =
    tol``; with ``dts`` it runs at fixed steps (analytic problems only).
    ``error_kind`` is ``strong_l2`` (l2 over the accepted grid, averaged over
    trajectories) or ``weak_final`` (difference of the sample means at the
    final time, with a normal 95% half-width).
    """
    from .adaptive import Controller, integrate
    if error_kind not in ("strong_l2", "weak_final"):
        raise InputError("error_kind must be 'strong_l2' or 'weak_final'")
    if (tolerances is None) == (dts is None):
        raise InputError("give exactly one of tolerances or dts")
    p = unwrap(problem)
    analytic = isinstance(problem, AnalyticProblem)
    rows = []
    if dts is not None:
        if not analytic:
            raise InputError("fixed-step rows need an exact solution")
        for method in methods:
            for dt in dts:
                n = int(round((p.tspan[1] - p.tspan[0]) / dt))
                dW, I10 = fine_path(n_traj, n, p.m, dt, seed)
                Wc = np.concatenate([np.zeros((1, n_traj, p.m)), np.cumsum(dW, axis=0)])
                t1 = time.perf_counter()
                tt, X = fixed_step_solve(problem, method, dt, dW, I10)
                wall = (time.perf_counter() - t1) / n_traj
                ex = problem.exact(tt[:, None, None], Wc)
                err, ci, bad = _errors(X, ex, error_kind)
                rows.append(WorkPrecisionRow(str(method), "dt", float(dt), err, ci, wall, n, 0, bad))
        return rows
    for method in methods:
        for tol in tolerances:
            ctrl = Controller(tol, tol)
            per, finals, ref_finals, acc, rej, flagged = [], [], [], [], [], 0
            t1 = time.perf_counter()
            sols = []
            for k in range(n_traj):
                try:
                    sols.append(integrate(problem, method, ctrl, seed=seed, stream_id=k))
                except IntegrationFailure:
                    flagged += 1
            wall = (time.perf_counter() - t1) / n_traj
            for k, sol in enumerate(sols):
                acc.append(sol.n_accept)
                rej.append(sol.n_reject)
                if analytic:
                    ex = problem.exact(sol.t[:, None], sol.W)
                    per.append(np.sqrt(np.mean(np.sum((sol.x - ex) ** 2, axis=-1))))
                    finals.append(sol.x[-1])
                    ref_finals.append(ex[-1])
                else:
                    try:
                        ref = _reference_solution(p, ref_method or method, sol, ref_tol, seed, k)
                    except IntegrationFailure:
                        flagged += 1
                        continue
                    per.append(np.sqrt(np.sum((sol.x[-1] - ref.x[-1]) ** 2)))
                    finals.append(sol.x[-1])
                    ref_finals.append(ref.x[-1])
            if error_kind == "strong_l2":
                err = float(np.mean(per)) if per else float("nan")
                ci = float(1.96 * np.std(per, ddof=1) / np.sqrt(len(per))) if len(per) > 1 else float("nan")
            else:
                diff = np.array(finals) - np.array(ref_finals)
                err = float(np.linalg.norm(np.mean(finals, axis=0) - np.mean(ref_finals, axis=0)))
                ci = float(1.96 * np.linalg.norm(np.std(diff, axis=0, ddof=1)) / np.sqrt(len(diff)))
            rows.append(WorkPrecisionRow(str(method), "tol", float(tol), err, ci, wall,
                                         float(np.mean(acc)) if acc else 0.0,
                                         float(np.mean(rej)) if rej else 0.0, flagged))
    return rows


def _errors(X, ex, kind):
    if kind == "strong_l2":
        per = np.sqrt(np.mean(np.sum((X - ex) ** 2, axis=-1), axis=0))
        ok = np.isfinite(per)
        if not ok.any():
            return float("nan"), float("nan"), int((~ok).sum())
        ci = 1.96 * np.std(per[ok], ddof=1) / np.sqrt(ok.sum()) if ok.sum() > 1 else float("nan")
        return float(np.mean(per[ok])), float(ci), int((~ok).sum())
    fin, exf = X[-1], ex[-1]
    ok = np.all(np.isfinite(fin), axis=-1)
    d = fin[ok] - exf[ok]
    err = float(np.linalg.norm(fin[ok].mean(axis=0) - exf[ok].mean(axis=0)))
    ci = float(1.96 * np.linalg.norm(d.std(axis=0, ddof=1)) / np.sqrt(ok.sum()))
    return err, ci, int((~ok).sum())


# ---------------------------------------------------------------------------
# stability rasters and stiffness traces

def stability_raster(method, criterion="drift", N=6.0, M=3.0, dx=0.05, out=None, z_hi=1.0):
    """Stability-region raster; writes ``out``.pgm/.csv/.json when ``out`` is given."""
    from .stability import region_area
    tab = tableaus.builtin(method) if isinstance(method, str) else method
    area, grid = region_area(tab, N, M, dx, criterion, z_hi=z_hi)
    if out is not None:
        grid.to_pgm(f"{out}.pgm")
        grid.to_csv(f"{out}.csv")
        grid.to_json(f"{out}.json")
    rep = grid.report()
    rep["method"] = tab.name
    return rep, grid


def stiffness_trace(problem, method="SOSRA2", tol=1e-2, omega=5.0, seed=0, stream_id=0,
                    abstol=None, reltol=None):
    """Run the detector along one adaptive trajectory.

    Returns rows ``(t, stiff_flag, h, fnorm)`` where ``fnorm`` is the
    drift magnitude at the accepted state.
    """
    from .adaptive import Controller, integrate
    p = unwrap(problem)
    ctrl = Controller(abstol if abstol is not None else tol, reltol if reltol is not None else tol)
    sol = integrate(problem, method, ctrl, seed=seed, stream_id=stream_id, stiffness=True, omega=omega)
    acc = [d for d in sol.diagnostics if d["accepted"]]
    fn = np.linalg.norm(np.asarray(p.f(0.0, sol.x[1:]), float).reshape(len(acc), -1), axis=-1) \
        if acc else np.zeros(0)
    return [dict(t=float(d["t"]), stiff_flag=bool(d["stiff_flag"]), h=float(d["h"]), fnorm=float(f))
            for d, f in zip(acc, fn)], sol
