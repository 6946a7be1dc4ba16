"""Adaptive time stepping with rejection sampling with memory.

The loop keeps one Brownian path per integration: a rejected window is
returned to a :class:`~sosrk.noise.FutureNoiseStack` and later split with
Brownian bridges, so the accepted steps always tile a single realization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tableaus
from .errors import InputError, IntegrationFailure, StepFailure
from .noise import FutureNoiseStack, GaussianPair, NoiseStream, iterated_integrals
from .problems import SDEProblem, unwrap
from .stability import z_min as stability_extent
from .steppers import (NewtonOptions, affine_as_diagonal, kernel_for, lamperti_problem,
                       lamperti_step, _jacobian)


@dataclass
class Controller:
    """Step-size controller settings.

    ``order_exponent`` defaults to the tableau's own value (1/3 for the
    additive methods, 1/2 for the diagonal ones).  ``delta`` weights the
    drift error against the noise error.
    """

    abstol: float = 1e-2
    reltol: float = 1e-2
    safety: float = 0.9
    qmin: float = 0.2
    qmax: float = 4.0
    order_exponent: float | None = None
    max_rejections: int = 20
    delta: float = 1.0
    h_min_factor: float = 1e-14
    dt_init: float | None = None
    dt_max: float | None = None

    def __post_init__(self):
        if not 0 < self.qmin < 1 < self.qmax:
            raise InputError("need 0 < qmin < 1 < qmax")
        if not 0 < self.safety <= 1:
            raise InputError("safety must lie in (0, 1]")
        if self.abstol < 0 or self.reltol < 0 or self.abstol + self.reltol == 0:
            raise InputError("tolerances must be non-negative and not both zero")


def error_norm(errD, errN, x_old, x_new, ctrl: Controller) -> float:
    """RMS of ``(delta errD + errN) / (abstol + max(|x_old|, |x_new|) reltol)``."""
    scale = ctrl.abstol + np.maximum(np.abs(x_old), np.abs(x_new)) * ctrl.reltol
    e = (ctrl.delta * np.asarray(errD) + np.asarray(errN)) / scale
    return float(np.sqrt(np.mean(e * e)))


def propose_h(err: float, h: float, ctrl: Controller, order_exponent: float | None = None) -> float:
    q = ctrl.order_exponent if order_exponent is None else order_exponent
    if q is None:
        q = 0.5
    if err == 0:
        return h * ctrl.qmax
    if not np.isfinite(err):
        return h * ctrl.qmin
    fac = ctrl.safety * err ** (-q)
    return h * min(ctrl.qmax, max(ctrl.qmin, fac))


@dataclass
class StiffnessEstimate:
    lambdaD: float
    lambdaN: float
    stiff_flag: bool
    omega: float
    degenerate: bool = False


def _quotient(fa, fb, a, b):
    den = np.linalg.norm(a - b)
    if den == 0 or not np.isfinite(den):
        return 0.0, True
    return float(np.linalg.norm(fa - fb) / den), False


def estimate_stiffness(H0, H1, f, g, t, h, tab, omega=5.0) -> StiffnessEstimate:
    """Eigenvalue estimates from the two detection stages of the last step.

    The thresholds compare ``h * lambda`` (dimensionless) with the edges
    of the method's stability region.
    """
    if not tab.detection_capable:
        raise InputError(f"{tab.name} has no stiffness-detection stages")
    i, j = tab.detection_stages
    ti, tj = t + tab.c0[i] * h, t + tab.c0[j] * h
    lamD, degD = _quotient(f(tj, H0[j]), f(ti, H0[i]), H0[j], H0[i])
    if tab.family == "SRI":
        lamN, degN = _quotient(g(tj, H1[j]), g(ti, H1[i]), H1[j], H1[i])
        hD, hN = h * lamD, h * lamN
        zm = stability_extent(tab)
        stiff = hD / zm > omega
        if 2.5 < hD < 10:
            stiff = stiff or hN > omega
        elif hD <= 2.5:
            stiff = stiff or hN / 2 > omega
        return StiffnessEstimate(lamD, lamN, bool(stiff), omega, degD and degN)
    stiff = h * lamD / 5.0 > omega
    return StiffnessEstimate(lamD, 0.0, bool(stiff), omega, degD)


@dataclass
class Solution:
    """Accepted trajectory plus per-attempt diagnostics."""

    t: np.ndarray
    x: np.ndarray
    W: np.ndarray
    method: str
    status: str = "success"
    n_accept: int = 0
    n_reject: int = 0
    n_newton_fail: int = 0
    n_domain: int = 0
    newton_iters: int = 0
    diagnostics: list = field(default_factory=list)
    stiff_t: list = field(default_factory=list)
    methods_used: list = field(default_factory=list)
    switches: int = 0
    increments: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == "success"

    @property
    def mean_h(self) -> float:
        return float(np.mean(np.diff(self.t))) if self.t.size > 1 else 0.0


def _initial_h(p, ctrl, f0, g0, x0):
    t0, T = p.tspan
    span = T - t0
    if ctrl.dt_init:
        return min(ctrl.dt_init, span)
    scale = ctrl.abstol + np.abs(x0) * ctrl.reltol
    d0 = np.sqrt(np.mean((x0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    d2 = np.sqrt(np.mean((g0 / scale) ** 2))
    d0 = max(d0, 1.0)
    h = 0.1 * span
    if d1 > 1e-5:
        h = min(h, 0.01 * d0 / d1)
    if d2 > 1e-5:
        h = min(h, (0.01 * d0 / d2) ** 2)
    return max(h, 1e-6 * span)


class _Runner:
    """Binds a tableau to the step kernel for a problem."""

    def __init__(self, p, tab, imex=False, newton=None):
        self.tab = tab
        self.newton = newton or NewtonOptions()
        self.lamperti = None
        if p.noise_kind == "affine" and tab.family == "SRA":
            pz, lm = lamperti_problem(p)
            self.lamperti = (pz, lm)
            self.inner = kernel_for(pz, tab, imex)
            self.kernel = lamperti_step
            self.problem = p
        else:
            if p.noise_kind == "affine":
                p = affine_as_diagonal(p)
            self.problem = p
            self.kernel = kernel_for(p, tab, imex)
        k = self.inner if self.lamperti else self.kernel
        self.implicit = k.__name__ in ("step_sra_implicit", "step_skencarp_imex")

    def step(self, t, x, h, nb, strict=True):
        kw = {"strict": strict}
        if self.implicit:
            kw["newton"] = self.newton
        if self.lamperti:
            return lamperti_step(self.problem, self.inner, self.tab, t, x, h, nb,
                                 transformed=self.lamperti, **kw)
        return self.kernel(self.problem, self.tab, t, x, h, nb, **kw)


def _resolve(method):
    return tableaus.builtin(method) if isinstance(method, str) else method


def integrate(problem, method, ctrl: Controller | None = None, seed: int = 0, stream_id: int = 0,
              imex: bool = False, newton: NewtonOptions | None = None, stiffness: bool = False,
              omega: float = 5.0, diagnostics=None, inject_rejection=None, max_steps: int = 10 ** 7,
              noise: FutureNoiseStack | None = None) -> Solution:
    """Adaptive solve of one trajectory.

    Parameters
    ----------
    problem : SDEProblem or AnalyticProblem
    method : str or tableau
    ctrl : Controller
    seed, stream_id : int
        Select the noise stream; each trajectory should use its own id.
    stiffness : bool
        Run the stiffness detector on accepted steps (detection-capable
        tableaus only); flagged times are kept in ``Solution.stiff_t``.
    diagnostics : callable, optional
        Called with one dict per accepted step.
    inject_rejection : callable, optional
        ``inject_rejection(attempt_index) -> bool`` forces rejections
        (testing hook for path consistency).
    noise : FutureNoiseStack, optional
        Pre-built noise source (e.g. holding a prescribed path).
    """
    p = unwrap(problem)
    tab = _resolve(method)
    ctrl = ctrl or Controller()
    q = ctrl.order_exponent if ctrl.order_exponent is not None else tab.order_exponent
    if newton is None:
        newton = NewtonOptions(abstol=ctrl.abstol, reltol=ctrl.reltol)
    run = _Runner(p, tab, imex, newton)
    if stiffness and not tab.detection_capable:
        raise InputError(f"{tab.name} cannot detect stiffness")
    t0, T = p.tspan
    span = T - t0
    h_min = ctrl.h_min_factor * span
    m = p.m
    stack = noise or FutureNoiseStack(NoiseStream(seed, stream_id), m)
    x = p.x0.copy()
    t = t0
    W = np.zeros(m)
    ts, xs, Ws = [t0], [x.copy()], [W.copy()]
    sol = Solution(np.array([]), np.array([]), np.array([]), tab.name)
    h = _initial_h(p, ctrl, np.asarray(p.f(t0, x), float),
                   np.broadcast_to(np.asarray(p.g(t0, x), float), x.shape), x)
    if ctrl.dt_max:
        h = min(h, ctrl.dt_max)
    rejections = 0
    attempt = 0
    while t < T:
        if attempt >= max_steps:
            sol.status = "max_steps"
            break
        last = h >= (T - t) * (1 - 1e-12) or T - t - h < h_min
        if last:
            h = T - t
        pair = stack.pop_covering(h, t)
        nb = iterated_integrals(pair)
        try:
            r = run.step(t, x, h, nb)
            err = error_norm(r.errD, r.errN, x, r.x_next, ctrl)
            if not np.isfinite(err):
                raise StepFailure("nonfinite", "non-finite error estimate")
            failure = None
        except StepFailure as exc:
            failure = exc.reason
            err = np.inf
            if exc.reason in ("newton", "linear_solve"):
                sol.n_newton_fail += 1
            elif exc.reason == "domain":
                sol.n_domain += 1
        forced = bool(inject_rejection and inject_rejection(attempt))
        attempt += 1
        if err <= 1.0 and not forced:
            t = T if last else t + h
            x = r.x_next
            W = W + pair.dW
            ts.append(t)
            xs.append(x.copy())
            Ws.append(W.copy())
            sol.increments.append(pair)
            sol.n_accept += 1
            sol.newton_iters += r.newton_iters
            flag = False
            if stiffness:
                est = estimate_stiffness(r.H0, r.H1, run.problem.f, run.problem.g,
                                         t - h, h, tab, omega) if not run.lamperti else None
                flag = bool(est and est.stiff_flag)
                if flag:
                    sol.stiff_t.append(t)
            rec = dict(t=t, h=h, err=err, accepted=True, stiff_flag=flag, method=tab.name)
            sol.diagnostics.append(rec)
            if diagnostics:
                diagnostics(rec)
            h_new = propose_h(err, h, ctrl, q)
            if rejections:
                h_new = min(h_new, h)
            rejections = 0
            h = h_new
        else:
            stack.unpop()
            sol.n_reject += 1
            rejections += 1
            sol.diagnostics.append(dict(t=t, h=h, err=err, accepted=False, stiff_flag=False,
                                        method=tab.name, failure=failure))
            if failure in ("newton", "linear_solve", "nonfinite", "domain"):
                h_new = h * ctrl.qmin
            elif forced and err <= 1.0:
                h_new = 0.5 * h
            else:
                h_new = propose_h(err, h, ctrl, q)
            if rejections > ctrl.max_rejections or h_new < h_min:
                sol.status = "failed"
                _finish(sol, ts, xs, Ws)
                raise IntegrationFailure(
                    f"step at t={t!r} rejected {rejections} times (h={h_new!r}, last failure: {failure})",
                    sol)
            h = h_new
        if ctrl.dt_max:
            h = min(h, ctrl.dt_max)
    _finish(sol, ts, xs, Ws)
    return sol


def _finish(sol, ts, xs, Ws):
    sol.t = np.array(ts)
    sol.x = np.array(xs)
    sol.W = np.array(Ws)


def integrate_switching(problem, ctrl: Controller | None = None, omega: float = 5.0, K: int = 3,
                        seed: int = 0, stream_id: int = 0, explicit="SOSRA2", implicit="SKenCarp",
                        newton: NewtonOptions | None = None, forced_flags=None, diagnostics=None,
                        max_steps: int = 10 ** 7) -> Solution:
    """Adaptive solve that swaps between an explicit and an implicit SRA method.

    While explicit, the stage-based detector runs each accepted step; after
    ``K`` consecutive stiff flags the implicit method takes over.  While
    implicit, ``h ||J||_inf / 5 <= omega`` for ``K`` consecutive steps
    switches back.  ``forced_flags(step_index) -> bool`` overrides the
    detector (testing hook).
    """
    p = unwrap(problem)
    if p.noise_kind not in ("additive", "affine"):
        raise InputError("switching needs additive (or affine) noise")
    ctrl = ctrl or Controller()
    if newton is None:
        newton = NewtonOptions(abstol=ctrl.abstol, reltol=ctrl.reltol)
    tabs = {"explicit": _resolve(explicit), "implicit": _resolve(implicit)}
    runs = {k: _Runner(p, v, False, newton) for k, v in tabs.items()}
    det_problem = runs["explicit"].lamperti[0] if runs["explicit"].lamperti else p
    t0, T = p.tspan
    span = T - t0
    h_min = ctrl.h_min_factor * span
    stack = FutureNoiseStack(NoiseStream(seed, stream_id), p.m)
    x = p.x0.copy()
    t = t0
    W = np.zeros(p.m)
    ts, xs, Ws = [t0], [x.copy()], [W.copy()]
    mode = "explicit"
    sol = Solution(np.array([]), np.array([]), np.array([]), "switching")
    h = _initial_h(p, ctrl, np.asarray(p.f(t0, x), float),
                   np.broadcast_to(np.asarray(p.g(t0, x), float), x.shape), x)
    streak = 0
    rejections = 0
    accepted_index = 0
    attempt = 0
    while t < T:
        if attempt >= max_steps:
            sol.status = "max_steps"
            break
        tab = tabs[mode]
        q = ctrl.order_exponent if ctrl.order_exponent is not None else tab.order_exponent
        last = h >= (T - t) * (1 - 1e-12) or T - t - h < h_min
        if last:
            h = T - t
        pair = stack.pop_covering(h, t)
        nb = iterated_integrals(pair)
        attempt += 1
        failure = None
        try:
            r = runs[mode].step(t, x, h, nb)
            err = error_norm(r.errD, r.errN, x, r.x_next, ctrl)
            if not np.isfinite(err):
                raise StepFailure("nonfinite")
        except StepFailure as exc:
            err, failure = np.inf, exc.reason
            if exc.reason in ("newton", "linear_solve"):
                sol.n_newton_fail += 1
        if err <= 1.0:
            t_old = t
            t = T if last else t + h
            x_old, x = x, r.x_next
            W = W + pair.dW
            ts.append(t)
            xs.append(x.copy())
            Ws.append(W.copy())
            sol.n_accept += 1
            sol.methods_used.append(tab.name)
            if forced_flags is not None:
                flag = bool(forced_flags(accepted_index))
            elif mode == "explicit":
                if runs["explicit"].lamperti:
                    H0 = [runs["explicit"].lamperti[1].psi(H) for H in r.H0]
                else:
                    H0 = r.H0
                flag = estimate_stiffness(H0, r.H1, det_problem.f, det_problem.g,
                                          t_old, h, tab, omega).stiff_flag
            else:
                J = _jacobian(det_problem.jac, det_problem.f, t_old, x_old if not runs["implicit"].lamperti
                              else runs["implicit"].lamperti[1].psi(x_old))
                flag = h * np.linalg.norm(J, np.inf) / 5.0 > omega
            accepted_index += 1
            if flag:
                sol.stiff_t.append(t)
            rec = dict(t=t, h=h, err=err, accepted=True, stiff_flag=flag, method=tab.name)
            sol.diagnostics.append(rec)
            if diagnostics:
                diagnostics(rec)
            want_switch = flag if mode == "explicit" else not flag
            streak = streak + 1 if want_switch else 0
            h_new = propose_h(err, h, ctrl, q)
            if rejections:
                h_new = min(h_new, h)
            rejections = 0
            h = h_new
            if streak >= K:
                mode = "implicit" if mode == "explicit" else "explicit"
                sol.switches += 1
                streak = 0
        else:
            stack.unpop()
            sol.n_reject += 1
            rejections += 1
            sol.diagnostics.append(dict(t=t, h=h, err=err, accepted=False, stiff_flag=False,
                                        method=tab.name, failure=failure))
            h_new = h * ctrl.qmin if failure else propose_h(err, h, ctrl, q)
            if rejections > ctrl.max_rejections or h_new < h_min:
                sol.status = "failed"
                _finish(sol, ts, xs, Ws)
                raise IntegrationFailure(f"step at t={t!r} failed repeatedly", sol)
            h = h_new
    _finish(sol, ts, xs, Ws)
    return sol


def ensemble(problem, method, n_traj: int, ctrl=None, seed=0, **kw):
    """Run ``n_traj`` independent trajectories (stream id = trajectory index).

    Failures are kept as the partial solutions carried by the exception.
    """
    out = []
    for k in range(n_traj):
        try:
            out.append(integrate(problem, method, ctrl, seed=seed, stream_id=k, **kw))
        except IntegrationFailure as exc:
            out.append(exc.solution)
    return out


@dataclass
class EnsembleResult:
    """Per-trajectory outcome of :func:`integrate_ensemble`."""

    x_final: np.ndarray
    W_final: np.ndarray
    n_accept: np.ndarray
    n_reject: np.ndarray
    status: np.ndarray
    method: str
    span: float
    paths: list | None = None

    @property
    def mean_h(self) -> np.ndarray:
        return self.span / np.maximum(self.n_accept, 1)

    @property
    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.x_final)))

    @property
    def n_failed(self) -> int:
        return int(np.sum(self.status != "success"))


def _row_norm(errD, errN, x_old, x_new, ctrl):
    scale = ctrl.abstol + np.maximum(np.abs(x_old), np.abs(x_new)) * ctrl.reltol
    e = (ctrl.delta * errD + errN) / scale
    with np.errstate(all="ignore"):
        out = np.sqrt(np.mean(e * e, axis=-1))
    return np.where(np.isfinite(out) & np.all(np.isfinite(x_new), axis=-1), out, np.inf)


def _propose_vec(err, h, ctrl, q):
    """Row-wise :func:`propose_h`.

    The power is taken with Python's scalar ``**`` (as in ``propose_h``)
    rather than ``np.power``, whose vectorized kernels may round
    differently; this keeps ensemble rows bit-identical to single runs.
    """
    fac = np.array([ctrl.safety * float(e) ** (-q) if 0 < e < np.inf else 1.0 for e in err])
    fac = np.where(err == 0, ctrl.qmax, fac)
    fac = np.where(np.isfinite(err), np.clip(fac, ctrl.qmin, ctrl.qmax), ctrl.qmin)
    return h * fac


def integrate_ensemble(problem, method, n_traj: int, ctrl: Controller | None = None, seed: int = 0,
                       imex: bool = False, newton: NewtonOptions | None = None,
                       max_attempts: int = 10 ** 7, save_paths: bool = False) -> EnsembleResult:
    """Adaptive solve of ``n_traj`` trajectories advanced side by side.

    Each trajectory keeps its own clock, step size and noise stack (stream
    id = trajectory index), exactly as in :func:`integrate`; only the
    arithmetic is shared.  A trajectory whose step is rejected more than
    ``max_rejections`` times in a row is marked ``"failed"`` and frozen.
    """
    p = unwrap(problem)
    tab = _resolve(method)
    ctrl = ctrl or Controller()
    q = ctrl.order_exponent if ctrl.order_exponent is not None else tab.order_exponent
    if newton is None:
        newton = NewtonOptions(abstol=ctrl.abstol, reltol=ctrl.reltol)
    run = _Runner(p, tab, imex, newton)
    t0, T = p.tspan
    span = T - t0
    h_min = ctrl.h_min_factor * span
    m, d = p.m, p.d
    stacks = [FutureNoiseStack(NoiseStream(seed, k), m) for k in range(n_traj)]
    x = np.tile(p.x0, (n_traj, 1))
    t = np.full(n_traj, t0)
    W = np.zeros((n_traj, m))
    h0 = _initial_h(p, ctrl, np.asarray(p.f(t0, p.x0), float),
                    np.broadcast_to(np.asarray(p.g(t0, p.x0), float), p.x0.shape), p.x0)
    if ctrl.dt_max:
        h0 = min(h0, ctrl.dt_max)
    h = np.full(n_traj, h0)
    n_acc = np.zeros(n_traj, dtype=int)
    n_rej = np.zeros(n_traj, dtype=int)
    streak = np.zeros(n_traj, dtype=int)
    status = np.array(["running"] * n_traj, dtype=object)
    paths = [[(t0, p.x0.copy())] for _ in range(n_traj)] if save_paths else None
    attempts = 0
    while True:
        idx = np.flatnonzero(status == "running")
        if idx.size == 0 or attempts >= max_attempts:
            break
        attempts += 1
        remaining = T - t[idx]
        hk = h[idx]
        last = (hk >= remaining * (1 - 1e-12)) | (remaining - hk < h_min)
        hk = np.where(last, remaining, hk)
        pairs = [stacks[k].pop_covering(hk[i], np.ravel(t[k])[0]) for i, k in enumerate(idx)]
        dW = np.array([pr.dW for pr in pairs])
        dZ = np.array([pr.dZ for pr in pairs])
        nb = iterated_integrals(GaussianPair(dW, dZ, hk[:, None]))
        xk = x[idx]
        try:
            with np.errstate(all="ignore"):
                r = run.step(t[idx][:, None], xk, hk[:, None], nb, strict=False)
            err = _row_norm(r.errD, r.errN, xk, r.x_next, ctrl)
        except StepFailure:
            # a batched linear solve failed; retry every row with a smaller step
            err = np.full(idx.size, np.inf)
        acc = err <= 1.0
        h_new = _propose_vec(err, hk, ctrl, q)
        h_new = np.where(acc & (streak[idx] > 0), np.minimum(h_new, hk), h_new)
        a_idx = idx[acc]
        if a_idx.size:
            x[a_idx] = r.x_next[acc]
            t[a_idx] = np.where(last[acc], T, t[a_idx] + hk[acc])
            W[a_idx] += dW[acc]
            n_acc[a_idx] += 1
            streak[a_idx] = 0
            if save_paths:
                for k in a_idx:
                    paths[k].append((t[k], x[k].copy()))
        r_idx = idx[~acc]
        for k in r_idx:
            stacks[k].unpop()
        n_rej[r_idx] += 1
        streak[r_idx] += 1
        h[idx] = h_new
        if ctrl.dt_max:
            h[idx] = np.minimum(h[idx], ctrl.dt_max)
        dead = r_idx[(streak[r_idx] > ctrl.max_rejections) | (h[r_idx] < h_min)]
        status[dead] = "failed"
        status[idx[acc & (t[idx] >= T)]] = "success"
    status[status == "running"] = "max_attempts"
    return EnsembleResult(x, W, n_acc, n_rej, status, tab.name, span, paths)
