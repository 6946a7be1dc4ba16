"""Command-line front end.

Exit codes: 0 success, 2 invalid input, 3 integration failure,
4 tableau verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import re
import sys
import time

import numpy as np

from . import harness, tableaus
from .adaptive import Controller, integrate, integrate_ensemble
from .errors import InputError, IntegrationFailure
from .problems import REGISTRY, get_problem, parse_params, unwrap

SCHEMA = "sosrk-report/1"

EPILOG = """\
CSV columns
  solve           traj,t,x1..xd           (full path for --traj 1, final states otherwise)
  converge        method,dt,error,slope
  workprec        method,setting,value,error,ci95,wall_per_traj,n_accept,n_reject,flagged
  stabregion      z,w,value               (plus <out>.pgm raster and <out>.json area report)
  stiffness       t,stiff_flag,h,fnorm
  verify-tableaus method,condition,residual,ok
"""


def parse_dts(text):
    """``"2^-2..2^-10"`` (dyadic range) or a comma list of numbers."""
    m = re.fullmatch(r"\s*2\^(-?\d+)\s*\.\.\s*2\^(-?\d+)\s*", text)
    if m:
        a, b = int(m.group(1)), int(m.group(2))
        step = -1 if b < a else 1
        return [2.0 ** k for k in range(a, b + step, step)]
    try:
        out = [float(eval_pow(v)) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"cannot parse step sizes {text!r}") from None
    if not out or any(v <= 0 for v in out):
        raise InputError("step sizes must be positive")
    return out


def eval_pow(v):
    v = v.strip()
    m = re.fullmatch(r"(\d+(?:\.\d+)?)\^(-?\d+(?:\.\d+)?)", v)
    if m:
        return float(m.group(1)) ** float(m.group(2))
    return float(v)


def parse_list(text, conv=float):
    try:
        return [conv(eval_pow(v)) if conv is float else conv(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"cannot parse list {text!r}") from None


def _emit(rows, fmt, out, meta):
    if fmt == "json":
        text = json.dumps(dict(schema=SCHEMA, **meta, rows=rows), indent=2, default=float)
    else:
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
        text = buf.getvalue()
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _ctrl(args):
    abstol = args.abstol if args.abstol is not None else args.tol
    reltol = args.reltol if args.reltol is not None else args.tol
    return Controller(abstol, reltol)


def _problem(args):
    return get_problem(args.problem, **parse_params(args.params))


def cmd_solve(args):
    prob = _problem(args)
    p = unwrap(prob)
    rows = []
    if args.dt:
        span = p.tspan[1] - p.tspan[0]
        n = max(1, int(round(span / eval_pow(args.dt))))
        dW, I10 = harness.fine_path(args.traj, n, p.m, span / n, args.seed)
        t, X = harness.fixed_step_solve(prob, args.method, span / n, dW, I10, imex=args.imex)
        for k in range(args.traj):
            idx = range(len(t)) if args.traj == 1 else [len(t) - 1]
            for i in idx:
                rows.append(dict(traj=k, t=float(t[i]), **{f"x{j + 1}": float(v) for j, v in enumerate(X[i, k])}))
    elif args.traj == 1:
        sol = integrate(prob, args.method, _ctrl(args), seed=args.seed, imex=args.imex)
        for ti, xi in zip(sol.t, sol.x):
            rows.append(dict(traj=0, t=float(ti), **{f"x{j + 1}": float(v) for j, v in enumerate(xi)}))
    else:
        res = integrate_ensemble(prob, args.method, args.traj, _ctrl(args), seed=args.seed, imex=args.imex)
        if res.n_failed:
            raise IntegrationFailure(f"{res.n_failed} of {args.traj} trajectories failed")
        for k in range(args.traj):
            rows.append(dict(traj=k, t=p.tspan[1], **{f"x{j + 1}": float(v) for j, v in enumerate(res.x_final[k])}))
    _emit(rows, args.format, args.out, dict(command="solve", problem=args.problem, method=args.method,
                                            seed=args.seed))


def cmd_converge(args):
    prob = _problem(args)
    dts = parse_dts(args.dt or "2^-2..2^-10")
    rows, meta = [], []
    for method in parse_list(args.method, str):
        r = harness.strong_convergence(prob, method, dts, args.traj, args.seed, imex=args.imex)
        rows.extend(r.rows())
        meta.append(dict(method=method, slope=r.slope))
        print(f"{method}: slope {r.slope:.3f}", file=sys.stderr)
    _emit(rows, args.format, args.out, dict(command="converge", problem=args.problem, seed=args.seed,
                                            n_traj=args.traj, fits=meta))


def cmd_workprec(args):
    prob = _problem(args)
    methods = parse_list(args.method, str)
    if args.dt:
        rows = harness.work_precision(prob, methods, dts=parse_dts(args.dt), n_traj=args.traj,
                                      error_kind=args.error_kind, seed=args.seed)
    else:
        tols = parse_list(args.tols) if args.tols else [args.tol]
        rows = harness.work_precision(prob, methods, tolerances=tols, n_traj=args.traj,
                                      error_kind=args.error_kind, seed=args.seed)
    _emit([r.as_dict() for r in rows], args.format, args.out,
          dict(command="workprec", problem=args.problem, seed=args.seed))


def cmd_stabregion(args):
    prefix = args.out or f"{args.method}_{args.criterion}"
    rep, grid = harness.stability_raster(args.method, args.criterion, args.N, args.M, args.dx, prefix)
    print(json.dumps(dict(schema=SCHEMA, **rep), default=float))


def cmd_stiffness(args):
    prob = _problem(args)
    rows, sol = harness.stiffness_trace(prob, args.method, args.tol, args.omega, args.seed,
                                        abstol=args.abstol, reltol=args.reltol)
    _emit(rows, args.format, args.out, dict(command="stiffness", problem=args.problem,
                                            method=args.method, omega=args.omega, seed=args.seed))


def verify_tableaus(names=None, tol=1e-10, exact_tol=1e-13):
    """Order-condition residuals for the named tableaus; returns ``(rows, ok)``."""
    rows = []
    ok = True
    for name in names or tableaus.CORE_METHODS:
        tab = tableaus.builtin(name)
        limit = exact_tol if tab.name == "SKenCarp" else tol
        for cond, res in tableaus.check_order_conditions(tab).items():
            good = abs(res) <= limit
            ok &= good
            rows.append(dict(method=tab.name, condition=cond, residual=float(res), ok=bool(good)))
    return rows, ok


def cmd_verify(args):
    t1 = time.perf_counter()
    names = parse_list(args.method, str) if args.method else None
    rows, ok = verify_tableaus(names)
    _emit(rows, args.format, args.out, dict(command="verify-tableaus", passed=bool(ok)))
    worst = {}
    for r in rows:
        worst[r["method"]] = max(worst.get(r["method"], 0.0), abs(r["residual"]))
    for k, v in worst.items():
        print(f"{k:10s} max residual {v:.2e}", file=sys.stderr)
    print(f"{'PASS' if ok else 'FAIL'} ({time.perf_counter() - t1:.2f} s)", file=sys.stderr)
    return 0 if ok else 4


def build_parser():
    ap = argparse.ArgumentParser(prog="sosrk", description="Adaptive stochastic Runge-Kutta solvers",
                                 epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp, method_default="SOSRI", problem=True):
        sp.add_argument("--method", default=method_default,
                        help=f"tableau name(s), comma separated; one of {', '.join(tableaus.ALL_METHODS)}")
        if problem:
            sp.add_argument("--problem", default="additive_test", help=f"one of {', '.join(REGISTRY)}")
            sp.add_argument("--params", default=None, help="problem overrides, k=v,k2=v2")
        sp.add_argument("--tol", type=float, default=1e-2)
        sp.add_argument("--abstol", type=float, default=None)
        sp.add_argument("--reltol", type=float, default=None)
        sp.add_argument("--dt", default=None, help="fixed step(s): 0.01, 2^-3, or 2^-2..2^-10")
        sp.add_argument("--traj", type=int, default=1)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--omega", type=float, default=5.0)
        sp.add_argument("--out", default=None)
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--imex", action="store_true", help="use the problem's implicit/explicit split")

    sp = sub.add_parser("solve", help="integrate a problem")
    common(sp)
    sp.set_defaults(func=cmd_solve)
    sp = sub.add_parser("converge", help="strong convergence sweep")
    common(sp)
    sp.set_defaults(func=cmd_converge, traj=1000)
    sp = sub.add_parser("workprec", help="work-precision rows")
    common(sp)
    sp.add_argument("--tols", default=None, help="comma separated tolerances")
    sp.add_argument("--error-kind", choices=("strong_l2", "weak_final"), default="strong_l2")
    sp.set_defaults(func=cmd_workprec, traj=100)
    sp = sub.add_parser("stabregion", help="stability-region raster")
    common(sp, problem=False)
    sp.add_argument("--criterion", choices=("drift", "meansquare"), default="drift")
    sp.add_argument("--N", type=float, default=6.0)
    sp.add_argument("--M", type=float, default=3.0)
    sp.add_argument("--dx", type=float, default=0.05)
    sp.set_defaults(func=cmd_stabregion)
    sp = sub.add_parser("stiffness", help="stiffness-detection trace")
    common(sp, method_default="SOSRA2")
    sp.set_defaults(func=cmd_stiffness)
    sp = sub.add_parser("verify-tableaus", help="check order conditions of the shipped tableaus")
    common(sp, method_default=None, problem=False)
    sp.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        if getattr(args, "traj", 1) < 1:
            raise InputError("--traj must be >= 1")
        rc = args.func(args)
        return rc or 0
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except IntegrationFailure as exc:
        print(f"integration failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
