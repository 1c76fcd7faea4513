"""Command-line surface.

Subcommands:
  mech check <file>                 condition report as JSON
  skeleton derive <file>            branching rate and leading offspring atoms
  simulate bbm|sbm|csbp ...         raw martingale statistics into a CSV
  cfsolve --family ...              martingale-limit CF fixed point to CSV
  limitcf --family ...              finite-t or limiting fluctuation CF to CSV
  fluct run <config.json>           full experiment; exit code reflects outcome
  report show <dir>                 pretty-print a saved report

Exit codes: 0 pass, 1 fail, 2 unreliable, 3 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from . import analytic, lab, simulate
from .mechanism import load_mechanism, normalize
from .skeleton import derive_offspring

USAGE_ERROR = 3


def _mech_from_path(path: str):
    mech = load_mechanism(path)
    if not mech.normalized:
        mech, _ = normalize(mech)
    return mech


def cmd_mech_check(args) -> int:
    from .mechanism import check_conditions

    mech = _mech_from_path(args.file)
    report = check_conditions(mech)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_skeleton_derive(args) -> int:
    mech = _mech_from_path(args.file)
    dist = derive_offspring(mech, tail_tol=args.tail_tol)
    head = {f"p{k}": float(p) for k, p in zip(range(2, 22), dist.p[:20])}
    print(json.dumps({
        "q": dist.q,
        "kmax": dist.kmax,
        "tail_mass": dist.tail_mass,
        "mean_exact": dist.mean_exact,
        "mean_truncated": dist.mean_truncated(),
        "p_head": head,
    }, indent=2))
    return 0


def cmd_simulate(args) -> int:
    lam = args.lam
    rows = []
    if args.process == "csbp":
        rng = np.random.default_rng(np.random.SeedSequence((args.seed, 0)))
        masses = simulate.csbp_quadratic_batch(1.0, [args.t], args.reps, rng)[:, 0]
        for r, m in enumerate(masses):
            w = m * math.exp(-args.t)
            rows.append((r, args.seed, args.t, 0.0, w, math.nan, math.nan, math.nan, 0))
    else:
        if args.process == "bbm":
            mech = _mech_from_path(args.mech) if args.mech else analytic.family_mechanism(
                args.family, args.beta)
            dist = derive_offspring(mech)
        for r in range(args.reps):
            seed_r = simulate.rep_seed(args.seed, r)
            if args.process == "bbm":
                clouds = simulate.simulate_bbm(dist, args.t, [args.t], cap=args.cap, seed=seed_r)
            else:
                clouds = simulate.simulate_sbm_particles(args.family, args.N, args.t,
                                                         [args.t], cap=args.cap,
                                                         seed=seed_r, beta=args.beta)
            c = clouds[-1]
            if c.truncated:
                rows.append((r, args.seed, args.t, lam,
                             math.nan, math.nan, math.nan, math.nan, 1))
                continue
            w = simulate.additive_martingale(c, lam)
            dp = simulate.derivative_martingale(c, +1)
            dm = simulate.derivative_martingale(c, -1)
            mx = simulate.centered_max(c) if c.count else math.nan
            rows.append((r, args.seed, args.t, lam, w, dp, dm, mx, 0))
    header = "rep,seed,t,lambda,Z_or_W,dW_plus,dW_minus,max_centered,truncated"
    out = args.out or "-"
    text = header + "\n" + "\n".join(
        ",".join(repr(v) if isinstance(v, int) else f"{v:.12g}" for v in row) for row in rows)
    if out == "-":
        print(text)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_cfsolve(args) -> int:
    if args.mech:
        mech = _mech_from_path(args.mech)
    else:
        mech = analytic.family_mechanism(args.family, args.beta)
    sol = analytic.solve_w0(mech, theta_max=args.theta_max, tol=args.tol)
    grid = lab.symmetric_grid(args.theta_max, args.points)
    f = sol.grid_function(grid)
    _write_cf_csv(args.out, f)
    print(f"residual sup {sol.residual_sup:.3e}; wrote {grid.size} nodes to {args.out}")
    return 0


def cmd_limitcf(args) -> int:
    grid = lab.symmetric_grid(args.theta_max, args.points)
    if args.t is not None:
        f = analytic.tail_fluctuation_cf(args.family, args.t, grid, beta=args.beta)
    else:
        f = analytic.limit_tail_cf(args.family, grid, beta=args.beta)
    _write_cf_csv(args.out, f)
    print(f"wrote {grid.size} nodes to {args.out}")
    return 0


def _write_cf_csv(path: str, f) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("theta,re,im\n")
        for g, v in zip(f.grid, f.values):
            fh.write(f"{g:.12g},{v.real:.12g},{v.imag:.12g}\n")


def cmd_fluct_run(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        cfg = lab.ExperimentConfig.from_json(fh.read())
    report = lab.run_experiment(cfg)
    print(report.to_json())
    return report.exit_code


def cmd_report_show(args) -> int:
    import os

    path = os.path.join(args.dir, "report.json")
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    data.pop("ecf_table", None)
    print(json.dumps(data, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="branchlab",
                                description="branching-process fluctuation laboratory")
    sub = p.add_subparsers(dest="cmd", required=True)

    mech = sub.add_parser("mech", help="mechanism tools")
    mech_sub = mech.add_subparsers(dest="sub", required=True)
    mc = mech_sub.add_parser("check", help="run every condition check")
    mc.add_argument("file")
    mc.set_defaults(fn=cmd_mech_check)

    sk = sub.add_parser("skeleton", help="skeleton offspring law")
    sk_sub = sk.add_subparsers(dest="sub", required=True)
    sd = sk_sub.add_parser("derive")
    sd.add_argument("file")
    sd.add_argument("--tail-tol", type=float, default=1e-9, dest="tail_tol")
    sd.set_defaults(fn=cmd_skeleton_derive)

    sim = sub.add_parser("simulate", help="raw simulation to CSV")
    sim.add_argument("process", choices=["bbm", "sbm", "csbp"])
    sim.add_argument("--mech", default=None)
    sim.add_argument("--family", default="quadratic", choices=["quadratic", "stable"])
    sim.add_argument("--beta", type=float, default=0.5)
    sim.add_argument("--lam", type=float, default=0.0)
    sim.add_argument("--t", type=float, required=True)
    sim.add_argument("--reps", type=int, default=1000)
    sim.add_argument("--N", type=int, default=100)
    sim.add_argument("--cap", type=int, default=simulate.DEFAULT_CAP)
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--out", default=None)
    sim.set_defaults(fn=cmd_simulate)

    cf = sub.add_parser("cfsolve", help="martingale-limit CF fixed point")
    cf.add_argument("--mech", default=None)
    cf.add_argument("--family", default="quadratic", choices=["quadratic", "stable"])
    cf.add_argument("--beta", type=float, default=0.5)
    cf.add_argument("--theta-max", type=float, default=10.0, dest="theta_max")
    cf.add_argument("--tol", type=float, default=1e-8)
    cf.add_argument("--points", type=int, default=201)
    cf.add_argument("--out", required=True)
    cf.set_defaults(fn=cmd_cfsolve)

    lc = sub.add_parser("limitcf", help="fluctuation CF (finite t or limit)")
    lc.add_argument("--family", required=True, choices=["quadratic", "stable"])
    lc.add_argument("--beta", type=float, default=0.5)
    lc.add_argument("--t", type=float, default=None)
    lc.add_argument("--theta-max", type=float, default=5.0, dest="theta_max")
    lc.add_argument("--points", type=int, default=101)
    lc.add_argument("--out", required=True)
    lc.set_defaults(fn=cmd_limitcf)

    fl = sub.add_parser("fluct", help="fluctuation experiments")
    fl_sub = fl.add_subparsers(dest="sub", required=True)
    fr = fl_sub.add_parser("run")
    fr.add_argument("config")
    fr.set_defaults(fn=cmd_fluct_run)

    rp = sub.add_parser("report", help="saved reports")
    rp_sub = rp.add_subparsers(dest="sub", required=True)
    rs = rp_sub.add_parser("show")
    rs.add_argument("dir")
    rs.set_defaults(fn=cmd_report_show)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0,) else 0
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
