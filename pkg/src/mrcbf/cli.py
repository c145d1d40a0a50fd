"""Command-line front end: scenario runs, field exports, oracle suites."""
from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, build_context, load_config, provenance_lines
from .oracles import SUITES
from .perception import required_sample_count
from .robust import (admissible_error_state, export_field_csv,
                     paired_admissible_error)
from .sim import export_trajectory_csv, phase_portrait_csv, run, safety_audit


def _out_dir(args, cfg) -> Path:
    out = args.out_dir or os.environ.get("MRCBF_OUT_DIR") \
        or cfg["output"]["out_dir"]
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _say(args, *msg):
    if not args.quiet:
        print(*msg)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    ctx = build_context(cfg, seed_override=args.seed)
    out = _out_dir(args, cfg)
    prefix = cfg["output"]["prefix"]
    prov = provenance_lines(cfg, ctx.scenario.noise_seed)

    eps_fn = ctx.eps_of_xhat if ctx.scenario.eps_mode == "nonparametric" else None
    try:
        log = run(ctx.scenario, ctx.sys, ctx.barriers, ctx.lips, ctx.gains,
                  model=ctx.model, regressor=ctx.regressor,
                  eps_of_xhat=eps_fn)
    except (RuntimeError, FloatingPointError) as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return 1

    report = safety_audit(log)
    traj_path = out / f"{prefix}_trajectory.csv"
    export_trajectory_csv(traj_path, log, header_lines=prov)
    phase_path = out / f"{prefix}_phase.csv"
    phase_portrait_csv(phase_path, log, ctx.barrier_cfg.half_width,
                       ctx.barrier_cfg.rate_gain, ctx.barrier_cfg.theta_star,
                       header_lines=prov)

    crossing = ("none" if math.isnan(report.first_crossing_time)
                else f"{report.first_crossing_time:.17g}")
    audit_path = out / f"{prefix}_audit.txt"
    with open(audit_path, "w") as fh:
        for line in prov:
            fh.write(f"# {line}\n")
        fh.write(f"scenario {ctx.scenario.kind} with filter "
                 f"{ctx.scenario.filter}: "
                 + ("SAFETY VIOLATED" if report.min_hb_x < 0 else "safe")
                 + "\n\n")
        fh.write(f"min_hb_x={report.min_hb_x:.17g}\n")
        fh.write(f"min_hb_xhat={report.min_hb_xhat:.17g}\n")
        fh.write(f"first_crossing_time={crossing}\n")
        fh.write(f"max_estimation_error={report.max_estimation_error:.17g}\n")
        fh.write(f"max_slack={report.max_slack:.17g}\n")
        fh.write(f"infeasible_steps={report.infeasible_steps}\n")
        fh.write(f"records={report.record_count}\n")
        fh.write(f"safety_violated={'true' if report.min_hb_x < 0 else 'false'}\n")

    _say(args, f"wrote {traj_path}, {phase_path}, {audit_path}")
    _say(args, f"min h_b(x) = {report.min_hb_x:.6g}; "
               f"violation: {'yes' if report.min_hb_x < 0 else 'no'}; "
               f"max estimation error = {report.max_estimation_error:.4g}")
    return 0


def cmd_field(args) -> int:
    cfg = load_config(args.config)
    ctx = build_context(cfg, seed_override=args.seed)
    out = _out_dir(args, cfg)
    bcfg = ctx.barrier_cfg
    h1, h2 = ctx.barriers

    fld = cfg["field"]
    span_t = fld["theta_span"] * bcfg.half_width
    span_d = fld["thetadot_span"] * 2.0 * bcfg.rate_gain * bcfg.half_width
    theta_axis = np.linspace(bcfg.theta_star - span_t,
                             bcfg.theta_star + span_t, fld["resolution"])
    thetadot_axis = np.linspace(-span_d, span_d, fld["resolution"])

    def embed(th, td):
        return np.array([0.0, 0.0, th, td])

    if args.which == "eps_bar":
        def value(x):
            return min(admissible_error_state(h1, ctx.sys, x, ctx.lips),
                       admissible_error_state(h2, ctx.sys, x, ctx.lips))
    elif args.which == "prop1":
        def value(x):
            return paired_admissible_error(h1, h2, ctx.sys, x, ctx.lips)
    else:
        if ctx.bound is None:
            from .perception import NonparametricBound
            per = cfg["perception"]
            bound = NonparametricBound(L=per["bound_L"],
                                       sigma=per["bound_sigma"],
                                       gamma=per["gamma"])
        else:
            bound = ctx.bound

        def value(x):
            return max(required_sample_count(h1, ctx.sys, x, ctx.lips, bound),
                       required_sample_count(h2, ctx.sys, x, ctx.lips, bound))

    field = np.empty((theta_axis.size, thetadot_axis.size))
    for i, th in enumerate(theta_axis):
        for j, td in enumerate(thetadot_axis):
            field[i, j] = value(embed(th, td))

    path = _out_dir(args, cfg) / f"{cfg['output']['prefix']}_{args.which}.csv"
    export_field_csv(path, theta_axis, thetadot_axis, field,
                     header_lines=provenance_lines(cfg, args.seed or 0)
                     + [f"field={args.which}"])
    _say(args, f"wrote {path}")
    return 0


def cmd_oracle(args) -> int:
    suite = SUITES[args.suite]
    result = suite(seed=args.seed or 0)
    print(result.summary())
    if result.failing_seeds:
        print("failing instance indices:",
              " ".join(map(str, result.failing_seeds)))
    return 0 if result.passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mrcbf",
        description="Measurement-robust barrier-filter scenarios, "
                    "admissible-error fields, and validation oracles.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate a scenario config")
    p_run.add_argument("config")
    p_run.set_defaults(func=cmd_run)

    p_field = sub.add_parser("field", help="export an error-bound field grid")
    p_field.add_argument("config")
    p_field.add_argument("--which", required=True,
                         choices=("eps_bar", "prop1", "required_count"))
    p_field.set_defaults(func=cmd_field)

    p_oracle = sub.add_parser("oracle", help="run a brute-force oracle suite")
    p_oracle.add_argument("suite", choices=sorted(SUITES))
    p_oracle.set_defaults(func=cmd_oracle)

    for p in (p_run, p_field, p_oracle):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--quiet", action="store_true")

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
