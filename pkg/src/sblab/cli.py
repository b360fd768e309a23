"""Command-line entry point.

Exit codes: 0 success, 1 invariant failure (or a run that diverged),
2 configuration / input error.  ``SB_LAB_OUT`` overrides every output
location: directories are replaced, file outputs keep their base name.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .experiments import (
    ARMS,
    ArmFailure,
    ConfigError,
    RunConfig,
    analyse_trace,
    run_arm,
    run_fig1,
    run_ode_vs_simulation,
    run_theory_suite,
    theory_paths_csv,
    theory_rows_csv,
    DEFAULT_THEORY_PATHS,
)
from .optimizers import read_trace_csv
from .sb_metrics import DEFAULT_THETA, detect_learning_times, entropy_report
from .upsampler import TrajectoryFormatError, build_plan, export_plan, ingest_trajectories, kmeans2, load_plan

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2


def _out_dir(arg: str | None, default: str) -> str:
    env = os.environ.get("SB_LAB_OUT")
    return env if env else (arg or default)


def _out_file(arg: str | None, default_name: str) -> str | None:
    env = os.environ.get("SB_LAB_OUT")
    if env:
        return os.path.join(env, os.path.basename(arg or default_name))
    return arg


def _write_json(obj, path: str | None):
    text = json.dumps(obj, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
        return
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _load_json(path: str | None):
    if path is None:
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "base_seed": args.seed, "seeds": None})
    return cfg


# -- subcommands -------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _run_config(args)
    seed = args.seed if args.seed is not None else cfg.base_seed
    out = _out_dir(args.out, cfg.out_dir)
    os.makedirs(out, exist_ok=True)
    res = run_arm(cfg, args.arm, seed)
    stem = os.path.join(out, f"{cfg.run_id}_{args.arm}_{seed}")
    res.trace.to_csv(stem + ".csv")
    report = res.to_row()
    report.update(
        {"arm": args.arm, "config_hash": cfg.config_hash(), "final_params": res.trace.final_params.to_dict()}
    )
    _write_json(report, stem + ".json")
    print(f"wrote {stem}.csv and {stem}.json")
    return EXIT_OK


def cmd_fig1(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args.out, cfg.out_dir)
    summary = run_fig1(cfg, jobs=args.jobs, out_dir=out)
    for arm, row in summary["arms"].items():
        print(f"{arm:13s} median test loss {row['median_test_loss']:.6g}  median entropy {row['median_entropy']}")
    print(json.dumps(summary["checks"]))
    return EXIT_OK


def cmd_theory(args) -> int:
    grid = _load_json(args.config)
    report = run_theory_suite(grid, keep_rows=True)
    out = _out_dir(args.out, "out")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "theory_cells.csv"), "w", encoding="utf-8") as fh:
        fh.write(theory_rows_csv(report.pop("rows")))
    paths = (grid or {}).get("paths", DEFAULT_THEORY_PATHS)
    with open(os.path.join(out, "theory_paths.csv"), "w", encoding="utf-8") as fh:
        fh.write(theory_paths_csv(**paths))
    _write_json(report, os.path.join(out, "theory_report.json"))
    c = report["checks"]
    print(
        f"cells={report['cells']} skipped={report['precondition_skipped']} "
        f"entropy {c['entropy_inequality']['pass']}/{c['entropy_inequality']['fail']} (pass/fail) "
        f"majorization {c['majorization']['pass']}/{c['majorization']['fail']}"
    )
    return EXIT_OK if report["ok"] else EXIT_INVARIANT


def cmd_ode_check(args) -> int:
    report = run_ode_vs_simulation(_load_json(args.config))
    out = _out_dir(args.out, "out")
    os.makedirs(out, exist_ok=True)
    _write_json(report, os.path.join(out, "ode_check.json"))
    for r in report["rows"]:
        print(f"{r['arm']:3s} feature {r['feature']}: max rel err {r['max_rel_err']:.4f} {'ok' if r['pass'] else 'FAIL'}")
    return EXIT_OK if report["ok"] else EXIT_INVARIANT


def cmd_cluster(args) -> int:
    trajs = ingest_trajectories(args.inp)
    assignment = kmeans2(trajs, args.features, seed=args.seed if args.seed is not None else 0, transform=args.transform)
    plan = build_plan(assignment, args.factor, args.mode)
    path = _out_file(args.out, "plan.json")
    if path is None:
        _write_json(plan.to_dict(), None)
    else:
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        export_plan(plan, path)
    counts = plan.counts
    print(f"hard={counts['hard']} easy={counts['easy']}", file=sys.stderr)
    return EXIT_OK


def cmd_upsample(args) -> int:
    try:
        plan = load_plan(args.plan)
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{args.plan}: cannot read plan ({exc})") from None
    new = plan.with_factor(args.factor, args.mode)
    _write_json(new.to_dict(), _out_file(args.out, "plan.json") if (args.out or os.environ.get("SB_LAB_OUT")) else None)
    print(f"effective size {new.effective_size:g}", file=sys.stderr)
    return EXIT_OK


def cmd_metrics(args) -> int:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    try:
        trace = read_trace_csv(args.inp, eta=args.eta if args.eta is not None else cfg.gd.learning_rate)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    times = detect_learning_times(trace, cfg.spec, cfg.n_ctx, args.theta)
    report = {"times": [None if t != t else float(t) for t in times.times], "entropy": None, "M": times.n_learned, "method": times.method}
    if times.n_learned:
        ent = entropy_report(times)
        report["entropy"] = ent.entropy
    report["steps"] = [int(s) for s in times.steps]
    _, drops, _, _ = analyse_trace(trace, cfg)
    report["drop_steps"] = [int(s) for s in drops]
    _write_json(report, _out_file(args.out, "metrics.json") if (args.out or os.environ.get("SB_LAB_OUT")) else None)
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sblab", description="Simplicity-bias laboratory for GD vs SAM on linear attention.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, jobs=False):
        sp.add_argument("--config", help="JSON config file")
        if seed:
            sp.add_argument("--seed", type=int, help="seed (fig1: base seed)")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="concurrent runs")
        sp.add_argument("--out", help="output location")

    sp = sub.add_parser("simulate", help="one training run")
    common(sp)
    sp.add_argument("--arm", choices=ARMS, default="gd")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fig1", help="GD vs SAM vs GD+upsampling over seeds")
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_fig1)

    sp = sub.add_parser("theory", help="learning-time entropy / majorization suite")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_theory)

    sp = sub.add_parser("ode-check", help="simulated early dynamics vs reduced ODEs")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_ode_check)

    sp = sub.add_parser("cluster", help="two-means over loss trajectories -> upsampling plan")
    sp.add_argument("--in", dest="inp", required=True, help="trajectory JSONL")
    sp.add_argument("--features", choices=("trajectory", "final"), default="trajectory")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--factor", type=float, default=2.0)
    sp.add_argument("--mode", choices=("duplicate", "weight"), default="duplicate")
    sp.add_argument(
        "--transform",
        choices=("none", "log_relative"),
        default="none",
        help="log_relative: cluster log(loss / first-checkpoint loss)",
    )
    sp.add_argument("--out", help="plan JSON path (stdout if omitted)")
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("upsample", help="re-factor an upsampling plan")
    sp.add_argument("--plan", required=True)
    sp.add_argument("--factor", type=float, required=True)
    sp.add_argument("--mode", choices=("duplicate", "weight"))
    sp.add_argument("--out", help="plan JSON path (stdout if omitted)")
    sp.set_defaults(func=cmd_upsample)

    sp = sub.add_parser("metrics", help="learning times and entropy from a trace CSV")
    sp.add_argument("--in", dest="inp", required=True, help="trace CSV")
    sp.add_argument("--config", help="run config (spectrum and N)")
    sp.add_argument("--theta", type=float, default=DEFAULT_THETA)
    sp.add_argument("--eta", type=float, help="learning rate (default: the gd arm's)")
    sp.add_argument("--out", help="report JSON path (stdout if omitted)")
    sp.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TrajectoryFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArmFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
