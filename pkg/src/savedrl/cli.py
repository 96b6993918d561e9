"""Command line entry point: ``savedrl <subcommand> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime error,
4 evaluation gate failure. Errors print one line ``error: <kind>: <reason>``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import nn
from .config import ConfigError, RunConfig, apply_overrides, load_config, profile_config
from .demos import DemoFormatError, DemoGenerationError, DemoParams, generate_demos, save_demos
from .envs import ControllerError
from .trainer import (
    AGGREGATE_HEADER,
    METRICS_HEADER,
    RunError,
    aggregate,
    evaluate,
    load_run_state,
    read_metrics,
    run_experiment,
    summarize,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GATE = 0, 2, 3, 4
SWEEP_PARAMS = ("alpha", "beta", "demo_count", "demo_quality")


class UsageError(Exception):
    pass


class GateError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds or min(seeds) < 0:
        raise argparse.ArgumentTypeError("seeds must be non-negative integers")
    return seeds


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (as written by print-config)")
    p.add_argument("--profile", choices=("repro", "ci"), default=None)
    p.add_argument("--task", type=int, choices=(1, 2, 3, 4), default=None)
    p.add_argument("--mode", default=None)
    p.add_argument("--seeds", type=_seeds, default=None, help="comma separated, e.g. 0,1,2")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="savedrl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-demos", help="generate demonstrations")
    g.add_argument("--task", type=int, choices=(1, 2, 3, 4), required=True)
    g.add_argument("--count", type=int, default=None)
    g.add_argument("--profile", choices=("repro", "ci"), default="repro")
    g.add_argument("--seed", type=int, default=1000)
    g.add_argument("--noise-std", type=float, default=0.2)
    g.add_argument("--detour-scale", type=float, default=1.0)
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="run training for every seed")
    _add_run_options(t)
    t.add_argument("--out", required=True)
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--force", action="store_true", help="start over in a directory holding another run")

    e = sub.add_parser("eval", help="evaluate the latest checkpoints of a run")
    e.add_argument("--out", required=True, help="run directory written by train")
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--max-cost", type=float, default=None, help="gate: mean cost must not exceed")
    e.add_argument("--min-success", type=float, default=None, help="gate: success rate must reach")
    e.add_argument("--max-violation", type=float, default=None, help="gate: violation rate must not exceed")

    s = sub.add_parser("sweep", help="train once per parameter value")
    _add_run_options(s)
    s.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    s.add_argument("--values", required=True, help="comma separated values")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--force", action="store_true")

    x = sub.add_parser("export-plots", help="tidy CSVs from metrics files")
    x.add_argument("--metrics", required=True, help="directory searched for seed_*/metrics.csv")
    x.add_argument("--out", required=True)

    c = sub.add_parser("print-config", help="print the effective configuration as JSON")
    _add_run_options(c)
    return parser


def resolve_config(args) -> RunConfig:
    """Config file or profile defaults, then flags, then ``--set`` overrides."""
    if args.config:
        cfg = load_config(args.config)
        for flag, key in (("profile", "profile"), ("task", "task_id"), ("mode", "mode")):
            if getattr(args, flag) is not None and getattr(args, flag) != getattr(cfg, key):
                raise ConfigError(f"--{flag} conflicts with {args.config}; use --set to change it")
    else:
        cfg = profile_config(args.profile or "repro", args.task or 1, args.mode or "saved")
    sets = list(args.overrides)
    if args.seeds is not None:
        sets.append("seeds=" + json.dumps(args.seeds))
    if args.iterations is not None:
        sets.append(f"n_iterations={args.iterations}")
    if args.alpha is not None:
        sets.append(f"alpha={args.alpha}")
    if args.beta is not None:
        sets.append(f"beta={args.beta}")
    if getattr(args, "out", None):
        sets.append("out_dir=" + json.dumps(str(args.out)))
    return apply_overrides(cfg, sets) if sets else cfg


def cmd_gen_demos(args) -> int:
    from .envs import ci_task, default_task

    spec = ci_task(args.task) if args.profile == "ci" else default_task(args.task)
    count = args.count
    if count is None:
        from .demos import DEFAULT_COUNTS

        count = DEFAULT_COUNTS[args.task]
    if count < 1:
        raise UsageError("--count must be positive")
    params = DemoParams.for_task(spec, detour_scale=args.detour_scale, noise_std=args.noise_std)
    demos = generate_demos(spec, count, params, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"demos_task{args.task}.jsonl"
    save_demos(demos, path)
    c = demos.costs()
    print(f"wrote {len(demos)} demos to {path}: mean cost {c.mean():.2f}, min {c.min()}, max {c.max()}")
    return EXIT_OK


def _check_out_dir(out: Path, cfg: RunConfig, force: bool) -> None:
    existing = out / "config.json"
    if existing.exists() and not force:
        try:
            old = RunConfig.from_dict(json.loads(existing.read_text()))
        except (ConfigError, json.JSONDecodeError):
            old = None
        if old is None or old.config_hash() != cfg.config_hash():
            raise ConfigError(f"{out} holds a run with a different configuration; pass --force to overwrite")


def _clear_run(out: Path) -> None:
    import shutil

    for p in out.glob("seed_*"):
        shutil.rmtree(p)
    for name in ("config.json", "aggregate.csv"):
        (out / name).unlink(missing_ok=True)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    _check_out_dir(out, cfg, args.force)
    if args.force:
        _clear_run(out)
    res = run_experiment(cfg, out, jobs=args.jobs, verbose=args.verbose)
    rows = aggregate(res["metrics"])
    last = rows[-1] if rows else None
    msg = f"trained {len(cfg.seeds)} seed(s) x {cfg.n_iterations} iterations into {out}"
    if last:
        msg += f"; final mean cost {last['mean_cost']:.1f}, success rate {last['success_rate']:.2f}"
    print(msg)
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.out)
    cfg = load_config(run / "config.json")
    episodes = cfg.eval_episodes if args.episodes is None else args.episodes
    if episodes < 1:
        raise UsageError("--episodes must be positive")
    all_rows = []
    with open(run / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", *METRICS_HEADER])
        for seed in cfg.seeds:
            state = load_run_state(cfg, run / f"seed_{seed}")
            rows = evaluate(state, episodes)
            for r in rows:
                w.writerow([seed, *r.csv_row()])
            all_rows.extend(rows)
    s = summarize(all_rows)
    print(json.dumps(s, sort_keys=True))
    failed = []
    if args.max_cost is not None and s["mean_cost"] > args.max_cost:
        failed.append(f"mean cost {s['mean_cost']:.2f} > {args.max_cost}")
    if args.min_success is not None and s["success_rate"] < args.min_success:
        failed.append(f"success rate {s['success_rate']:.2f} < {args.min_success}")
    if args.max_violation is not None and s["violation_rate"] > args.max_violation:
        failed.append(f"violation rate {s['violation_rate']:.2f} > {args.max_violation}")
    if failed:
        raise GateError("; ".join(failed))
    return EXIT_OK


def sweep_override(param: str, value: str) -> tuple[str, list[str]]:
    """Label and ``--set`` overrides for one sweep value."""
    try:
        v = float(value)
    except ValueError:
        raise ConfigError(f"sweep value {value!r} is not a number") from None
    if param == "alpha":
        return f"alpha_{value}", [f"alpha={v}"]
    if param == "beta":
        return f"beta_{value}", [f"beta={v}"]
    if param == "demo_count":
        if not v.is_integer() or v < 1:
            raise ConfigError(f"demo_count value {value!r} must be a positive integer")
        return f"demo_count_{int(v)}", [f"demos.count={int(v)}"]
    # demo quality: scale demo noise and waypoint detour together
    if v <= 0:
        raise ConfigError(f"demo_quality value {value!r} must be positive")
    return f"demo_quality_{value}", [f"demos.noise_std={0.2 * v}", f"demos.detour_scale={v}"]


def cmd_sweep(args) -> int:
    base = resolve_config(args)
    out = Path(args.out)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    plans = []
    for v in values:
        label, sets = sweep_override(args.param, v)
        plans.append((v, out / label, apply_overrides(base, sets)))
    busy = [str(d) for _, d, _ in plans if d.exists() and any(d.iterdir())]
    if busy and not args.force:
        raise ConfigError(f"output directories already exist: {', '.join(busy)}; pass --force to overwrite")
    summary = []
    for v, d, cfg in plans:
        if args.force:
            _clear_run(d) if d.exists() else None
        res = run_experiment(cfg, d, jobs=args.jobs, resume=not args.force, verbose=args.verbose)
        rows = aggregate(res["metrics"])
        summary.append(
            {
                "value": v,
                "mean_cost": float(np.mean([r["mean_cost"] for r in rows])) if rows else float("nan"),
                "success_rate": float(np.mean([r["success_rate"] for r in rows])) if rows else float("nan"),
                "violation_rate": float(np.mean([r["violation_rate"] for r in rows])) if rows else float("nan"),
                "iterations": len(rows),
            }
        )
        with open(out / f"sweep_{args.param}_by_iteration.csv", "a" if v != values[0] else "w", newline="") as fh:
            w = csv.DictWriter(fh, ["value", *AGGREGATE_HEADER])
            if v == values[0]:
                w.writeheader()
            for r in rows:
                w.writerow({"value": v, **r})
    with open(out / f"sweep_{args.param}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["value", "mean_cost", "success_rate", "violation_rate", "iterations"])
        w.writeheader()
        w.writerows(summary)
    for s in summary:
        print(json.dumps({"param": args.param, **s}, sort_keys=True))
    return EXIT_OK


EXPORT_METRICS = ("cost", "success", "violation", "wall_time_s")


def cmd_export_plots(args) -> int:
    root = Path(args.metrics)
    files = sorted(root.rglob("seed_*/metrics.csv"))
    if not files:
        raise RunError(f"{root}: no seed_*/metrics.csv files found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    by_mode: dict[str, list] = {}
    n_long = 0
    with open(out / "long.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "iteration", "metric", "value"])
        for f in files:
            rows = read_metrics(f)
            run = f.parent.relative_to(root).as_posix()
            mode = "unknown"
            cfg_path = f.parent.parent / "config.json"
            if cfg_path.exists():
                mode = json.loads(cfg_path.read_text()).get("mode", "unknown")
            by_mode.setdefault(mode, []).extend(rows)
            for r in rows:
                vals = (r.cost, int(r.success), int(r.violation), r.wall_time_s)
                for name, val in zip(EXPORT_METRICS, vals):
                    w.writerow([run, r.iteration, name, val])
                    n_long += 1
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "episodes", "mean_cost", "success_rate", "violation_rate"])
        for mode in sorted(by_mode):
            s = summarize(by_mode[mode])
            w.writerow([mode, s["episodes"], s["mean_cost"], s["success_rate"], s["violation_rate"]])
    print(f"wrote {n_long} long-format rows from {len(files)} metrics files to {out}")
    return EXIT_OK


def cmd_print_config(args) -> int:
    args.out = None
    print(resolve_config(args).to_json())
    return EXIT_OK


COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "export-plots": cmd_export_plots,
    "print-config": cmd_print_config,
}


def _one_line(e: BaseException) -> str:
    return " ".join(str(e).split())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: usage: {_one_line(e)}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as e:
        print(f"error: config: {_one_line(e)}", file=sys.stderr)
        return EXIT_CONFIG
    except GateError as e:
        print(f"error: gate: {_one_line(e)}", file=sys.stderr)
        return EXIT_GATE
    except (DemoGenerationError, DemoFormatError, nn.CheckpointError, RunError, ControllerError, OSError, ValueError) as e:
        print(f"error: runtime: {_one_line(e)}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
