"""Command-line front end.

``korea-sfl run CONFIG``                      train one configuration
``korea-sfl sweep CONFIG --knob K --values``  one run per value plus comparison.csv
``korea-sfl plotdata RUN... --x round|bytes`` long-format curves for plotting
``korea-sfl theory --out CSV``                quadratic-suite trajectory

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import yaml

from korea_sfl.config import ConfigError, load_config, set_knob
from korea_sfl.data import IdxError
from korea_sfl.engine import ContractError, DivergenceError
from korea_sfl.orchestrator import METRIC_COLUMNS, run_experiment

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_value(text: str):
    value = yaml.safe_load(text)
    return text if value is None else value


def cmd_run(args) -> int:
    config = load_config(args.config)
    print(run_experiment(config, args.workers))
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = load_config(args.config)
    root = Path(base.output.dir)
    configs = []
    for raw in args.values:
        value = _parse_value(raw)
        cfg = set_knob(base, args.knob, value)
        out = root / f"{args.knob}={raw}"
        configs.append((raw, cfg.model_copy(update={"output": cfg.output.model_copy(update={"dir": str(out)})})))
    rows = []
    for raw, cfg in configs:
        out = run_experiment(cfg, args.workers)
        print(out)
        with open(out / "metrics.csv", newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append([raw] + [rec[c] for c in METRIC_COLUMNS])
    root.mkdir(parents=True, exist_ok=True)
    comparison = root / "comparison.csv"
    with open(comparison, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["value", *METRIC_COLUMNS])
        writer.writerows(rows)
    print(comparison)
    return EXIT_OK


def _read_metrics(run_dir: Path) -> list[dict]:
    path = run_dir / "metrics.csv"
    if not path.is_file():
        raise UsageError(f"no metrics.csv in {run_dir}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_plotdata(args) -> int:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run_label", "x", args.metric])
    for d in args.run_dirs:
        run_dir = Path(d)
        records = _read_metrics(run_dir)
        if records and args.metric not in records[0]:
            raise UsageError(f"{run_dir / 'metrics.csv'} has no column {args.metric!r}")
        label = run_dir.name
        cumulative = 0
        for rec in records:
            if args.x == "round":
                x = int(rec["round"])
            else:
                cumulative += int(rec["bytes_total"])
                x = cumulative
            writer.writerow([label, x, rec[args.metric]])
    if args.out:
        Path(args.out).write_text(buf.getvalue())
        print(args.out)
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_theory(args) -> int:
    from korea_sfl.theory import loglog_slope, make_quadratic_suite, run_schedule, write_trajectory_csv

    suite = make_quadratic_suite(args.clients, args.dim, args.mu, args.L, args.heterogeneity, args.seed)
    traj = run_schedule(suite, args.E, args.steps, args.mix, args.noise, args.seed)
    write_trajectory_csv(args.out, traj, suite)
    print(args.out)
    if args.steps >= 10_000:
        print(f"log-log slope over [1e3, 1e4]: {loglog_slope(traj.t, traj.delta, 1e3, 1e4):.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="korea-sfl", description="Split federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configuration")
    run.add_argument("config")
    run.add_argument("--workers", type=int, default=None, help="threads for per-branch work")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="one run per value of a config knob")
    sweep.add_argument("config")
    sweep.add_argument("--knob", required=True, help="dotted path, e.g. protocol.p0")
    sweep.add_argument("--values", nargs="+", required=True)
    sweep.add_argument("--workers", type=int, default=None)
    sweep.set_defaults(func=cmd_sweep)

    plot = sub.add_parser("plotdata", help="emit (run_label, x, metric) rows")
    plot.add_argument("run_dirs", nargs="+")
    plot.add_argument("--x", choices=["round", "bytes"], default="round")
    plot.add_argument("--metric", default="accuracy")
    plot.add_argument("--out", default=None)
    plot.set_defaults(func=cmd_plotdata)

    theory = sub.add_parser("theory", help="quadratic-suite trajectory CSV (t, delta_t, bound_rhs)")
    theory.add_argument("--out", required=True)
    theory.add_argument("--clients", type=int, default=10)
    theory.add_argument("--dim", type=int, default=50)
    theory.add_argument("--mu", type=float, default=1.0)
    theory.add_argument("--L", type=float, default=4.0)
    theory.add_argument("--heterogeneity", type=float, default=1.0)
    theory.add_argument("--E", type=int, default=5)
    theory.add_argument("--steps", type=int, default=10_000)
    theory.add_argument("--mix", type=float, default=0.5, help="branch weight lambda in [0, 1]")
    theory.add_argument("--noise", type=float, default=1.0, help="gradient noise variance")
    theory.add_argument("--seed", type=int, default=0)
    theory.set_defaults(func=cmd_theory)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, ContractError, IdxError, OSError) as err:
        print(f"run failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
