"""Command-line entry point: ``feddisco run | bound | partition-stats``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from .aggregation import AllClientsZeroedError
from .experiment import (
    ConfigError,
    load_bound_config,
    load_experiment,
    partition_stats,
    run_bound_sim,
    run_experiment,
)

log = logging.getLogger("feddisco")

OUT_ENV = "FEDDISCO_OUT"
EXIT_CONFIG = 2
EXIT_RUN = 1


def default_out_dir() -> str:
    return os.environ.get(OUT_ENV, "runs")


def bundled_config(name: str) -> Path:
    """Path to one of the reference configs shipped inside the package."""
    ref = resources.files("feddisco") / "configs" / name
    return Path(str(ref))


def _resolve(path: str) -> Path:
    p = Path(path)
    if not p.exists() and not p.is_absolute():
        candidate = bundled_config(p.name if p.suffix else p.name + ".ini")
        if candidate.exists():
            return candidate
    return p


def _cmd_run(args) -> int:
    spec = load_experiment(_resolve(args.spec))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.repeats is not None:
        if args.repeats < 1:
            raise ConfigError("experiment.repeats: must be >= 1")
        spec = replace(spec, repeats=args.repeats)
    out = args.out or spec.output_dir or default_out_dir()
    result = run_experiment(spec, out_dir=out, threads=args.threads)
    print(result.table())
    print(f"wrote {result.out_dir}")
    return 0


def _cmd_bound(args) -> int:
    cfg = load_bound_config(_resolve(args.config))
    out = Path(args.out or default_out_dir())
    path = out if out.suffix == ".csv" else out / "bound_trajectory.csv"
    traj = run_bound_sim(cfg, path)
    first, last = traj.steps[0], traj.steps[-1]
    print(f"reformulated {first.reformulated:.10g} -> {last.reformulated:.10g} over {len(traj.steps) - 1} steps")
    print(f"original     {first.original:.10g} -> {last.original:.10g}")
    print(f"wrote {path}")
    return 0


def _cmd_partition_stats(args) -> int:
    spec = load_experiment(_resolve(args.spec))
    rows = partition_stats(spec, args.seed)
    fields = list(rows[0])
    if args.out:
        out = Path(args.out)
        path = out if out.suffix == ".csv" else out / f"{spec.name}_partition.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(path, "w", newline="")
    else:
        path, fh = None, sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (format(v, ".6g") if isinstance(v, float) else v) for k, v in row.items()})
    finally:
        if path is not None:
            fh.close()
    if path is not None:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddisco", description="Discrepancy-aware federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run every arm of an experiment spec over all repeats")
    p_run.add_argument("spec", help="experiment INI file (or the name of a bundled reference config)")
    p_run.add_argument("--seed", type=int, help="base seed; repeat r uses seed + r")
    p_run.add_argument("--repeats", type=int, help="override experiment.repeats")
    p_run.add_argument("--threads", type=int, default=1, help="runs executed concurrently")
    p_run.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
    p_run.set_defaults(func=_cmd_run)

    p_bound = sub.add_parser("bound", help="minimize the bound surrogate and write the trajectory CSV")
    p_bound.add_argument("config", help="bound INI file with a [bound] section")
    p_bound.add_argument("--out", help="output directory or .csv path")
    p_bound.set_defaults(func=_cmd_bound)

    p_stats = sub.add_parser("partition-stats", help="per-client label mix and discrepancy for a spec's partition")
    p_stats.add_argument("spec", help="experiment INI file")
    p_stats.add_argument("--seed", type=int, help="repeat seed (default: experiment.seed)")
    p_stats.add_argument("--out", help="output directory or .csv path (default: stdout)")
    p_stats.set_defaults(func=_cmd_partition_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AllClientsZeroedError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        print("hint: a in 0.4-0.6 with b = 0.1 is usually safe; finished runs were kept", file=sys.stderr)
        return EXIT_RUN
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and exit non-zero; finished runs stay on disk
        log.debug("run failed", exc_info=True)
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
