"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, FileFormatError, TwinBeamError
from .harness import (
    SweepConfig,
    analyze_histogram,
    default_workers,
    emit_tables,
    load_report,
    run_sweep,
    simulate_point,
)
from .io import load_table, save_distribution, save_histogram, write_json, write_rows
from .reconstruction import reconstruct

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

log = logging.getLogger("twinbeam")


def _config(args) -> SweepConfig:
    overrides = {"seed": args.seed, "out": args.out}
    if getattr(args, "exact", False):
        overrides["exact"] = True
    if args.config:
        return SweepConfig.load(args.config, **overrides)
    return SweepConfig.from_dict({}, **overrides)


def _out_dir(args, config: SweepConfig) -> Path:
    out = Path(args.out or config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    seed = [config.seed, 0]
    truth, counts, hist = simulate_point(config, args.noise, seed)
    save_distribution(out / "photons.csv", truth)
    save_distribution(out / "photocounts.csv", counts)
    if hist is not None:
        save_histogram(out / "histogram.csv", hist)
    write_json(out / "config.json", config.to_dict())
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    data = load_table(args.input)
    dist, diag, _ = reconstruct(data, config.signal, config.idler, config.em)
    save_distribution(out / "reconstruction.csv", dist)
    write_json(out / "diagnostics.json", diag.to_dict())
    log.info("%s after %d iterations", diag.stop_reason, diag.iterations)
    return EXIT_OK


def cmd_analyze(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    a = analyze_histogram(args.input, config.signal, config.idler, config.em,
                          config.max_order, config.tol)
    write_json(out / "analysis.json", {
        "input": str(args.input),
        "photocount": a.photocount.to_dict(),
        "photon": a.photon.to_dict(),
        "em": a.diagnostics.to_dict(),
    })
    rows = []
    for rep in (a.photocount, a.photon):
        flat = rep.flat()
        rows.append([rep.branch] + [flat[k] for k in sorted(flat)])
    keys = sorted(a.photocount.flat())
    write_rows(out / "analysis.csv", ["branch"] + keys, rows)
    save_distribution(out / "reconstruction.csv", a.reconstruction)
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    workers = args.workers or default_workers()
    report = run_sweep(config, workers)
    emit_tables(report, out)
    failed = report.failed()
    if failed:
        log.warning("%d grid points failed: %s", len(failed), failed)
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_report(args) -> int:
    source = Path(args.input or args.out or ".")
    report = load_report(source)
    out = Path(args.out) if args.out else (source if source.is_dir() else source.parent)
    emit_tables(report, out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twinbeam", description="Noisy twin-beam simulation and non-classicality analysis.")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON scenario file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common],
                       help="build a noisy twin beam, its photocounts and a histogram")
    p.add_argument("--noise", type=float, default=0.0,
                   help="mean noise photocounts per arm (default 0)")
    p.add_argument("--exact", action="store_true", help="skip frame sampling")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", parents=[common], help="EM reconstruction of a histogram")
    p.add_argument("input", help="histogram or photocount distribution CSV")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("analyze", parents=[common], help="quantifiers of both branches")
    p.add_argument("input", help="histogram or photocount distribution CSV")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", parents=[common], help="full noise sweep and tables")
    p.add_argument("--workers", type=int, help="parallel processes (default: CPU count)")
    p.add_argument("--exact", action="store_true", help="skip frame sampling")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="re-emit tables from report.json")
    p.add_argument("input", nargs="?", help="report.json or its directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FileFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TwinBeamError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
