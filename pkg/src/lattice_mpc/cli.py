"""Command line entry point: build, run, compare, plotdata."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, bundled_config, load_config
from .controller import BuildError, LatticeController
from .harness import Artifacts, build_artifacts, build_scenario, emit_plot_data, parse_strategies, run_compare
from .mpqp import QpError, save_regions

EXIT_OK, EXIT_CONFIG, EXIT_BUILD, EXIT_RUN = 0, 1, 2, 3

log = logging.getLogger("lattice_mpc")


def _load(args):
    src = args.config
    path = Path(src)
    if not path.exists() and path.suffix == "":
        path = bundled_config(src)
    cfg = load_config(path)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    return cfg


def _cached_controller(out: Path, digest: str):
    d = out / "controller"
    if not (d / "manifest.json").is_file():
        return None
    try:
        return LatticeController.load(d, expect_digest=digest)
    except BuildError as exc:
        log.warning("%s; rebuilding", exc)
        return None


def _cmd_build(args, cfg, strategies) -> int:
    out = Path(args.out)
    art = build_artifacts(cfg, strategies)
    if art.lattice is not None:
        art.lattice.save(out / "controller")
        t = art.lattice.totals()
        print(f"lattice controllers: {len(art.lattice)} points, {t['terms_after']} terms "
              f"({t['terms_before']} before simplification), {art.lattice.build_time:.2f} s")
    if art.explicit is not None:
        rdir = out / "regions"
        rdir.mkdir(parents=True, exist_ok=True)
        for i, table in enumerate(art.explicit.tables):
            save_regions(table.laws, rdir / f"point{i:05d}.regions")
        print(f"explicit regions: {sum(art.explicit.region_counts())} in total, {art.explicit.build_time:.2f} s")
    return EXIT_OK


def _cmd_compare(args, cfg, strategies) -> int:
    out = Path(args.out)
    digest = build_scenario(cfg).traj.digest() if "lattice" in strategies else ""
    cached = _cached_controller(out, digest) if digest else None
    try:
        art: Artifacts = build_artifacts(cfg, strategies, lattice=cached)
    except (BuildError, QpError) as exc:
        print(f"build error: {exc}", file=sys.stderr)
        return EXIT_BUILD
    try:
        report, _ = run_compare(cfg, strategies, out, art)
    except (QpError, ValueError, ArithmeticError) as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return EXIT_RUN
    print(report.to_text())
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lattice-mpc", description="Lattice PWA trajectory tracking toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("build", "build offline artifacts"), ("run", "roll out one strategy"),
                        ("compare", "roll out several strategies and write a report")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="config file, or a bundled name (circle, figure8)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--strategies", default=None, help="comma separated subset of lattice,linear_mpc,explicit_seq")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
    p = sub.add_parser("plotdata", help="merge run CSVs into one XY table")
    p.add_argument("csvs", nargs="+", help="run_*.csv files")
    p.add_argument("--out", required=True, help="output CSV path")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "plotdata":
        try:
            path = emit_plot_data(args.csvs, args.out)
        except (OSError, ValueError) as exc:
            print(f"run error: {exc}", file=sys.stderr)
            return EXIT_RUN
        print(path)
        return EXIT_OK

    try:
        cfg = _load(args)
        default = "lattice" if args.command == "run" else None
        strategies = parse_strategies(args.strategies if args.strategies is not None else default)
        if args.command == "run" and len(strategies) != 1:
            raise ConfigError("run takes exactly one strategy")
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"scenario {cfg.name}, seed {cfg.seed}")

    if args.command == "build":
        try:
            return _cmd_build(args, cfg, strategies)
        except (BuildError, QpError) as exc:
            print(f"build error: {exc}", file=sys.stderr)
            return EXIT_BUILD
    return _cmd_compare(args, cfg, strategies)


if __name__ == "__main__":
    sys.exit(main())
