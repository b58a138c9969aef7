"""Command line entry point: ``aneurysm-vt <subcommand> --config run.yaml``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import load_config, set_key, validate
from .errors import ConfigError, SimulationError

THREADS_ENV = "ANEURYSM_VT_THREADS"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

_SUBCOMMANDS = {
    "run": None,
    "deploy-coil": ("deploy",),
    "simulate-clot": ("clot",),
    "simulate-flow": ("flow",),
    "simulate-tracer": ("tracer",),
    "render-dsa": ("dsa",),
    "report": ("report",),
}


def build_parser():
    p = argparse.ArgumentParser(prog="aneurysm-vt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in _SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML configuration (defaults apply when omitted)")
        s.add_argument("--output", help="output directory (overrides paths.output_dir)")
        s.add_argument("--force", action="store_true", help="re-run the requested stage(s)")
        s.add_argument("--threads", type=int, help=f"thread cap (default ${THREADS_ENV} or config)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key, e.g. geometry.spacing_mm=0.5")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            s.add_argument("--compare", nargs="*", default=[], metavar="DIR",
                           help="other finished output directories to tabulate alongside")
    return p


def _load(args):
    cfg = load_config(args.config) if args.config else validate({})
    for item in args.set:
        if "=" not in item:
            raise ConfigError("expected KEY=VALUE", item)
        k, v = item.split("=", 1)
        cfg = set_key(cfg, k.strip(), v)
    return cfg


def _threads(args, cfg):
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("must be at least 1", "--threads")
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"not an integer: {env!r}", THREADS_ENV) from exc
        if n < 1:
            raise ConfigError("must be at least 1", THREADS_ENV)
        return n
    return cfg["run"]["threads"]


def _compare(out, others):
    from .occlusion import format_table
    from .pipeline import read_report
    reports = {}
    for d in [out] + [Path(o) for o in others]:
        name, rep = read_report(d)
        reports[f"{name} ({d.name})" if name in reports else name] = rep
    return format_table(reports)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        threads = _threads(args, cfg)
        from .pipeline import run_pipeline
        out = Path(args.output or cfg["paths"]["output_dir"])
        ran, manifest = run_pipeline(cfg, out, force=args.force, stages=_SUBCOMMANDS[args.command],
                                     threads=threads)
        print(f"stages run: {', '.join(ran) if ran else 'none (up to date)'}")
        print(f"manifest: {out / 'manifest.txt'} ({len(manifest)} files)")
        if args.command == "report":
            text = _compare(out, args.compare) if args.compare else (out / "report" / "report.txt").read_text()
            print(text, end="")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
