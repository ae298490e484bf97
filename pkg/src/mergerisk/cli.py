"""Command-line driver over the staged pipeline.

Exit codes: 0 success, 2 usage error, 3 unmet stage dependency (names the
missing stage), 4 config parse or schema error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, default_config_toml, load_config
from .pipeline import (ManifestCorruptionError, Pipeline, STAGES,
                       StageDependencyError)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DEPENDENCY = 3
EXIT_CONFIG = 4

SUBCOMMANDS = ("init",) + STAGES + ("all",)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mergerisk",
        description="Transfer-attack risk evaluation for merged multi-task models")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage" if name not in
                           ("init", "all") else
                           ("write default config and manifest" if name == "init"
                            else "run every stage in order"))
        p.add_argument("--config", default=None,
                       help="experiment config (TOML); init writes one here")
        p.add_argument("--out", default=None, help="artifact directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--workers", type=int, default=1,
                       help="worker threads for stage-internal parallelism")
        p.add_argument("--force", action="store_true",
                       help="recompute even when the manifest marks a stage done")
        if name == "all":
            p.add_argument("--stage", choices=STAGES, default=None,
                           help="stop after this stage")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "init" and (args.config is None or not Path(args.config).exists()):
        target = Path(args.config or "desk.toml")
        target.write_text(default_config_toml(
            seed=args.seed if args.seed is not None else 7,
            out_dir=args.out or "runs/desk"))
        print(f"wrote default config to {target}")
        cfg = load_config(target)
        Pipeline(cfg, out_dir=args.out, workers=args.workers).init()
        return EXIT_OK

    if args.config is None:
        print("error: --config is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
    except FileNotFoundError:
        print(f"error: config file {args.config} not found", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    pipe = Pipeline(cfg, out_dir=args.out, workers=args.workers)
    try:
        if args.command == "init":
            pipe.init()
            print(f"manifest written to {pipe.manifest_path}")
        elif args.command == "all":
            pipe.run_all(force=args.force, until=getattr(args, "stage", None))
        else:
            pipe.init()
            pipe.run_stage(args.command, force=args.force)
    except StageDependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except ManifestCorruptionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
