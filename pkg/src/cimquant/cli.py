"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 numeric error.
"""

from __future__ import annotations

import argparse
import sys

from .pipeline import STAGES, ConfigError, Pipeline, StageError, StageNumericError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_NUMERIC = 0, 2, 3, 4


def _kv(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key, value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cimquant", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ["pipeline"]:
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "pipeline" else "run all stages")
        p.add_argument("--config", required=True, help="pipeline configuration (JSON)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="seed for calibration sampling and Hutchinson probes")
        p.add_argument("--hw-override", action="append", type=_kv, default=[], metavar="KEY=VALUE",
                       help="override a hardware parameter (repeatable)")
        if name == "pipeline":
            p.add_argument("--stage", choices=STAGES, help="stop after this stage")
    fx = sub.add_parser("fixtures", help="write the bundled toy model, datasets and config")
    fx.add_argument("--out", required=True)
    fx.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "fixtures":
        from .fixtures import write_fixtures

        print(write_fixtures(args.out, seed=args.seed))
        return EXIT_OK
    try:
        cfg = load_config(args.config, out=args.out, seed=args.seed, hw_overrides=dict(args.hw_override))
    except (ConfigError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    pipe = Pipeline(cfg)
    try:
        if args.command == "pipeline":
            pipe.run_all(until=args.stage)
        else:
            pipe.run_stage(args.command)
    except StageNumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
