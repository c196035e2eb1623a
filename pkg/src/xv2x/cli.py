"""Command-line entry point: ``xv2x <stage> --config run.toml``."""

import argparse
import logging
import sys

from .config import load_config
from .errors import SchemaError
from .pipeline import STAGES, Pipeline
from .sweep import AXES, run_sweep


def build_parser():
    p = argparse.ArgumentParser(prog="xv2x", description="Explainable multi-agent V2X resource allocation")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML experiment config")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--delta", type=float, help="override the selection threshold (reward units)")
    common.add_argument("--scale", choices=("desk", "paper"), help="episode budget preset")
    common.add_argument("-v", "--verbose", action="store_true")
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("run", parents=[common], help="run every stage in order")
    sw = sub.add_parser("sweep", parents=[common], help="sweep one axis over a completed run")
    sw.add_argument("axis", choices=AXES)
    sw.add_argument("--values", type=float, nargs="+", help="override the configured axis values")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, scale=args.scale, seed=args.seed, out_dir=args.out, delta=args.delta)
    except SchemaError as exc:
        print(f"config error ({', '.join(exc.keys) or 'syntax'}): {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    pipe = Pipeline(cfg)
    try:
        if args.command == "run":
            pipe.run()
        elif args.command == "sweep":
            path = run_sweep(pipe, args.axis, args.values)
            print(path)
        else:
            pipe.run_stage(args.command)
    except Exception as exc:  # noqa: BLE001 - report and exit non-zero
        logging.getLogger("xv2x").error("%s failed: %s", args.command, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
