"""Command line entry point: one subcommand per pipeline stage."""

import argparse
import logging
import sys
import time
from pathlib import Path

from .config import METHODS, PROFILES, RunConfig
from .pipeline import STAGES, Run, StageError, run_theory


def build_parser():
    parser = argparse.ArgumentParser(prog="upesi", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--profile", choices=PROFILES, help="budget profile (default: ci)")
    common.add_argument("--env", choices=("pendulum", "chain"), help="environment (overrides config)")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")
    common.add_argument("--method", action="append", choices=METHODS,
                        help="comparison method to include; repeatable (default: all six)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("run", parents=[common], help="run every stage in order")
    vt = sub.add_parser("verify-theory", parents=[common], help="tabular KL identity checks")
    vt.add_argument("--instances", type=int, default=100)
    return parser


def make_config(args):
    overrides = {}
    if args.method:
        overrides["run.methods"] = ",".join(dict.fromkeys(args.method))
    if args.config is not None:
        cfg = RunConfig.from_file(args.config, profile=args.profile, seed=args.seed)
        values = dict(cfg.values)
        if args.env:
            values["env.kind"] = args.env
        values.update(overrides)
        return RunConfig.build(values.pop("env.kind"), values.pop("run.profile"), values)
    return RunConfig.build(args.env or "pendulum", args.profile or "ci", overrides, args.seed)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify-theory":
            seed = 0 if args.seed is None else args.seed
            rows, elapsed = run_theory(args.out, args.instances, seed)
            print(f"{'statement':<58}{'n':>5}  {'value':>12}  {'measure':<11}result")
            for statement, n, value, measure, ok in rows:
                print(f"{statement:<58}{n:>5}  {value:>12.3e}  {measure:<11}{'PASS' if ok else 'FAIL'}")
            print(f"elapsed {elapsed:.1f} s; table written to {args.out / 'theory.csv'}")
            return 0 if all(r[-1] for r in rows) else 1
        config = make_config(args)
        run = Run(config, args.out)
        stages = STAGES if args.command == "run" else (args.command,)
        for stage in stages:
            t0 = time.time()
            run.run_stage(stage)
            print(f"{stage}: complete in {time.time() - t0:.1f} s")
        if "report" in stages:
            print((args.out / "report" / "table.txt").read_text(), end="")
        return 0
    except (StageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any stage failure becomes a nonzero exit
        print(f"error: stage failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
