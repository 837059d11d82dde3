"""Command-line entry point.

Subcommands: gen-data, train-victim, attack, evaluate, defend, ablate,
report. Each reads one TOML config, writes into the run directory, and
exits 0 on success. Failure classes get distinct exit codes: 2 for bad
usage (argparse), 3 for a malformed config, 4 for a missing input
artifact, 1 for anything else.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import runner

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 3
EXIT_MISSING = 4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="TOML experiment config")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--seed", type=int, default=None, help="override root seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="darkhash")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train-victim", "attack", "defend", "report"):
        _add_common(sub.add_parser(name))
    p_eval = sub.add_parser("evaluate")
    _add_common(p_eval)
    p_eval.add_argument("--use-kernel", action="store_true",
                        help="route mAP/t-mAP through the packed hamming kernel")
    p_abl = sub.add_parser("ablate")
    _add_common(p_abl)
    p_abl.add_argument("--knob", required=True, choices=runner.ABLATION_KNOBS)
    p_abl.add_argument("--values", required=True,
                       help="comma-separated knob values")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("DARKHASH_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    try:
        overrides = {"out_dir": args.out, "seed": args.seed}
        cfg = runner.load_config(args.config, overrides)
        if args.command == "gen-data":
            runner.stage_gen_data(cfg)
        elif args.command == "train-victim":
            runner.stage_train_victim(cfg)
        elif args.command == "attack":
            runner.stage_attack(cfg)
        elif args.command == "evaluate":
            runner.stage_evaluate(cfg, use_kernel=args.use_kernel)
        elif args.command == "defend":
            runner.stage_defend(cfg)
        elif args.command == "ablate":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            runner.stage_ablate(cfg, args.knob, values)
        elif args.command == "report":
            runner.stage_report(cfg)
        return EXIT_OK
    except runner.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except runner.MissingArtifactError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logging.getLogger(__name__).exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
