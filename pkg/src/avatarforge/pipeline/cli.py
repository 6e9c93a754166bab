"""Command line entry point.

    avatarforge synth|stage1|extract|fuse|stage2|distill|export|eval \
        --config cfg.json --data DATA --out OUT [--preset desk|paper]
        [--seed N] [--denoiser analytic|remote --endpoint URL]
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import PRESETS, RunConfig, apply_preset, config_hash, load_config
from .stages import STAGE_ORDER, StageError, run_stage


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avatarforge",
                                     description="Explicit avatar reconstruction pipeline")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGE_ORDER:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", help="JSON config file (every RunConfig field)")
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--out", required=True, help="run output directory")
        p.add_argument("--preset", choices=PRESETS, help="apply a preset before overrides")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--denoiser", choices=("analytic", "remote"), help="distillation backend")
        p.add_argument("--endpoint", help="remote denoiser base URL")
        p.add_argument("--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.preset:
        config = apply_preset(config, args.preset)
    if args.seed is not None:
        config.seed = args.seed
    if args.denoiser:
        config.denoiser = args.denoiser
    if args.endpoint:
        config.denoiser_endpoint = args.endpoint
    if config.denoiser == "remote" and not config.denoiser_endpoint:
        raise SystemExit("--denoiser remote requires --endpoint")
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    overrides = config.overrides()
    if overrides:
        print(f"[avatarforge] config overrides: {json.dumps(overrides, sort_keys=True)}")
    print(f"[avatarforge] stage={args.stage} hash={config_hash(config)}")
    try:
        marker = run_stage(args.stage, config, args.data, args.out, quiet=not args.verbose)
    except StageError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(marker, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
