"""Command line entry point: ``latentvol <verb> [--config ...] [--seed N] [--out DIR] [--override k=v ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from ..checkpoint import ChecksumError, CompatibilityError, ConfigHashError
from ..volume_io import VolumeIOError
from ..zerofusion import FrozenWeightsModified
from . import pipeline
from .config import STAGES, ConfigError, load_config

# distinct exit codes per failure class; 2 is argparse's usage error
EXIT_CODES = (
    (ConfigError, 2),
    (pipeline.MissingCheckpointError, 3),
    (pipeline.MissingArtifactError, 3),
    (ConfigHashError, 4),
    (ChecksumError, 5),
    (CompatibilityError, 6),
    (pipeline.BudgetMismatchError, 7),
    (FrozenWeightsModified, 8),
    (VolumeIOError, 9),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentvol", description="Latent diffusion for 3D volumes with mask control.")
    sub = parser.add_subparsers(dest="stage", required=True, metavar="stage")
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", default=None,
                       help="TOML run config, or the name of a shipped profile (e.g. 'desk')")
        p.add_argument("--seed", type=int, default=None, help="master seed (run.seed)")
        p.add_argument("--out", default=None, help="output root (run.out)")
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key; repeatable")
        p.add_argument("-v", "--verbose", action="store_true")
        if stage == "sample":
            p.add_argument("--mask", default=None, help="mask container to condition on (default: every dataset mask)")
            p.add_argument("--sample-seed", type=int, default=None, help="sampling noise seed (sample.seed)")
            p.add_argument("--montage", action="store_true", help="also write a slice montage PNG")
        if stage == "train-zerofusion":
            p.add_argument("--mode", choices=("zerofusion", "concat_baseline"), default=None,
                           help="what to train (default: run.condition_mode)")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config, args.override, seed=args.seed, out=args.out)
        if args.stage == "sample":
            result = pipeline.sample(config, mask_path=args.mask, seed=args.sample_seed,
                                     montage=args.montage or None)
        elif args.stage == "train-zerofusion":
            result = pipeline.train_conditional(config, args.mode)
        else:
            result = pipeline.STAGE_RUNNERS[args.stage](config)
    except Exception as exc:
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
