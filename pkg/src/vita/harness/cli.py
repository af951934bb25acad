"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional

from ..datasets import DataError
from ..networks import CheckpointError
from ..training import DivergenceError
from .config import ConfigError, parse_config, schema_paths
from .pipeline import STAGES, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

COMMANDS = {
    "gen-suite": ["suite"],
    "train-translator": ["translator"],
    "train-robust": ["robust"],
    "attack-eval": ["attack_eval"],
    "corruption-eval": ["evaluate"],
    "report": ["report"],
    "run": list(STAGES),
}
HELP = {
    "gen-suite": "generate the dataset and the 75-cell corruption suite",
    "train-translator": "train the vicinal translator (GAN)",
    "train-robust": "multi-source robust training of the classifier",
    "attack-eval": "accuracy of the robust classifier under adversarial attacks",
    "corruption-eval": "error of the robust classifier on every suite cell",
    "report": "write the JSON/CSV mCE report",
    "run": "every stage in order (resumable)",
}


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class _Parser(argparse.ArgumentParser):
    # bad flags are configuration errors, not argparse's generic exit status 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vita", description="Vicinal transfer augmentation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="JSON experiment config (empty or missing keys take defaults)")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--out", help="run directory (overrides output_dir)")
        p.add_argument("--quiet", action="store_true")
        schema = p.add_argument_group("config fields (JSON values; strings may be bare)")
        for path in schema_paths():
            if path in ("seed", "output_dir", "train.seed"):
                continue
            schema.add_argument(f"--{path}", dest=f"cfg:{path}", type=_value, metavar="VALUE")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    try:
        cfg = parse_config(args.config, overrides)
        result = run_experiment(cfg, stages=COMMANDS[args.command], log=log)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    if not args.quiet:
        print(str(result.out_dir))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
