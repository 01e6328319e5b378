"""Command line front end.

One subcommand per experiment kind.  Every subcommand shares the same
four flags; the config file is the source of truth and the flags layer
on top of it:

    sltgen find-slt --config cfg.yaml --out runs/r0 --seed 7 \
        --override mask.k_percent=10 --override optimizer.lr=0.01

Exit codes: 0 success, 2 configuration problem (bad file, unknown key,
missing/incompatible checkpoint), 3 numerical abort during a run.
"""

from __future__ import annotations

import argparse
import sys

from .checkpoint import CheckpointError
from .config import ConfigError, resolve_config
from .prune import NumericalAbort
from .runs import run_experiment

_COMMANDS = (
    ("gen-data", "gen_data", "materialize dataset samples as files"),
    ("train-dense", "train_dense", "train all weights of a dense generator"),
    ("find-slt", "find_slt", "search for a subnetwork mask in frozen random weights"),
    ("prune-pretrained", "prune_pretrained",
     "search for a subnetwork mask in trained dense weights"),
    ("finetune", "finetune", "train the surviving weights under a fixed mask"),
    ("eval", "eval", "compute generative metrics for a checkpoint"),
    ("sweep", "sweep", "run a grid of mask searches and aggregate results"),
    ("generate", "generate", "dump samples from a checkpoint (mask swappable)"),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sltgen",
        description="strong lottery tickets for small generative networks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, _, help_text in _COMMANDS:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", default=None,
                         help="path to the YAML experiment config")
        cmd.add_argument("--out", default=None,
                         help="output directory (overrides config out_dir)")
        cmd.add_argument("--seed", type=int, default=None,
                         help="base seed; expands to weights/scores/data/eval")
        cmd.add_argument("--override", action="append", default=[],
                         metavar="KEY=VALUE",
                         help="dotted config override, repeatable")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    experiment = {name: kind for name, kind, _ in _COMMANDS}[args.command]
    try:
        config = resolve_config(args.config, experiment,
                                overrides=args.override, seed=args.seed,
                                out_dir=args.out)
        if not config.out_dir:
            raise ConfigError("no output directory: pass --out or set out_dir")
    except ConfigError as err:
        print(f"sltgen: config error: {err}", file=sys.stderr)
        return 2
    try:
        run_experiment(config)
    except (CheckpointError, FileNotFoundError) as err:
        print(f"sltgen: config error: {err}", file=sys.stderr)
        return 2
    except NumericalAbort as err:
        print(f"sltgen: numerical abort: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
