"""Command-line entry point: ``mciconv <subcommand> --config FILE``.

On failure a single JSON line ``{"error": <type>, "message": <text>}`` goes to
stderr and the exit status is nonzero (2 for usage/config errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import pipeline
from .config import ConfigError, desk_config, load_config
from .evalcv import format_table
from .synthgen import SynthConfig, write_workspace

logger = logging.getLogger("mciconv")

STAGES = {
    "preprocess": pipeline.run_preprocess,
    "build-cohort": pipeline.run_build_cohort,
    "train-embedding": pipeline.run_train_embedding,
    "extract-embeddings": pipeline.run_extract_embeddings,
    "train-cnn": pipeline.run_train_cnn,
    "train-tabular": pipeline.run_train_tabular,
    "evaluate": pipeline.run_evaluate,
    "visualize": pipeline.run_visualize,
    "report": pipeline.run_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "UsageError", "message": message}), file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mciconv", description="MCI-to-AD conversion prediction pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="write a synthetic desk-scale workspace")
    synth.add_argument("--out", required=True, type=Path, help="workspace directory")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--n-subjects", type=int, default=40, help="MCI subjects at screening")
    synth.add_argument("--converter-fraction", type=float, default=0.5)
    synth.add_argument("--n-screen-nc", type=int, default=6)
    synth.add_argument("--n-screen-ad", type=int, default=6)
    synth.add_argument("--shape", type=int, nargs="+", default=[16], help="volume shape (one or three ints)")

    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    return parser


def run_synth(args) -> None:
    shape = tuple(args.shape) * 3 if len(args.shape) == 1 else tuple(args.shape)
    cfg = SynthConfig(
        seed=args.seed,
        n_subjects=args.n_subjects,
        converter_fraction=args.converter_fraction,
        n_screen_nc=args.n_screen_nc,
        n_screen_ad=args.n_screen_ad,
        volume_shape=shape,
    )
    write_workspace(cfg, args.out)
    tree = desk_config(args.seed)
    tree["synth"] = {
        "n_subjects": cfg.n_subjects,
        "converter_fraction": cfg.converter_fraction,
        "n_screen_nc": cfg.n_screen_nc,
        "n_screen_ad": cfg.n_screen_ad,
        "volume_shape": list(shape),
    }
    (args.out / "config.yaml").write_text(yaml.safe_dump(tree, sort_keys=False))
    print(f"wrote synthetic workspace to {args.out}")


def _configure_threads() -> None:
    threads = os.environ.get("MCICONV_THREADS")
    if threads:
        import torch

        torch.set_num_threads(int(threads))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _configure_threads()
        if args.command == "synth":
            run_synth(args)
            return 0
        cfg = load_config(args.config, seed=args.seed)
        result = STAGES[args.command](cfg)
        if args.command == "evaluate":
            print(format_table(result))
        elif args.command == "report":
            print(result, end="")
        return 0
    except (ConfigError, pipeline.StageError) as err:
        if isinstance(err, ConfigError):
            parser.print_usage(sys.stderr)
        _error_line(err)
        return 2 if isinstance(err, ConfigError) else 1
    except Exception as err:  # noqa: BLE001 - reported as one parsable line
        logger.debug("failure", exc_info=True)
        _error_line(err)
        return 1


def _error_line(err: Exception) -> None:
    print(json.dumps({"error": type(err).__name__, "message": str(err)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
