"""Command-line entry point: train, knn-eval, linear-eval, gradcheck, dump-aug.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import augment, gradcheck
from .config import PRESETS, ConfigError, load_config
from .data import ChannelStats, CorruptionError, DatasetIOError, load_record_dir
from .evaluation import knn_evaluate, linear_evaluate
from .model import load_checkpoint
from .optim import AdamConfig
from .train import TrainingError, load_datasets, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="contrastlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run a training experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--output-dir")

    for name in ("knn-eval", "linear-eval"):
        p = sub.add_parser(name, help=f"{name.split('-')[0]} evaluation of a checkpoint")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True, help="directory of binary record files")
        p.add_argument("--out", help="write the EvalResult JSON here as well")
        if name == "knn-eval":
            p.add_argument("--k", type=int, default=200)
            p.add_argument("--temperature", type=float, default=0.1)
        else:
            p.add_argument("--epochs", type=int, default=50)
            p.add_argument("--lr", type=float, default=0.01)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("dump-aug", help="write augmented view triplets as PPM files")
    p.add_argument("--config", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", required=True)
    return parser


def _cmd_train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    config = load_config(args.config, args.preset, overrides)
    result = train(config)
    print(json.dumps({"output_dir": str(result.output_dir), "final_knn_top1": result.final_knn}))
    return EXIT_OK


def _load_eval_inputs(args):
    state, meta, extras = load_checkpoint(args.checkpoint)
    train_set = load_record_dir(args.dataset, "train")
    test_set = load_record_dir(args.dataset, "test")
    stats = (ChannelStats.from_array(extras["channel_stats"]) if "channel_stats" in extras
             else ChannelStats.from_images(train_set.images))
    return state, train_set, test_set, stats


def _emit(result, out: str | None) -> None:
    text = result.to_json()
    print(text)
    if out:
        Path(out).write_text(text)


def _cmd_knn(args) -> int:
    state, train_set, test_set, stats = _load_eval_inputs(args)
    _emit(knn_evaluate(state, train_set, test_set, stats, args.k, args.temperature), args.out)
    return EXIT_OK


def _cmd_linear(args) -> int:
    state, train_set, test_set, stats = _load_eval_inputs(args)
    _emit(linear_evaluate(state, train_set, test_set, stats, AdamConfig(lr=args.lr), args.epochs), args.out)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results = gradcheck.run_gradcheck(args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"gradcheck FAILED: {', '.join(r.name for r in failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"gradcheck passed ({len(results)} checks)")
    return EXIT_OK


def _cmd_dump_aug(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    config = load_config(args.config)
    train_set, _ = load_datasets(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    aux = config.aux_policy()
    for i in range(min(args.count, len(train_set))):
        img = train_set.images[i]
        views = augment.make_triplet(img, config.basic, aux, augment.image_rng(config.seed, 0, i))
        augment.write_ppm(out / f"{i:04d}_source.ppm", img)
        for name, view in zip(views._fields, views):
            augment.write_ppm(out / f"{i:04d}_{name}.ppm", view)
    print(f"wrote {min(args.count, len(train_set))} triplets to {out}")
    return EXIT_OK


COMMANDS = {"train": _cmd_train, "knn-eval": _cmd_knn, "linear-eval": _cmd_linear,
            "gradcheck": _cmd_gradcheck, "dump-aug": _cmd_dump_aug}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, DatasetIOError, CorruptionError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
