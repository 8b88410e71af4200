"""Command-line entry point.

Exit status: 0 on success, 1 for usage or configuration problems (including a
corpus that does not fit the checkpoint), 2 for numerical failures (a NaN loss
during training or a gradient check over tolerance).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from mcncl import __version__
from mcncl.config import ConfigError, RunConfig, dump_config, load_config
from mcncl.data import CorpusFormatError, generate_corpus, load_corpus, save_corpus
from mcncl.train import (
    CheckpointError,
    NumericalError,
    Trainer,
    ablation_table,
    evaluate,
    load_checkpoint,
    model_from_checkpoint,
    resolve_corpus,
    run_ablation,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("mcncl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config = config.replace(seed=args.seed)
    if getattr(args, "no_psa", False) or getattr(args, "no_mcn_cl", False):
        config = config.with_ablation(no_psa=args.no_psa or None, no_mcn_cl=args.no_mcn_cl or None)
    if getattr(args, "out", None):
        config = config.replace(out_dir=args.out)
    return config


def cmd_train(args) -> int:
    config = _run_config(args)
    out = Path(config.out_dir)
    corpus = resolve_corpus(config)
    if args.resume:
        trainer = Trainer.resume(load_checkpoint(args.resume), corpus)
    else:
        trainer = Trainer.create(config, corpus)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(trainer.config))
    print(f"training {trainer.model.n_parameters()} parameters -> {out}")
    trainer.fit(
        out,
        on_epoch=lambda r: print(f"epoch {r['epoch']:>3}  train_loss {r['train_loss']:.6f}  val_wF1 {r['val_weighted_f1']:.4f}"),
    )
    print(f"best val weighted F1 {trainer.best_val_f1:.4f}; checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    dims = ckpt.dims
    if args.corpus:
        corpus = load_corpus(
            args.corpus,
            expected_classes=dims["num_classes"],
            expected_dims={k: dims[k] for k in ("text", "audio", "visual")},
        )
    else:
        corpus = resolve_corpus(ckpt.config)
        if corpus.num_classes != dims["num_classes"]:
            raise UsageError(f"corpus has K={corpus.num_classes}, checkpoint expects {dims['num_classes']}")
    split = args.split
    if not corpus[split]:
        raise UsageError(f"split {split!r} of the corpus is empty")
    report = evaluate(model, corpus[split], ckpt.config.optim.batch_size)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    table = report.to_table()
    (out / f"eval_{split}.txt").write_text(table + "\n")
    payload = {"checkpoint": str(args.checkpoint), "split": split, "epoch": ckpt.epoch, **report.to_dict()}
    (out / f"eval_{split}.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from mcncl.checks import run_gradchecks

    config = _run_config(args)
    results = run_gradchecks(config.gradcheck, seed=config.seed)
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) at or above tolerance {config.gradcheck.tolerance:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gen_data(args) -> int:
    config = _run_config(argparse.Namespace(config=args.config))
    spec = config.data.corpus
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    corpus = generate_corpus(spec)
    path = save_corpus(corpus, args.out)
    m = corpus.manifest()
    counts = ", ".join(f"{s}={v['utterances']}" for s, v in m["splits"].items())
    print(f"wrote {path} ({counts} utterances)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _run_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [config.seed]
    out = Path(config.out_dir)
    scores = run_ablation(config, seeds, out)
    table = ablation_table(scores, seeds)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.tsv").write_text(table)
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcncl", description="Multimodal dialogue emotion classifier: train, evaluate, verify.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, ablation=True):
        p.add_argument("--config", metavar="PATH", help="YAML run configuration (defaults apply to missing keys)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", metavar="DIR", help="output directory")
        if ablation:
            p.add_argument("--no-psa", action="store_true", help="mean-pool visual frames instead of PSA")
            p.add_argument("--no-mcn-cl", action="store_true", help="drop the attention stack and contrastive loss")

    p = sub.add_parser("train", help="train a model; writes metrics.tsv, last.ckpt, best.ckpt")
    common(p)
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes a table and a JSON report")
    p.add_argument("checkpoint", metavar="CKPT")
    p.add_argument("--corpus", metavar="PATH", help="corpus file (default: rebuild from the checkpoint's config)")
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--out", metavar="DIR", help="report directory (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block and the whole tiny model")
    common(p, ablation=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a synthetic corpus and its manifest")
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--seed", type=int, help="override the corpus seed")
    p.add_argument("--out", metavar="PATH", required=True, help="corpus file to write")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ablate", help="train full, --no-psa and --no-mcn-cl variants and compare")
    common(p, ablation=False)
    p.add_argument("--seeds", metavar="LIST", help="comma-separated run seeds (default: the config seed)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, CorpusFormatError, UsageError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
