"""Command-line entry point: one subcommand per pipeline stage plus ``run``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import PipelineConfig, load_config
from .pipeline import Pipeline, StageError
from .synth import SynthSpec, write_synthetic

_logger = logging.getLogger("clickrank")


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {v!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clickrank", description="Session click-out ranking pipeline")
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, help="global seed; overrides every stage seed")
    parser.add_argument("--workdir", help="directory for stage artifacts")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic session log")
    g.add_argument("--out", required=True)
    for f in dataclasses.fields(SynthSpec):
        if f.name != "seed":
            g.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)

    s = sub.add_parser("split", help="filter, split and mask a session log")
    s.add_argument("--input")
    s.add_argument("--ratio", type=float)
    s.add_argument("--delimiter")

    e = sub.add_parser("embed", help="train item2vec embeddings")
    e.add_argument("--dimension", type=int)
    e.add_argument("--window", type=int)
    e.add_argument("--embed-epochs", type=int, dest="embed_epochs")

    stage_help = {
        "train-mf": "train the WARP matrix factorization models for a stage",
        "train-rnn": "train the GRU ranker for a stage",
        "predict": "write base-model predictions for a stage's test partition",
    }
    for name, text in stage_help.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--stage", choices=("inner", "local"), default="inner")
        if name == "train-mf":
            p.add_argument("--epochs", type=int)
            p.add_argument("--components", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--schedule", choices=("adagrad", "adadelta"))
        if name == "train-rnn":
            p.add_argument("--hidden-dim", type=int)
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--max-len", type=int)
            p.add_argument("--batch-size", type=int)
        if name == "predict":
            p.add_argument("--retrain-base", type=_bool)

    sub.add_parser("train-stack", help="fit the MF re-ranker and the stacker on inner_test")
    ens = sub.add_parser("ensemble", help="combine base predictions on local_test and write the submission")
    ens.add_argument("--mode", choices=("stack", "borda", "mf-only", "rnn-only", "mf", "rnn"))
    ens.add_argument("--output")
    sub.add_parser("evaluate", help="MRR of every mode on local_test")

    r = sub.add_parser("run", help="the full pipeline")
    r.add_argument("--input")
    r.add_argument("--mode", choices=("stack", "borda", "mf-only", "rnn-only", "mf", "rnn"))
    r.add_argument("--retrain-base", type=_bool)
    r.add_argument("--output")
    r.add_argument("--resume", action="store_true", help="skip stages that already completed")
    return parser


def make_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    top = {}
    for attr, key in (("workdir", "workdir"), ("input", "input"), ("ratio", "ratio"), ("delimiter", "delimiter"),
                      ("mode", "mode"), ("retrain_base", "retrain_base"), ("output", "output")):
        v = getattr(args, attr, None)
        if v is not None:
            top[key] = v
    cfg = dataclasses.replace(cfg, **top)
    cmd = args.command
    if cmd == "embed":
        kw = {k: v for k, v in (("dimension", args.dimension), ("window", args.window), ("epochs", args.embed_epochs)) if v is not None}
        cfg = dataclasses.replace(cfg, embed=dataclasses.replace(cfg.embed, **kw))
    elif cmd == "train-mf":
        kw = {k: v for k, v in (("epochs", args.epochs), ("n_components", args.components),
                                ("learning_rate", args.lr), ("schedule", args.schedule)) if v is not None}
        cfg = dataclasses.replace(cfg, mf=dataclasses.replace(cfg.mf, **kw))
    elif cmd == "train-rnn":
        kw = {k: v for k, v in (("hidden_dim", args.hidden_dim), ("epochs", args.epochs), ("lr", args.lr),
                                ("max_len", args.max_len), ("batch_size", args.batch_size)) if v is not None}
        cfg = dataclasses.replace(cfg, rnn=dataclasses.replace(cfg.rnn, **kw))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.command == "generate":
        kw = {f.name: getattr(args, f.name) for f in dataclasses.fields(SynthSpec) if f.name != "seed"}
        spec = SynthSpec(seed=42 if args.seed is None else args.seed, **kw)
        try:
            write_synthetic(spec, args.out)
        except (ValueError, OSError) as e:
            print(f"error: generate: {e}", file=sys.stderr)
            return 1
        return 0

    try:
        cfg = make_config(args)
        pipe = Pipeline(cfg)
    except (ValueError, KeyError, OSError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2

    stages = {
        "split": pipe.split,
        "embed": pipe.embed,
        "train-mf": lambda: pipe.train_mf(args.stage),
        "train-rnn": lambda: pipe.train_rnn(args.stage),
        "predict": lambda: pipe.predict(args.stage),
        "train-stack": pipe.train_stack,
        "ensemble": pipe.ensemble,
        "evaluate": pipe.evaluate,
    }
    try:
        if args.command == "run":
            reports = pipe.run_all(resume=args.resume)
        elif args.command in stages:
            try:
                result = stages[args.command]()
            except Exception as e:
                raise StageError(args.command, e) from e
            reports = result if args.command == "evaluate" else None
        else:
            parser.error(f"unknown command {args.command}")
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if reports:
        for mode, rep in reports.items():
            marker = "*" if mode == cfg.mode else " "
            print(f"{marker} {mode:>9}: {rep.text()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
