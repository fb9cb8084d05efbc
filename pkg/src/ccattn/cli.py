"""Command-line entry point.

Subcommands: ``generate``, ``train``, ``eval-retrieval``, ``eval-attention``
and ``dump-attention``. Config files are JSON; flags override file values.
Failures exit with status 1 and print one line ``error: <Type>: <message>``
to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import metrics, synthworld, trainer

LOSS_FLAGS = {
    "lambda_ccr": "--lambda-ccr",
    "lambda_ccs": "--lambda-ccs",
    "gamma1": "--gamma1",
    "gamma2": "--gamma2",
    "gamma3": "--gamma3",
    "agg": "--agg",
}


def _read_json(path: str | None) -> dict:
    if not path:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return data


def train_config_from_args(args: argparse.Namespace) -> trainer.TrainConfig:
    raw = _read_json(args.config)
    loss = dict(raw.pop("loss", {}))
    for key in LOSS_FLAGS:
        value = getattr(args, key)
        if value is not None:
            loss[key] = value
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    raw["checkpoint"] = args.out
    return trainer.TrainConfig.from_dict({**raw, "loss": loss})


def _load_model(path: str):
    model, cfg = trainer.load_checkpoint(path)
    return model, cfg or trainer.TrainConfig()


def _eval_pairs(args: argparse.Namespace):
    return synthworld.load(args.data)[args.split]


def cmd_generate(args: argparse.Namespace) -> dict:
    cfg = synthworld.WorldConfig.from_dict(_read_json(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
    ds = synthworld.generate(cfg)
    synthworld.save(ds, args.out)
    return {"out": args.out, **{name: len(p) for name, p in ds.splits.items()}}


def cmd_train(args: argparse.Namespace) -> dict:
    cfg = train_config_from_args(args)
    ds = synthworld.load(args.data)
    result = trainer.train(ds, cfg)
    if args.history:
        Path(args.history).write_text(json.dumps(result.history, indent=1) + "\n")
    last = next((h for h in reversed(result.history) if h["kind"] == "step"), {})
    return {"checkpoint": args.out, "best_epoch": result.best_epoch, "final_total": last.get("total")}


def cmd_eval_retrieval(args: argparse.Namespace) -> dict:
    model, cfg = _load_model(args.checkpoint)
    report = metrics.recall_at_k(trainer.score_pairs(model, _eval_pairs(args), cfg))
    out = metrics.summary_dict(retrieval=report)
    if args.out:
        metrics.write_summary_json(args.out, retrieval=report)
    return out


def cmd_eval_attention(args: argparse.Namespace) -> dict:
    model, cfg = _load_model(args.checkpoint)
    thresholds = metrics.MetricThresholds(t_iou=args.t_iou, t_att=args.t_att)
    report = metrics.corpus_attention_report(trainer.attention_instances(model, _eval_pairs(args), cfg), thresholds, args.f1)
    if args.csv:
        metrics.write_phrase_csv(report, args.csv)
    if args.out:
        metrics.write_summary_json(args.out, attention=report)
    return {**metrics.summary_dict(attention=report), "f1": report.f1, "f1_mode": args.f1}


def cmd_dump_attention(args: argparse.Namespace) -> dict:
    model, cfg = _load_model(args.checkpoint)
    pairs = _eval_pairs(args)
    if args.limit is not None:
        pairs = pairs[: args.limit]
    written = trainer.dump_attention(model, pairs, args.out, cfg)
    return {"out": args.out, "files": len(written)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    p.add_argument("--config", help="JSON WorldConfig")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON TrainConfig")
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--lambda-ccr", dest="lambda_ccr", type=float)
    p.add_argument("--lambda-ccs", dest="lambda_ccs", type=float)
    for k in (1, 2, 3):
        p.add_argument(f"--gamma{k}", type=float)
    p.add_argument("--agg", choices=["mean", "logsumexp"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--history", help="write the step/eval history as JSON")
    p.set_defaults(func=cmd_train)

    def eval_common(p):
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", default="test")

    p = sub.add_parser("eval-retrieval", help="Recall@K and rsum")
    eval_common(p)
    p.add_argument("--out", help="summary JSON path")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-attention", help="attention precision, recall and F1")
    eval_common(p)
    p.add_argument("--t-iou", dest="t_iou", type=float, default=0.5)
    p.add_argument("--t-att", dest="t_att", default="uniform", help="'uniform' (1/regions) or a number")
    p.add_argument("--f1", choices=["paper", "standard"], default="paper")
    p.add_argument("--csv", help="per-phrase CSV path")
    p.add_argument("--out", help="summary JSON path")
    p.set_defaults(func=cmd_eval_attention)

    p = sub.add_parser("dump-attention", help="per-pair attention weight CSVs")
    eval_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except Exception as exc:  # one-line error contract for scripts
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
