"""Command-line surface: synth | train | eval | aggregate | trace.

Exit codes: 0 success, 1 usage error, 2 data/model error. Errors are
printed to stderr as one-line JSON {"code": ..., "message": ...}. The
REDAN_SEED environment variable overrides --seed everywhere.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data, ranking
from .autodiff import Graph, NumericError, ShapeError
from .model import DialogModel, ModelConfig
from .training import Checkpoint, TrainConfig, TrainingError, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="dualattn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dialogs", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--turns", type=int, default=10)
    sp.add_argument("--candidates", type=int, default=5)

    tp = sub.add_parser("train", help="train a model on a data directory")
    tp.add_argument("--data", required=True)
    tp.add_argument("--decoder", choices=["dis", "gen"], required=True)
    tp.add_argument("--steps", type=int, default=None,
                    help="reasoning steps T (default: preset value)")
    tp.add_argument("--preset", choices=["paper", "desk"], default="desk")
    tp.add_argument("--out", required=True)
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--epochs", type=int, default=None)
    tp.add_argument("--halving", type=int, default=None,
                    help="learning-rate halving period in epochs")
    tp.add_argument("--patience", type=int, default=None)
    tp.add_argument("--stop-at", type=float, default=None)
    tp.add_argument("--monitor", default="auto")
    tp.add_argument("--val-frac", type=float, default=0.2,
                    help="trailing fraction of dialogs used for validation")
    tp.add_argument("--glove", default=None,
                    help="optional pretrained vector file (paper preset)")

    ep = sub.add_parser("eval", help="rank candidates with a trained model")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--out", required=True)

    ap = sub.add_parser("aggregate", help="fuse ranking tables")
    ap.add_argument("--method", choices=["average", "reciprocal"], required=True)
    ap.add_argument("tables", nargs="+")
    ap.add_argument("--out", required=True)

    rp = sub.add_parser("trace", help="export per-step attention for one dialog")
    rp.add_argument("--ckpt", required=True)
    rp.add_argument("--data", required=True)
    rp.add_argument("--dialog", type=int, required=True)
    rp.add_argument("--out", required=True)
    return p


def resolve_seed(args):
    env = os.environ.get("REDAN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"REDAN_SEED must be an integer, got '{env}'") from None
    return getattr(args, "seed", 0)


def _data_paths(directory):
    return (os.path.join(directory, "dialogs.json"),
            os.path.join(directory, "features.rdnf"))


def cmd_synth(args):
    seed = resolve_seed(args)
    dialog_path, feature_path = data.generate_synthetic(
        args.out, num_dialogs=args.dialogs, seed=seed, num_turns=args.turns,
        num_candidates=args.candidates)
    print(json.dumps({"dialogs": dialog_path, "features": feature_path, "seed": seed}))
    return 0


def cmd_train(args):
    seed = resolve_seed(args)
    dialog_path, feature_path = _data_paths(args.data)
    min_count = 5 if args.preset == "paper" else 1
    vocab = data.Vocabulary.from_corpus(data.corpus_streams(dialog_path), min_count=min_count)

    if args.preset == "paper":
        mconf = ModelConfig.paper(vocab_size=len(vocab))
        tconf_cls = TrainConfig.paper
    else:
        mconf = ModelConfig.desk(vocab_size=len(vocab))
        tconf_cls = TrainConfig.desk
    if args.steps is not None:
        mconf.steps = args.steps

    overrides = {"seed": seed, "monitor": args.monitor, "steps": mconf.steps}
    if args.epochs is not None:
        overrides["max_epochs"] = args.epochs
    if args.halving is not None:
        overrides["lr_halving_period"] = args.halving
    if args.patience is not None:
        overrides["patience"] = args.patience
    if args.stop_at is not None:
        overrides["stop_at"] = args.stop_at
    tconf = tconf_cls(**overrides)

    pretrained = None
    if args.glove is not None:
        if mconf.pretrained_dim == 0:
            raise UsageError("--glove requires --preset paper (desk has no pretrained slot)")
        from .encoders import load_glove
        pretrained = load_glove(args.glove, vocab.word_to_id, dim=mconf.pretrained_dim)

    examples = data.load_dataset(dialog_path, feature_path, vocab,
                                 max_caption=mconf.max_caption_tokens,
                                 max_qa=mconf.max_qa_tokens)
    if not (0.0 <= args.val_frac < 1.0):
        raise UsageError("--val-frac must be in [0, 1)")
    n_val = int(round(len(examples) * args.val_frac))
    train_set = examples[:len(examples) - n_val] if n_val else examples
    val_set = examples[len(examples) - n_val:] if n_val else None

    model = DialogModel(mconf, vocab, seed=seed, pretrained=pretrained)
    ckpt, history = train(model, train_set, tconf, args.decoder, val_examples=val_set)
    for h in history:
        print(json.dumps(h))
    ckpt.save(args.out)
    return 0


def cmd_eval(args):
    ckpt = Checkpoint.load(args.ckpt)
    model = ckpt.build_model()
    dialog_path, feature_path = _data_paths(args.data)
    examples = data.load_dataset(dialog_path, feature_path, model.vocab,
                                 max_caption=model.config.max_caption_tokens,
                                 max_qa=model.config.max_qa_tokens)
    table = model.evaluate(examples, ckpt.manifest["decoder"])
    ranking.write_table(args.out, table)
    print(json.dumps(ranking.compute_metrics(table)))
    return 0


def cmd_aggregate(args):
    tables = [ranking.read_table(p) for p in args.tables]
    fuse = ranking.aggregate_average if args.method == "average" else ranking.aggregate_reciprocal
    fused = fuse(tables)
    ranking.write_table(args.out, fused)
    print(json.dumps(ranking.compute_metrics(fused)))
    return 0


def cmd_trace(args):
    ckpt = Checkpoint.load(args.ckpt)
    model = ckpt.build_model()
    dialog_path, feature_path = _data_paths(args.data)
    examples = data.load_dataset(dialog_path, feature_path, model.vocab,
                                 max_caption=model.config.max_caption_tokens,
                                 max_qa=model.config.max_qa_tokens)
    matches = [ex for ex in examples if ex.image_id == args.dialog]
    if not matches:
        raise data.DataError(f"dialog id {args.dialog} not found in {args.data}")
    ex = matches[0]
    kind = ckpt.manifest["decoder"]

    turns_out = []
    for turn_idx, turn in enumerate(ex.turns):
        graph = Graph(check_finite=False)
        scores, trace = model.turn_scores(graph, ex, turn_idx, kind)
        from .decoders import rank_candidates
        ranks = rank_candidates(scores)
        order = np.argsort(ranks)
        top = [{"text": turn.option_texts[j], "score": float(scores[j]),
                "rank": int(ranks[j])} for j in order[:10]]
        turns_out.append({
            "turn": turn_idx + 1,
            "question": turn.question_text,
            "steps": [{"beta": [float(v) for v in st.image_weights],
                       "gamma": [float(v) for v in st.history_weights]}
                      for st in trace.steps],
            "top_candidates": top,
        })
    doc = {"dialog_id": ex.image_id, "turns": turns_out}
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(json.dumps({"dialog_id": ex.image_id, "turns": len(turns_out),
                      "steps": model.config.steps, "out": args.out}))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "aggregate": cmd_aggregate, "trace": cmd_trace}


def _fail(code, message):
    sys.stderr.write(json.dumps({"code": code, "message": message}) + "\n")
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(1, str(exc))
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(1, str(exc))
    except (data.DataError, TrainingError, ShapeError, NumericError, ValueError,
            OSError) as exc:
        return _fail(2, str(exc))


if __name__ == "__main__":
    sys.exit(main())
