"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure,
4 check-suite failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_CHECK = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="setsim",
                description="Set-based cross-modal embedding similarity toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset file")
    gen.add_argument("--config", required=True, help="world config JSON")
    gen.add_argument("--out", required=True, help="output .ssf path")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--world-seed", type=int, default=None,
                     help="prototype draw seed (defaults to --seed)")
    gen.add_argument("--images", type=int, default=None,
                     help="override n_images from the config")

    tr = sub.add_parser("train", help="train a model on a dataset file")
    tr.add_argument("--config", required=True, help="train config JSON")
    tr.add_argument("--data", required=True, help="training .ssf file")
    tr.add_argument("--out", required=True, help="run directory")
    tr.add_argument("--eval-data", default=None,
                    help="optional held-out .ssf used for per-epoch metrics")

    ev = sub.add_parser("eval", help="evaluate retrieval for a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--kind", choices=["mil", "sc", "maxmatch"], default=None,
                    help="scoring similarity (defaults to the checkpoint's)")
    ev.add_argument("--topk", type=int, default=0,
                    help="score with mean-of-top-k cosines instead of --kind")
    ev.add_argument("--alpha", type=float, default=None)

    dg = sub.add_parser("diag", help="embedding-set diagnostics")
    dg.add_argument("mode", choices=["variance", "slots", "heatmap", "perslot"])
    dg.add_argument("--ckpt", required=True)
    dg.add_argument("--data", required=True)
    dg.add_argument("--out", required=True)

    ck = sub.add_parser("check", help="run an oracle suite")
    ck.add_argument("suite", choices=["assign", "grads", "jensen"])
    ck.add_argument("--trials", type=int, default=None,
                    help="override the suite's trial/seed count")
    return p


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise FileNotFoundError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e})") from e


def cmd_gen(args) -> int:
    from .synthdata import WorldConfig, generate, make_world, save_features

    raw = _load_json(args.config)
    n_images = args.images if args.images is not None else raw.pop("n_images", 100)
    raw.pop("n_images", None)
    world = make_world(WorldConfig(**raw),
                       args.world_seed if args.world_seed is not None else args.seed)
    dataset = generate(world, n_images, args.seed)
    save_features(args.out, dataset)
    print(f"wrote {dataset.n_images} images / {dataset.n_captions} captions "
          f"to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .runner import TrainConfig, train
    from .synthdata import load_features

    config = TrainConfig.from_dict(_load_json(args.config))
    dataset = load_features(args.data)
    eval_ds = load_features(args.eval_data) if args.eval_data else None
    result = train(config, dataset, eval_dataset=eval_ds, out_dir=args.out)
    last = result.metrics[-1]
    print(f"trained {config.epochs} epochs; final rsum {last.rsum:.2f}, "
          f"best epoch {result.best_epoch}; run dir {args.out}")
    return EXIT_OK


def _encode_from_args(args):
    from .encoder import load_checkpoint
    from .runner import encode_dataset
    from .synthdata import load_features

    model, meta = load_checkpoint(args.ckpt)
    dataset = load_features(args.data)
    return model, meta, dataset, encode_dataset(model, dataset)


def cmd_eval(args) -> int:
    from .simset import SimilarityKind
    from .runner import evaluate_retrieval

    model, meta, dataset, corpus = _encode_from_args(args)
    kind_name = args.kind or meta.get("kind", "maxmatch")
    alpha = args.alpha if args.alpha is not None else meta.get("alpha", 16.0)
    kind = SimilarityKind(kind_name, alpha)
    result = evaluate_retrieval(corpus.image_sets, corpus.text_sets,
                                dataset.image_to_captions(),
                                kind=None if args.topk else kind,
                                topk=args.topk)
    out = {"kind": kind_name, "topk": args.topk,
           "recall_i2t": list(result.recall_i2t),
           "recall_t2i": list(result.recall_t2i),
           "rsum": result.rsum}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_diag(args) -> int:
    from .runner import (heatmap_export, mean_circular_variance,
                         per_slot_retrieval, slot_ablation_sweep)

    model, meta, dataset, corpus = _encode_from_args(args)
    rel = dataset.image_to_captions()
    out_path = Path(args.out)
    if args.mode == "variance":
        report = {
            "image": mean_circular_variance(corpus.image_sets),
            "text": mean_circular_variance(corpus.text_sets),
            "log_mean_image": float(np.log(mean_circular_variance(corpus.image_sets))),
            "log_mean_text": float(np.log(mean_circular_variance(corpus.text_sets))),
        }
        out_path.write_text(json.dumps(report, sort_keys=True))
    elif args.mode == "slots":
        report = slot_ablation_sweep(corpus, rel)
        out_path.write_text(json.dumps(report, sort_keys=True))
    elif args.mode == "heatmap":
        heatmap_export(corpus, rel, out_path,
                       meta={"kind": meta.get("kind"), "seed": meta.get("seed"),
                             "epoch": meta.get("epoch")})
    else:  # perslot
        _, i2t_rate = per_slot_retrieval(corpus.image_sets, corpus.text_sets)
        _, t2i_rate = per_slot_retrieval(corpus.text_sets, corpus.image_sets)
        report = {"distinct_rate_i2t": i2t_rate, "distinct_rate_t2i": t2i_rate}
        out_path.write_text(json.dumps(report, sort_keys=True))
    print(f"wrote {args.mode} diagnostics to {args.out}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .runner import check_assign, check_grads, check_jensen

    if args.suite == "assign":
        ok, lines = check_assign(trials=args.trials or 1000)
    elif args.suite == "grads":
        ok, lines = check_grads(n_seeds=args.trials or 10)
    else:
        ok, lines = check_jensen(n_trials=args.trials or 1000)
    for line in lines:
        print(line)
    return EXIT_OK if ok else EXIT_CHECK


def main(argv=None) -> int:
    from .fileio import FileFormatError
    from .runner import NumericError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE

    handlers = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
                "diag": cmd_diag, "check": cmd_check}
    try:
        return handlers[args.command](args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, TypeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
