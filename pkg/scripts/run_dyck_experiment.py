"""Train stack-tape and plain-attention models on bracket strings, then
compare them on the three behavioral probes: closing accuracy under depth
generalization, closing accuracy at long range, and held-out perplexity.

The defaults reproduce the full comparison (20k training strings, 6-layer
models, a few minutes per model on one CPU core). --quick shrinks every
knob for a smoke run. Results are printed as a table and written as JSON
next to the checkpoints.

Usage:
    python3 scripts/run_dyck_experiment.py --out results/ --seeds 0,1,2
    python3 scripts/run_dyck_experiment.py --quick
"""

from __future__ import annotations

import argparse
import json
import os
import time

import numpy as np

from stacklm.decode import BeamConfig, InferenceModel, best_parse
from stacklm.dyck import (
    DyckSpec,
    build_depth_gen_split,
    build_longrange_split,
    dyck_corpus,
    dyck_to_sexpr,
    sample_dyck,
)
from stacklm.evaluate import (
    TAPE_MODES,
    accuracy,
    attachment_spans,
    closing_accuracy,
    corpus_f1,
    perplexity_report,
    tree_spans,
)
from stacklm.model import ModelConfig, PushdownModel
from stacklm.train import TrainConfig, train
from stacklm.treebank import binarize, parse_sexpr

MODES = ("pushdown", "base-multitask")


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--seeds", default="0", help="comma-separated training seeds")
    ap.add_argument("--num-types", type=int, default=8)
    ap.add_argument("--train-depth", type=int, default=6)
    ap.add_argument("--train-count", type=int, default=20000)
    ap.add_argument("--max-len", type=int, default=64)
    ap.add_argument("--steps", type=int, default=2400)
    ap.add_argument("--d-model", type=int, default=32)
    ap.add_argument("--n-layers", type=int, default=6)
    ap.add_argument("--n-heads", type=int, default=4)
    ap.add_argument("--f1-sentences", type=int, default=30)
    ap.add_argument("--tape-mode", default="model-beam", choices=TAPE_MODES)
    ap.add_argument("--quick", action="store_true", help="tiny smoke-run sizes")
    args = ap.parse_args()
    if args.quick:
        args.train_count = 500
        args.steps = 120
        args.n_layers = 2
        args.f1_sentences = 5
    return args


def build_splits(args):
    spec = DyckSpec(
        num_types=args.num_types,
        max_depth=args.train_depth,
        open_prob=0.49,
        min_len=4,
        max_len=args.max_len,
        seed=11,
    )
    train_strings = sample_dyck(spec, args.train_count, shard=0)
    val_strings = sample_dyck(spec, max(args.train_count // 10, 50), shard=1)
    depth_split = build_depth_gen_split(spec, (8, 12), 60 if args.quick else 250)
    seen = [s.tokens for s in train_strings] + [s.tokens for s in val_strings]
    long_split = build_longrange_split(
        spec,
        (44, 48, 52),
        20 if args.quick else 120,
        max_prefix_len=args.max_len,
        exclude=seen,
    )
    return spec, train_strings, val_strings, depth_split, long_split


def run_one(args, seed, mode, corpora, splits):
    train_corpus, val_corpus = corpora
    val_strings, depth_split, long_split = splits
    config = ModelConfig(
        vocab_size=2 + 2 * args.num_types,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_model=args.d_model,
        max_seq_len=args.max_len + 32,
        max_depth=32,
        mode=mode,
    )
    tc = TrainConfig(
        steps=args.steps,
        batch_size=16,
        lr=1e-3,
        warmup_steps=min(100, args.steps // 4),
        lambda_attach=1.0,
        eval_every=max(args.steps // 4, 1),
        seed=seed,
    )
    model = PushdownModel(config, seed=seed)
    t0 = time.time()
    result = train(model, train_corpus, tc, val_corpus=val_corpus)
    train_minutes = (time.time() - t0) / 60

    engine = InferenceModel.from_model(model)
    depth_records, _ = closing_accuracy(engine, depth_split, args.tape_mode)
    deep = [r for r in depth_records if r.bucket >= 8 and r.distance >= 2]
    long_records, long_buckets = closing_accuracy(engine, long_split, args.tape_mode)

    pairs = []
    for s in val_strings[: args.f1_sentences]:
        ids = [0] + [train_corpus.vocab.token_to_id[t] for t in s.tokens] + [1]
        r_hat, _ = best_parse(engine, np.asarray(ids), BeamConfig(width=32))
        gold = tree_spans(binarize(parse_sexpr(dyck_to_sexpr(s))))
        pairs.append((attachment_spans(r_hat), gold))
    f1 = corpus_f1(pairs)

    ppl = perplexity_report({mode: model}, val_corpus)[0]["val_ppl"]
    return model, {
        "mode": mode,
        "seed": seed,
        "train_minutes": round(train_minutes, 1),
        "val_ppl": round(float(ppl), 3),
        "depth_gen_acc": round(accuracy(deep), 4),
        "long_range_acc": round(accuracy(long_records), 4),
        "long_range_buckets": {k: round(v, 4) for k, v in long_buckets.items()},
        "parse_f1": round(f1.f1, 2),
        "final_lm_loss": result.final_lm_loss,
    }


def main():
    args = parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    os.makedirs(args.out, exist_ok=True)

    spec, train_strings, val_strings, depth_split, long_split = build_splits(args)
    train_corpus = dyck_corpus(train_strings, args.num_types)
    val_corpus = dyck_corpus(val_strings, args.num_types)
    print(
        f"corpus: {len(train_strings)} train / {len(val_strings)} val, "
        f"{len(depth_split)} depth-gen strings, {len(long_split)} long-range items"
    )

    rows = []
    for seed in seeds:
        for mode in MODES:
            model, row = run_one(
                args,
                seed,
                mode,
                (train_corpus, val_corpus),
                (val_strings, depth_split, long_split),
            )
            model.save(
                os.path.join(args.out, f"{mode}-seed{seed}.ckpt"),
                extra={"vocab_tokens": list(train_corpus.vocab.id_to_token)},
            )
            rows.append(row)
            print(
                f"{mode:>15} seed {seed}: depth-gen {row['depth_gen_acc']:.3f}  "
                f"long-range {row['long_range_acc']:.3f}  ppl {row['val_ppl']:.2f}  "
                f"F1 {row['parse_f1']:.1f}  ({row['train_minutes']} min)"
            )

    with open(os.path.join(args.out, "results.json"), "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2)
    print(f"\nwrote {os.path.join(args.out, 'results.json')}")

    for seed in seeds:
        by_mode = {r["mode"]: r for r in rows if r["seed"] == seed}
        if len(by_mode) == 2:
            p, b = by_mode["pushdown"], by_mode["base-multitask"]
            print(
                f"seed {seed}: depth-gen gap "
                f"{100 * (p['depth_gen_acc'] - b['depth_gen_acc']):+.1f} pts, "
                f"long-range gap {100 * (p['long_range_acc'] - b['long_range_acc']):+.1f} pts"
            )


if __name__ == "__main__":
    main()
