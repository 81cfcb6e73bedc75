"""Training loop: Adam, warmup schedules, batching, validation, metrics.

Everything here is deterministic given (seed, config, corpus): batch
composition is a pure function of lengths, batch order and dropout draw from
seeded generators, and metric rows are written with repr() floats so two
identical runs produce byte-identical CSVs.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .treebank import precompute_tape_matrix

SCHEDULES = ("cosine", "constant")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 100
    schedule: str = "cosine"
    lambda_attach: float = 1.0
    grad_clip: float = 1.0
    eval_every: int = 0          # 0 disables validation
    patience: int = 0            # evals without improvement before stopping; 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.warmup_steps < 0 or (self.warmup_steps and self.warmup_steps >= self.steps):
            raise ValueError("warmup_steps must lie inside the step budget")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class Batch:
    batch_id: int
    tokens: np.ndarray    # (B, T) right-padded with zeros
    tape: np.ndarray      # (B, T, T)
    r_gold: np.ndarray    # (B, T)
    lengths: np.ndarray   # (B,)


@dataclass
class TrainResult:
    steps_run: int
    best_step: int
    best_val_ppl: float
    stopped_early: bool
    final_lm_loss: float
    history: list = field(default_factory=list)


# --------------------------------------------------------------------------
# schedule


def lr_at(step, config):
    """Learning rate for a 0-indexed step: linear warmup, then cosine or flat."""
    w = config.warmup_steps
    if w > 0 and step < w:
        return config.lr * step / w
    if config.schedule == "constant":
        return config.lr
    span = max(config.steps - w, 1)
    progress = min((step - w) / span, 1.0)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# batching


def make_batches(corpus, batch_size):
    """Length-bucketed batches with precomputed tapes, in canonical order.

    Sequences are stably sorted by length so each batch pads minimally; the
    result is the same list for the same corpus, shuffled only by the
    training loop's seeded order.
    """
    order = sorted(range(len(corpus.sequences)), key=lambda i: len(corpus.sequences[i]))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        L = max(len(corpus.sequences[i]) for i in chunk)
        B = len(chunk)
        tokens = np.zeros((B, L), dtype=np.int64)
        tape = np.zeros((B, L, L), dtype=np.int64)
        r_gold = np.zeros((B, L), dtype=np.int64)
        lengths = np.zeros(B, dtype=np.int64)
        for row, i in enumerate(chunk):
            seq = np.asarray(corpus.sequences[i])
            r = np.asarray(corpus.supervision[i])
            n = len(seq)
            tokens[row, :n] = seq
            r_gold[row, :n] = r
            tape[row, :n, :n] = precompute_tape_matrix(n, list(r))
            lengths[row] = n
        batches.append(Batch(len(batches), tokens, tape, r_gold, lengths))
    return batches


# --------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def global_grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_gradients(params, max_norm):
    """Scales gradients to max_norm when they exceed it; returns the raw norm."""
    norm = global_grad_norm(params)
    if max_norm and norm > max_norm and math.isfinite(norm):
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# --------------------------------------------------------------------------
# validation


def validate(model, batches, lambda_attach=1.0):
    """Teacher-forced metrics over prebuilt batches.

    Perplexity is exp of the mean next-token NLL with gold tapes (ROOT is
    conditioned on, never predicted); attachment accuracy is exact-argmax
    over rows whose destination token is real.
    """
    nll_sum = 0.0
    nll_count = 0
    att_hits = 0
    att_count = 0
    with T.no_grad():
        for batch in batches:
            out = model.forward(batch.tokens, batch.tape)
            B, L = batch.tokens.shape
            cols = np.arange(L)
            keep = (cols[None, :] + 1) < batch.lengths[:, None]   # rows with a real next token

            logits = out.lm_logits.data
            m = logits.max(axis=-1, keepdims=True)
            logz = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
            nxt = np.concatenate(
                [batch.tokens[:, 1:], np.zeros((B, 1), dtype=np.int64)], axis=1
            )
            picked = np.take_along_axis(logits, nxt[..., None], axis=-1)[..., 0]
            nll = logz - picked
            nll_sum += float(nll[keep].sum())
            nll_count += int(keep.sum())

            if out.attach_logits is not None:
                pred = out.attach_logits.data.argmax(axis=-1)
                tgt = np.concatenate(
                    [batch.r_gold[:, 1:], np.zeros((B, 1), dtype=np.int64)], axis=1
                )
                att_hits += int((pred[keep] == tgt[keep]).sum())
                att_count += int(keep.sum())
    ppl = math.exp(nll_sum / max(nll_count, 1))
    acc = att_hits / att_count if att_count else float("nan")
    return {"val_ppl": ppl, "val_attach_acc": acc}


# --------------------------------------------------------------------------
# training loop

_METRIC_COLUMNS = ("step", "lm_loss", "attach_loss", "val_ppl", "val_attach_acc", "lr")


def train(model, corpus, config, out_dir=None, val_corpus=None):
    """Runs the loop; returns a TrainResult and, with out_dir, writes
    metrics.csv plus best.ckpt / last.ckpt.
    """
    batches = make_batches(corpus, config.batch_size)
    val_batches = make_batches(val_corpus, config.batch_size) if val_corpus else batches
    order_rng = np.random.default_rng([config.seed, 17])
    drop_rng = np.random.default_rng([config.seed, 23])
    adam = Adam(model.trainable())
    params = model.trainable()

    vocab_tokens = list(corpus.vocab.id_to_token)
    metrics_fh = None
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.writer(metrics_fh)
        writer.writerow(_METRIC_COLUMNS)

    history = []
    best_ppl = math.inf
    best_step = -1
    bad_evals = 0
    stopped = False
    perm = None
    final_lm = math.nan
    try:
        for step in range(config.steps):
            slot = step % len(batches)
            if slot == 0:
                perm = order_rng.permutation(len(batches))
            batch = batches[perm[slot]]

            out = model.forward(batch.tokens, batch.tape, train=True, rng=drop_rng)
            total, lm, att = model.loss(
                out, batch.tokens, batch.r_gold, batch.lengths, config.lambda_attach
            )
            lm_val = float(lm.data)
            att_val = float(att.data) if att is not None else math.nan
            if not math.isfinite(float(total.data)):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} on batch {batch.batch_id} "
                    f"(lm={lm_val!r}, attach={att_val!r})"
                )

            T.zero_grads(params)
            T.backward(total)
            norm = clip_gradients(params, config.grad_clip)
            if not math.isfinite(norm):
                worst = max(
                    ((n, float(np.abs(t.grad).max())) for n, t in model.params.items()
                     if t.grad is not None),
                    key=lambda kv: kv[1],
                )
                raise TrainingDiverged(
                    f"non-finite gradient at step {step} on batch {batch.batch_id}: "
                    f"global norm {norm!r}, worst {worst[0]} |g|={worst[1]!r}"
                )
            lr = lr_at(step, config)
            adam.step(lr)
            final_lm = lm_val

            row = {
                "step": step, "lm_loss": lm_val, "attach_loss": att_val,
                "val_ppl": math.nan, "val_attach_acc": math.nan, "lr": lr,
            }
            ran_eval = config.eval_every and (step + 1) % config.eval_every == 0
            if ran_eval:
                stats = validate(model, val_batches, config.lambda_attach)
                row.update(stats)
                if stats["val_ppl"] < best_ppl:
                    best_ppl = stats["val_ppl"]
                    best_step = step
                    bad_evals = 0
                    if out_dir is not None:
                        model.save(
                            os.path.join(out_dir, "best.ckpt"),
                            extra={"step": step, "val_ppl": best_ppl,
                                   "vocab_tokens": vocab_tokens},
                        )
                else:
                    bad_evals += 1
                    if config.patience and bad_evals >= config.patience:
                        stopped = True
            history.append(row)
            if writer is not None:
                writer.writerow(_csv_row(row))
            if stopped:
                break
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if out_dir is not None:
        model.save(
            os.path.join(out_dir, "last.ckpt"),
            extra={"step": len(history) - 1, "vocab_tokens": vocab_tokens},
        )
    return TrainResult(
        steps_run=len(history),
        best_step=best_step,
        best_val_ppl=best_ppl,
        stopped_early=stopped,
        final_lm_loss=final_lm,
        history=history,
    )


def _csv_row(row):
    out = [row["step"]]
    for key in _METRIC_COLUMNS[1:]:
        v = row[key]
        out.append("" if isinstance(v, float) and math.isnan(v) else repr(float(v)))
    return out
