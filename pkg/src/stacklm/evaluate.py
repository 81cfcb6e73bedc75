"""Evaluation harness: closing accuracy, bracketing F1, perplexity, attention.

Closing accuracy asks whether the model puts its largest closing-token
probability on the gold close after seeing a bracket prefix; the argmax is
restricted to the num_types closing tokens, so chance sits at 1/num_types and
untrained models calibrate there. Each scored prefix becomes an EvalRecord
carrying the full candidate log-probability table.

The stack tape fed while sweeping a prefix comes from one of three policies.
"model-greedy" parses with the model's own argmax attachments, the cheapest
end-to-end setting but brittle on long prefixes where one early mistake
poisons every later tape row. "model-beam" keeps a beam of attachment
hypotheses and scores next tokens by their posterior-weighted marginal, the
same inference rule the decoder uses; this is the honest self-parsing
protocol for models whose predictions depend on the tape. "gold-oracle"
replays the gold incremental parse, which isolates attention quality from
parsing mistakes. Models whose token predictions never read the tape give
identical scores under all three.

Bracketing F1 follows the usual unlabeled-span conventions: spans are
(start, end) leaf index pairs of internal nodes, the whole-sentence span and
singletons are dropped, and corpus scores micro-average the match counts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .decode import (
    BeamConfig,
    Incremental,
    _advance,
    _candidate_logprobs,
    _logsumexp,
    _prune,
    _start_hypothesis,
    best_parse,
    log_softmax_row,
)
from .dyck import DyckString, LongRangeItem, dyck_vocabulary
from .stack import StackState, candidate_mask, replay, update_stack_tape
from .train import make_batches, validate
from .treebank import ROOT_ID, precompute_tape_matrix

TAPE_MODES = ("model-greedy", "model-beam", "gold-oracle")


# --------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class EvalRecord:
    """One scored next-token prediction problem.

    bucket is the split's grouping key (target distance for long-range items,
    nesting depth of the gold close for string sweeps); distance is always
    the raw open-to-close token distance. candidate_logprobs maps every
    closing-token id to its log probability; gold_id is the single correct
    candidate and must be one of them.
    """

    task_id: str
    prefix_length: int
    distance: int
    bucket: int
    correct: bool
    gold_id: int
    candidate_logprobs: dict[int, float]

    def __post_init__(self):
        if self.gold_id not in self.candidate_logprobs:
            raise ValueError(
                f"gold id {self.gold_id} is not among the scored candidates"
            )


def accuracy(records):
    if not records:
        raise ValueError("no records to average")
    return float(np.mean([rec.correct for rec in records]))


def bucket_accuracy(records):
    """Mean correct flag per bucket, keys sorted."""
    out = {}
    for key in sorted({rec.bucket for rec in records}):
        out[key] = float(np.mean([rec.correct for rec in records if rec.bucket == key]))
    return out


# --------------------------------------------------------------------------
# gold incremental attachments for a prefix


def gold_prefix_attachments(prefix):
    """Gold attachments for a bracket prefix, ROOT slot included.

    Opens shift. A close reduces with its matching open when that open begins
    its parent's body, and with the completed sibling just before the open
    otherwise; because every earlier close already folded its own pair in,
    one token of lookback suffices. Positions are model coordinates (ROOT at
    0, string position p at p + 1). Only proper prefixes are handled: the
    final close of a complete string instead collapses everything into ROOT,
    which is the EOS-side convention of the corpus supervision.
    """
    r = [0]
    opens = []
    for p, tok in enumerate(prefix):
        if tok.startswith("<"):
            opens.append(p)
            r.append(p + 1)
        else:
            if not opens:
                raise ValueError(f"close bracket with no open at position {p}")
            q = opens.pop()
            if q > 0 and prefix[q - 1].startswith(">"):
                r.append(q)
            else:
                r.append(q + 1)
    return r


def _num_types(config):
    v = config.vocab_size
    if v < 4 or (v - 2) % 2:
        raise ValueError(f"vocabulary size {v} is not a bracket inventory")
    return (v - 2) // 2


# --------------------------------------------------------------------------
# closing accuracy


def _greedy_step(inc, state, token_id):
    """Argmax attachment for the incoming token; ties go to the lowest index."""
    k = state.n_tokens
    scores = inc.attach_scores(token_id, np.asarray(state.tape))
    legal = np.flatnonzero(candidate_mask(state, k))
    r_k = int(legal[np.argmax(scores[legal])])
    return r_k, update_stack_tape(state, k, r_k)


def greedy_attachments(engine, token_ids):
    """Width-1 self-parse of an id sequence starting at ROOT.

    Returns one attachment per position, the ROOT shift included. The parse
    is always legal because each step picks from the live candidate set.
    """
    if token_ids[0] != ROOT_ID:
        raise ValueError("sequence must start at the ROOT token")
    if not engine.config.has_attach_head:
        raise ValueError("greedy parsing needs a model with an attachment head")
    state = update_stack_tape(StackState(), 0, 0)
    inc = Incremental(engine)
    inc.feed(ROOT_ID, np.asarray(state.tape))
    r = [0]
    for token in token_ids[1:]:
        r_k, state = _greedy_step(inc, state, int(token))
        r.append(r_k)
        inc.feed(int(token), np.asarray(state.tape))
    return r


def _beam_closing_rows(engine, ids, record_slots, width):
    """Marginal next-token rows under a self-parse attachment beam.

    At each recorded slot the returned row is the log of the hypothesis-
    averaged next-token distribution, weights proportional to exp(joint
    score); with width 1 this reduces exactly to the greedy sweep. The beam
    bookkeeping matches the decoder's: joint word+attachment scores, legal
    candidates renormalized per step, ties broken toward the smaller
    attachment history.
    """
    hyps = [_start_hypothesis(engine)]
    out = {}
    last = max(record_slots)
    for p in range(last + 1):
        if p in record_slots:
            logw = np.asarray([h.logp for h in hyps])
            rows = np.stack([log_softmax_row(h.cache.lm_last) for h in hyps])
            total = rows + logw[:, None]
            m = total.max(axis=0)
            mix = m + np.log(np.sum(np.exp(total - m), axis=0))
            out[p] = mix - _logsumexp(list(logw))
        if p == last:
            break
        k = p + 1
        token = int(ids[p])
        expansions = []
        for h in hyps:
            wlp = float(log_softmax_row(h.cache.lm_last)[token])
            scores = h.cache.attach_scores(token, np.asarray(h.state.tape))
            for r_k, alp in _candidate_logprobs(scores, h.state, k).items():
                expansions.append((h.logp + wlp + alp, h.r_history + (r_k,), h, r_k))
        kept = _prune(expansions, width)
        hyps = [_advance(h, k, token, r_k, lp) for lp, _, h, r_k in kept]
    return out


def _closing_rows(engine, prefix, ids, tape_mode, record_slots, beam_width=8):
    """Log-probability rows at chosen string positions, one sweep per call.

    Feeds prefix tokens 0..max(record_slots)-1 and captures the next-token
    log softmax just before each recorded slot. Greedy attachments, beam
    posteriors and gold tapes all depend only on the consumed prefix, so a
    single sweep scores every slot exactly as per-prefix evaluation would.
    """
    inc = Incremental(engine)
    out = {}
    last = max(record_slots)
    if engine.config.mode == "base-plain":
        inc.feed(ROOT_ID)
        for p in range(last + 1):
            if p in record_slots:
                out[p] = log_softmax_row(inc.lm_last)
            if p < last:
                inc.feed(int(ids[p]))
        return out

    if tape_mode == "model-beam":
        return _beam_closing_rows(engine, ids, record_slots, beam_width)

    gold_r = None
    if tape_mode == "gold-oracle":
        gold_r = gold_prefix_attachments(prefix[:last])
    state = update_stack_tape(StackState(), 0, 0)
    inc.feed(ROOT_ID, np.asarray(state.tape))
    for p in range(last + 1):
        if p in record_slots:
            out[p] = log_softmax_row(inc.lm_last)
        if p == last:
            break
        if gold_r is not None:
            r_k = gold_r[p + 1]
            state = update_stack_tape(state, p + 1, r_k)
        else:
            r_k, state = _greedy_step(inc, state, int(ids[p]))
        inc.feed(int(ids[p]), np.asarray(state.tape))
    return out


def closing_accuracy(engine, split, tape_mode="model-greedy", beam_width=8):
    """Closing-bracket accuracy, bucketed by the split's grouping key.

    split entries are either LongRangeItems (one scored slot at the prefix
    end, bucketed by target distance) or whole well-nested strings (every
    closing slot scored in one sweep, bucketed by the close's nesting depth).
    beam_width only matters under the model-beam tape policy.
    Returns (records, {bucket: accuracy}).
    """
    if tape_mode not in TAPE_MODES:
        raise ValueError(f"tape_mode must be one of {TAPE_MODES}, got {tape_mode!r}")
    vocab = dyck_vocabulary(_num_types(engine.config))
    closers = [vocab.token_to_id[f">{t}"] for t in range(1, _num_types(engine.config) + 1)]

    records = []
    for idx, entry in enumerate(split):
        if isinstance(entry, LongRangeItem):
            ids = [vocab.token_to_id[t] for t in entry.prefix]
            slot = len(entry.prefix)
            rows = _closing_rows(engine, entry.prefix, ids, tape_mode, {slot}, beam_width)
            records.append(
                _close_record(
                    f"close[{entry.target}]:{idx}", rows[slot], closers,
                    vocab.token_to_id[entry.gold_close], slot,
                    entry.distance, entry.target,
                )
            )
        else:
            if not isinstance(entry, DyckString):
                entry = DyckString.from_tokens(entry)
            slots = [c for c, tok in enumerate(entry.tokens) if tok.startswith(">")]
            ids = [vocab.token_to_id[t] for t in entry.tokens]
            rows = _closing_rows(engine, entry.tokens, ids, tape_mode, set(slots), beam_width)
            for c in slots:
                records.append(
                    _close_record(
                        f"close-depth[{entry.depth[c]}]:{idx}:{c}", rows[c],
                        closers, ids[c], c, c - entry.matching[c], entry.depth[c],
                    )
                )
    return records, bucket_accuracy(records)


def _close_record(task_id, lps, closers, gold_id, slot, distance, bucket):
    cand = {cid: float(lps[cid]) for cid in closers}
    pred = closers[int(np.argmax([cand[cid] for cid in closers]))]
    return EvalRecord(
        task_id=task_id,
        prefix_length=slot,
        distance=distance,
        bucket=bucket,
        correct=pred == gold_id,
        gold_id=gold_id,
        candidate_logprobs=cand,
    )


# --------------------------------------------------------------------------
# unlabeled bracketing F1


@dataclass(frozen=True)
class F1Result:
    """Span-overlap counts with percent-scale precision/recall/F1."""

    matched: int
    gold_count: int
    pred_count: int
    precision: float
    recall: float
    f1: float


def _f1_from_counts(matched, gold_count, pred_count):
    precision = 100.0 * matched / pred_count if pred_count else 100.0
    recall = 100.0 * matched / gold_count if gold_count else 100.0
    if precision + recall == 0.0:
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return F1Result(matched, gold_count, pred_count, precision, recall, f1)


def tree_spans(bt):
    """Internal-node spans of a bare binary tree over leaves 0..n-1.

    Singleton spans and the whole-sentence span are excluded, so two trees
    are compared purely on their nontrivial bracketing decisions.
    """
    spans = set()

    def visit(t):
        if isinstance(t, int):
            return t, t
        lo, _ = visit(t[0])
        _, hi = visit(t[1])
        spans.add((lo, hi))
        return lo, hi

    whole = visit(bt)
    spans.discard(whole)
    return {(a, b) for a, b in spans if b > a}


def attachment_spans(r):
    """Spans over word positions of the parse a full attachment history encodes.

    r covers ROOT + n words + EOS in model coordinates. ROOT and EOS leaves
    are transparent: a node contributes the span of the real words beneath it
    when there are at least two, shifted to word coordinates, and the
    whole-sentence span is dropped as in tree_spans.
    """
    n = len(r) - 2
    if n < 1:
        raise ValueError("attachment history too short to cover any words")
    _, forest = replay(list(r))
    spans = set()

    def visit(t):
        if isinstance(t, int):
            if 1 <= t <= n:
                return t - 1, t - 1, 1
            return None, None, 0
        alo, ahi, acnt = visit(t[0])
        blo, bhi, bcnt = visit(t[1])
        lo = alo if alo is not None else blo
        hi = bhi if bhi is not None else ahi
        cnt = acnt + bcnt
        if cnt >= 2:
            spans.add((lo, hi))
        return lo, hi, cnt

    for tree in forest:
        visit(tree)
    spans.discard((0, n - 1))
    return spans


def span_f1(pred_spans, gold_spans):
    pred_spans = set(pred_spans)
    gold_spans = set(gold_spans)
    return _f1_from_counts(
        len(pred_spans & gold_spans), len(gold_spans), len(pred_spans)
    )


def unlabeled_f1(pred, gold):
    """Span F1 between two bare binary trees over the same leaves."""
    return span_f1(tree_spans(pred), tree_spans(gold))


def corpus_f1(pairs):
    """Micro-averaged F1 over (pred_spans, gold_spans) pairs."""
    matched = gold_count = pred_count = 0
    for pred_spans, gold_spans in pairs:
        pred_spans = set(pred_spans)
        gold_spans = set(gold_spans)
        matched += len(pred_spans & gold_spans)
        gold_count += len(gold_spans)
        pred_count += len(pred_spans)
    return _f1_from_counts(matched, gold_count, pred_count)


# --------------------------------------------------------------------------
# perplexity


def perplexity_report(models, corpus, batch_size=16):
    """Teacher-forced validation metrics for several models on one corpus.

    models maps display names to trained PushdownModels; every model sees
    identical batches and tokenization. Returns one dict row per model in
    insertion order, ready for write_report_csv.
    """
    batches = make_batches(corpus, batch_size)
    rows = []
    for name, model in models.items():
        metrics = validate(model, batches)
        rows.append(
            {
                "model": name,
                "val_ppl": metrics["val_ppl"],
                "val_attach_acc": metrics["val_attach_acc"],
            }
        )
    return rows


# --------------------------------------------------------------------------
# attention analysis


@dataclass(frozen=True)
class AttentionReport:
    """Head-averaged attention maps with mass summarized at chosen positions.

    matrix is the layer- and head-averaged (n, n) map (rows are queries and
    sum to 1 over filled columns); per_layer holds each layer's head-averaged
    row at query_pos; query_row is their mean; target_mass is query_row
    summed at the target positions.
    """

    tokens: tuple[str, ...]
    matrix: np.ndarray
    per_layer: np.ndarray
    query_row: np.ndarray
    query_pos: int
    targets: tuple[int, ...]
    target_mass: float


def attention_analysis(engine, token_ids, tape=None, labels=None, query_pos=None, targets=()):
    """Collect attention maps for one sequence and summarize a query row."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    fw = engine.full_forward(token_ids, tape, collect_attention=True)
    maps = fw.attention
    if query_pos is None:
        query_pos = len(token_ids) - 1
    matrix = maps.mean(axis=(0, 1))
    per_layer = maps.mean(axis=1)[:, query_pos, :]
    query_row = per_layer.mean(axis=0)
    targets = tuple(int(t) for t in targets)
    mass = float(query_row[list(targets)].sum()) if targets else 0.0
    if labels is None:
        labels = tuple(str(int(t)) for t in token_ids)
    return AttentionReport(
        tuple(labels), matrix, per_layer, query_row, int(query_pos), targets, mass
    )


def unmatched_open_positions(prefix):
    """Model coordinates of open brackets not yet closed inside the prefix."""
    opens = []
    for p, tok in enumerate(prefix):
        if tok.startswith("<"):
            opens.append(p)
        else:
            opens.pop()
    return tuple(p + 1 for p in opens)


def open_bracket_attention(engine, items, tape_mode="gold-oracle"):
    """AttentionReports for prefix probes, targeting their unmatched opens.

    Each item's prefix is parsed under the chosen tape policy (model-beam
    meaning the single top hypothesis of a width-8 attachment beam, since an
    attention map needs one definite tape), then the attention row of the
    last position is summarized over the positions of still-open brackets;
    report.target_mass per item is the analysis signal.
    """
    if tape_mode not in TAPE_MODES:
        raise ValueError(f"tape_mode must be one of {TAPE_MODES}, got {tape_mode!r}")
    vocab = dyck_vocabulary(_num_types(engine.config))
    reports = []
    for item in items:
        ids = [ROOT_ID] + [vocab.token_to_id[t] for t in item.prefix]
        if engine.config.mode == "base-plain":
            tape = None
        else:
            if tape_mode == "gold-oracle":
                r = gold_prefix_attachments(item.prefix)
            elif tape_mode == "model-beam":
                r, _ = best_parse(engine, np.asarray(ids), BeamConfig(width=8))
            else:
                r = greedy_attachments(engine, ids)
            tape = precompute_tape_matrix(len(ids), r)
        reports.append(
            attention_analysis(
                engine,
                ids,
                tape=tape,
                labels=("<ROOT>",) + tuple(item.prefix),
                targets=unmatched_open_positions(item.prefix),
            )
        )
    return reports


# --------------------------------------------------------------------------
# report files


def write_report_csv(rows, path):
    """Dict rows to CSV; floats go through repr so files reproduce exactly."""
    if not rows:
        raise ValueError("no rows to write")
    columns = list(rows[0].keys())
    for row in rows:
        if list(row.keys()) != columns:
            raise ValueError("rows disagree on columns")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[col]) for col in columns])


def _cell(value):
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def records_as_rows(records):
    """EvalRecords flattened for CSV, candidates as one id:logprob column."""
    rows = []
    for rec in records:
        cands = " ".join(
            f"{cid}:{repr(lp)}" for cid, lp in sorted(rec.candidate_logprobs.items())
        )
        rows.append(
            {
                "task_id": rec.task_id,
                "prefix_length": rec.prefix_length,
                "distance": rec.distance,
                "bucket": rec.bucket,
                "correct": int(rec.correct),
                "gold_id": rec.gold_id,
                "candidates": cands,
            }
        )
    return rows


def write_attention_csv(report, path):
    """The layer-averaged attention matrix with token labels on both axes."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + list(report.tokens))
        for i, label in enumerate(report.tokens):
            writer.writerow([label] + [repr(float(w)) for w in report.matrix[i]])


def write_attention_svg(report, path, cell=18):
    """Grayscale heatmap of the layer-averaged map, darker = more mass."""
    n = len(report.tokens)
    pad = 6 * max(len(t) for t in report.tokens) + 12
    width = pad + n * cell + 8
    height = pad + n * cell + 8
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    for i in range(n):
        for j in range(n):
            g = int(round(255.0 * (1.0 - float(report.matrix[i, j]))))
            parts.append(
                f'<rect x="{pad + j * cell}" y="{pad + i * cell}" '
                f'width="{cell}" height="{cell}" fill="rgb({g},{g},{g})" '
                'stroke="#cccccc" stroke-width="0.5"/>'
            )
    for i, label in enumerate(report.tokens):
        y = pad + i * cell + cell - 5
        parts.append(
            f'<text x="{pad - 4}" y="{y}" text-anchor="end" '
            f'font-family="monospace" font-size="10">{_svg_escape(label)}</text>'
        )
        x = pad + i * cell + cell - 5
        parts.append(
            f'<text x="{x}" y="{pad - 4}" text-anchor="start" '
            f'font-family="monospace" font-size="10" '
            f'transform="rotate(-60 {x} {pad - 4})">{_svg_escape(label)}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")


def _svg_escape(text):
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
