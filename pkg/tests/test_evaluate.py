"""Closing accuracy, span F1, perplexity tables, and attention reports."""

import csv
import itertools

import numpy as np
import pytest

from stacklm.decode import BeamConfig, InferenceModel, best_parse
from stacklm.dyck import (
    DyckSpec,
    DyckString,
    LongRangeItem,
    build_longrange_split,
    dyck_corpus,
    dyck_gold_tree,
    dyck_to_sexpr,
    sample_dyck,
)
from stacklm.evaluate import (
    EvalRecord,
    accuracy,
    attachment_spans,
    bucket_accuracy,
    closing_accuracy,
    corpus_f1,
    gold_prefix_attachments,
    greedy_attachments,
    open_bracket_attention,
    perplexity_report,
    records_as_rows,
    span_f1,
    tree_spans,
    unlabeled_f1,
    unmatched_open_positions,
    write_attention_csv,
    write_attention_svg,
    write_report_csv,
)
from stacklm.model import ModelConfig, PushdownModel
from stacklm.train import TrainConfig, train
from stacklm.treebank import binarize, oracle_extract, parse_sexpr, precompute_tape_matrix


def fresh_engine(num_types, mode="pushdown", seed=3, **overrides):
    cfg = dict(
        vocab_size=2 + 2 * num_types,
        n_layers=2,
        n_heads=2,
        d_model=16,
        max_seq_len=64,
        max_depth=8,
        mode=mode,
    )
    cfg.update(overrides)
    model = PushdownModel(ModelConfig(**cfg), seed=seed)
    return InferenceModel.from_model(model)


@pytest.fixture(scope="module")
def overfit():
    """A tiny pushdown model memorizing three collision-free strings.

    Each string opens with a different bracket type, so no two training
    prefixes coincide and every attachment target is learnable exactly; with
    shared prefixes, a balanced close can be string-final in one string and
    mid-string in another, which makes its gold attachment ambiguous.
    """
    strings = [
        DyckString.from_tokens(t)
        for t in (
            ("<1", "<2", ">2", "<3", ">3", ">1", "<2", ">2"),
            ("<2", "<2", ">2", ">2", "<1", ">1"),
            ("<3", ">3", "<1", "<1", ">1", ">1"),
        )
    ]
    corpus = dyck_corpus(strings, 3)
    model = PushdownModel(
        ModelConfig(
            vocab_size=8, n_layers=2, n_heads=2, d_model=16,
            max_seq_len=24, max_depth=12,
        ),
        seed=0,
    )
    train(
        model,
        corpus,
        TrainConfig(steps=700, batch_size=3, lr=3e-3, warmup_steps=20, seed=0),
    )
    return InferenceModel.from_model(model), corpus, strings


# --------------------------------------------------------------------------
# gold prefix attachments


def test_gold_prefix_attachments_match_the_full_parse():
    strings = sample_dyck(
        DyckSpec(num_types=4, max_depth=5, min_len=6, max_len=18, seed=11), 25
    )
    for s in strings:
        r_full = oracle_extract(dyck_gold_tree(s))
        for cut in range(len(s.tokens)):
            assert gold_prefix_attachments(s.tokens[:cut]) == r_full[: cut + 1]


def test_gold_prefix_attachments_reject_orphan_close():
    with pytest.raises(ValueError, match="position 0"):
        gold_prefix_attachments((">1",))


# --------------------------------------------------------------------------
# records


def test_eval_record_requires_gold_among_candidates():
    with pytest.raises(ValueError, match="gold id"):
        EvalRecord("t", 4, 2, 1, True, gold_id=9, candidate_logprobs={3: -1.0})


def test_accuracy_refuses_empty():
    with pytest.raises(ValueError, match="no records"):
        accuracy([])


# --------------------------------------------------------------------------
# closing accuracy


def test_untrained_closing_accuracy_sits_near_chance():
    engine = fresh_engine(8, seed=3)
    strings = sample_dyck(
        DyckSpec(num_types=8, max_depth=5, min_len=8, max_len=20, seed=2), 80
    )
    records, buckets = closing_accuracy(engine, strings, "model-greedy")
    assert len(records) >= 300
    assert abs(accuracy(records) - 1 / 8) < 0.05
    assert buckets == bucket_accuracy(records)
    for rec in records:
        assert len(rec.candidate_logprobs) == 8


def test_closing_records_carry_split_geometry():
    engine = fresh_engine(4, seed=1)
    strings = sample_dyck(
        DyckSpec(num_types=4, max_depth=4, min_len=6, max_len=14, seed=9), 10
    )
    records, buckets = closing_accuracy(engine, strings, "gold-oracle")
    by_id = {rec.task_id: rec for rec in records}
    n_slots = 0
    for idx, s in enumerate(strings):
        for c, tok in enumerate(s.tokens):
            if not tok.startswith(">"):
                continue
            n_slots += 1
            rec = by_id[f"close-depth[{s.depth[c]}]:{idx}:{c}"]
            assert rec.prefix_length == c
            assert rec.distance == c - s.matching[c]
            assert rec.bucket == s.depth[c]
    assert n_slots == len(records)
    assert set(buckets) == {rec.bucket for rec in records}


def test_closing_accuracy_is_deterministic():
    engine = fresh_engine(4, seed=1)
    strings = sample_dyck(
        DyckSpec(num_types=4, max_depth=4, min_len=6, max_len=12, seed=12), 6
    )
    first, _ = closing_accuracy(engine, strings, "model-greedy")
    second, _ = closing_accuracy(engine, strings, "model-greedy")
    assert first == second


def test_closing_accuracy_on_longrange_items():
    engine = fresh_engine(8, seed=3)
    items = build_longrange_split(
        DyckSpec(num_types=8, max_depth=5, min_len=8, max_len=64, seed=4),
        targets=[8],
        count=6,
    )
    records, buckets = closing_accuracy(engine, items, "gold-oracle")
    assert len(records) == 6
    assert list(buckets) == [8]
    for idx, (item, rec) in enumerate(zip(items, records)):
        assert rec.task_id == f"close[8]:{idx}"
        assert rec.prefix_length == len(item.prefix)
        assert rec.distance == item.distance
        assert rec.gold_id in rec.candidate_logprobs


def test_closing_accuracy_base_plain_needs_no_tape():
    engine = fresh_engine(4, mode="base-plain", seed=2)
    strings = sample_dyck(
        DyckSpec(num_types=4, max_depth=3, min_len=4, max_len=10, seed=3), 8
    )
    records, _ = closing_accuracy(engine, strings, "model-greedy")
    assert 0.0 <= accuracy(records) <= 1.0


def test_closing_accuracy_rejects_bad_inputs():
    engine = fresh_engine(4, seed=1)
    with pytest.raises(ValueError, match="tape_mode"):
        closing_accuracy(engine, [], "oracle")
    odd = fresh_engine(4, seed=1, vocab_size=7)
    with pytest.raises(ValueError, match="bracket inventory"):
        closing_accuracy(odd, [DyckString.from_tokens(("<1", ">1"))])


def test_overfit_model_closes_perfectly_in_both_tape_modes(overfit):
    engine, corpus, strings = overfit
    greedy_records, _ = closing_accuracy(engine, strings, "model-greedy")
    oracle_records, _ = closing_accuracy(engine, strings, "gold-oracle")
    assert accuracy(greedy_records) == 1.0
    assert accuracy(oracle_records) == 1.0


def test_overfit_greedy_parse_recovers_gold_attachments(overfit):
    engine, corpus, strings = overfit
    for ids, r_gold in zip(corpus.sequences, corpus.supervision):
        assert greedy_attachments(engine, list(ids)) == list(r_gold)


def test_model_beam_width_one_matches_greedy():
    # width 1 keeps exactly the greedy expansion (same score, same tie-break),
    # so both sweeps walk the same tapes; the recorded rows differ only by
    # the add-then-subtract of the hypothesis weight in the mixture formula
    engine = fresh_engine(4, seed=6)
    strings = sample_dyck(
        DyckSpec(num_types=4, max_depth=4, min_len=6, max_len=16, seed=21), 8
    )
    greedy, _ = closing_accuracy(engine, strings, "model-greedy")
    beamed, _ = closing_accuracy(engine, strings, "model-beam", beam_width=1)
    assert len(greedy) == len(beamed)
    for g, b in zip(greedy, beamed):
        assert g.task_id == b.task_id
        assert g.correct == b.correct
        for cid, lp in g.candidate_logprobs.items():
            assert b.candidate_logprobs[cid] == pytest.approx(lp, abs=1e-12)


def test_overfit_model_beam_closes_perfectly(overfit):
    engine, corpus, strings = overfit
    records, _ = closing_accuracy(engine, strings, "model-beam", beam_width=4)
    assert accuracy(records) == 1.0


def test_tapeless_lm_scores_identically_under_every_tape_policy():
    # the attach head is the only tape consumer in this mode, so closing
    # scores cannot depend on how the tape was produced
    engine = fresh_engine(3, mode="base-multitask", seed=9)
    strings = sample_dyck(
        DyckSpec(num_types=3, max_depth=4, min_len=6, max_len=18, seed=14), 10
    )
    greedy, _ = closing_accuracy(engine, strings, "model-greedy")
    oracle, _ = closing_accuracy(engine, strings, "gold-oracle")
    beamed, _ = closing_accuracy(engine, strings, "model-beam", beam_width=4)
    assert greedy == oracle
    for g, b in zip(greedy, beamed):
        assert g.correct == b.correct
        for cid, lp in g.candidate_logprobs.items():
            assert b.candidate_logprobs[cid] == pytest.approx(lp, abs=1e-10)


def test_greedy_attachments_guards():
    engine = fresh_engine(4, mode="base-plain", seed=2)
    with pytest.raises(ValueError, match="attachment head"):
        greedy_attachments(engine, [0, 2, 3, 1])
    with pytest.raises(ValueError, match="ROOT"):
        greedy_attachments(fresh_engine(4), [2, 3, 1])


# --------------------------------------------------------------------------
# span F1


def right_leaning_spans(bt):
    """Independent span oracle: test every (i, j) for constituent-hood."""
    leaves = []

    def flatten(t):
        if isinstance(t, int):
            leaves.append(t)
        else:
            flatten(t[0])
            flatten(t[1])

    flatten(bt)
    n = len(leaves)

    def subtree_covering(t, i, j):
        while not isinstance(t, int):
            left_leaves = set()

            def collect(u):
                if isinstance(u, int):
                    left_leaves.add(u)
                else:
                    collect(u[0])
                    collect(u[1])

            collect(t[0])
            if i in left_leaves and j in left_leaves:
                t = t[0]
            elif i not in left_leaves and j not in left_leaves:
                t = t[1]
            else:
                break
        return t

    spans = set()
    for i in range(n):
        for j in range(i + 1, n):
            node = subtree_covering(bt, i, j)
            covered = []

            def collect_all(u):
                if isinstance(u, int):
                    covered.append(u)
                else:
                    collect_all(u[0])
                    collect_all(u[1])

            collect_all(node)
            if covered == list(range(i, j + 1)) and (i, j) != (0, n - 1):
                spans.add((i, j))
    return spans


def test_span_f1_frozen_zero_overlap_case():
    gold = binarize(parse_sexpr("(X a (X b (X c d)))"))
    pred = binarize(parse_sexpr("(X (X (X a b) c) d)"))
    assert tree_spans(gold) == {(1, 3), (2, 3)}
    assert tree_spans(pred) == {(0, 1), (0, 2)}
    result = unlabeled_f1(pred, gold)
    assert result.matched == 0
    assert result.gold_count == 2 and result.pred_count == 2
    assert result.f1 == 0.0


def test_span_f1_identical_trees_score_100():
    tree = binarize(parse_sexpr("(X (X a b) (X c (X d e)))"))
    result = unlabeled_f1(tree, tree)
    assert result.precision == 100.0
    assert result.recall == 100.0
    assert result.f1 == 100.0


def test_span_f1_single_rotation_on_five_leaves():
    gold = (0, ((1, 2), (3, 4)))
    pred = (0, (((1, 2), 3), 4))
    assert tree_spans(gold) == right_leaning_spans(gold) == {(1, 2), (3, 4), (1, 4)}
    assert tree_spans(pred) == right_leaning_spans(pred) == {(1, 2), (1, 3), (1, 4)}
    result = unlabeled_f1(pred, gold)
    assert result.matched == 2
    assert result.f1 == pytest.approx(200.0 / 3.0)


def all_trees(lo, hi):
    if lo == hi:
        return [lo]
    out = []
    for cut in range(lo, hi):
        for left in all_trees(lo, cut):
            for right in all_trees(cut + 1, hi):
                out.append((left, right))
    return out


def test_span_f1_matches_brute_force_and_swaps_cleanly():
    trees = all_trees(0, 4)
    for a, b in itertools.combinations(trees, 2):
        assert tree_spans(a) == right_leaning_spans(a)
        forward = unlabeled_f1(a, b)
        backward = unlabeled_f1(b, a)
        assert forward.precision == backward.recall
        assert forward.recall == backward.precision
        assert forward.f1 == backward.f1


def test_corpus_f1_micro_averages_counts():
    perfect = ({(1, 2), (1, 3)}, {(1, 2), (1, 3)})
    disjoint = ({(0, 1), (0, 2), (0, 3)}, {(2, 4), (1, 4), (3, 4)})
    result = corpus_f1([perfect, disjoint])
    assert (result.matched, result.gold_count, result.pred_count) == (2, 5, 5)
    assert result.f1 == pytest.approx(40.0)
    assert span_f1(set(), set()).f1 == 100.0


def test_attachment_spans_agree_with_gold_trees():
    strings = sample_dyck(
        DyckSpec(num_types=3, max_depth=4, min_len=4, max_len=16, seed=21), 20
    )
    for s in strings:
        r = oracle_extract(dyck_gold_tree(s))
        r.append(len(r))
        expected = tree_spans(binarize(parse_sexpr(dyck_to_sexpr(s))))
        assert attachment_spans(r) == expected


def test_overfit_best_parse_reaches_perfect_f1(overfit):
    engine, corpus, strings = overfit
    pairs = []
    for ids, s in zip(corpus.sequences, strings):
        r_hat, _ = best_parse(engine, ids, BeamConfig(width=8))
        gold = tree_spans(binarize(parse_sexpr(dyck_to_sexpr(s))))
        pairs.append((attachment_spans(r_hat), gold))
    assert corpus_f1(pairs).f1 == 100.0


# --------------------------------------------------------------------------
# perplexity report


def test_perplexity_report_rows_and_csv(tmp_path):
    strings = sample_dyck(
        DyckSpec(num_types=3, max_depth=3, min_len=4, max_len=10, seed=7), 8
    )
    corpus = dyck_corpus(strings, 3)
    shared = dict(
        vocab_size=8, n_layers=2, n_heads=2, d_model=16, max_seq_len=24, max_depth=8
    )
    models = {
        "pushdown": PushdownModel(ModelConfig(**shared), seed=0),
        "base-plain": PushdownModel(ModelConfig(mode="base-plain", **shared), seed=0),
    }
    rows = perplexity_report(models, corpus, batch_size=4)
    assert [row["model"] for row in rows] == ["pushdown", "base-plain"]
    for row in rows:
        assert np.isfinite(row["val_ppl"]) and row["val_ppl"] > 1.0
    assert np.isfinite(rows[0]["val_attach_acc"])
    assert np.isnan(rows[1]["val_attach_acc"])

    path = tmp_path / "ppl.csv"
    write_report_csv(rows, path)
    with open(path, newline="") as fh:
        lines = list(csv.reader(fh))
    assert lines[0] == ["model", "val_ppl", "val_attach_acc"]
    assert float(lines[1][1]) == rows[0]["val_ppl"]


def test_write_report_csv_guards(tmp_path):
    with pytest.raises(ValueError, match="no rows"):
        write_report_csv([], tmp_path / "empty.csv")
    with pytest.raises(ValueError, match="columns"):
        write_report_csv([{"a": 1}, {"b": 2}], tmp_path / "bad.csv")


def test_records_as_rows_flatten_candidates():
    rec = EvalRecord("t:0", 5, 3, 2, True, 3, {5: -1.25, 3: -0.5})
    row = records_as_rows([rec])[0]
    assert row["candidates"] == "3:-0.5 5:-1.25"
    assert row["correct"] == 1
    assert row["gold_id"] == 3


# --------------------------------------------------------------------------
# attention analysis


PROBE = LongRangeItem(("<1", "<2", ">2", "<3"), ">3", 1, 1, ())


def test_unmatched_open_positions():
    assert unmatched_open_positions(PROBE.prefix) == (1, 4)
    assert unmatched_open_positions(("<1", ">1")) == ()


def test_attention_rows_sum_to_one():
    engine = fresh_engine(3, seed=5)
    report = open_bracket_attention(engine, [PROBE])[0]
    n = len(PROBE.prefix) + 1
    assert report.matrix.shape == (n, n)
    for t in range(n):
        assert report.matrix[t, : t + 1].sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(report.matrix[t, t + 1 :] == 0.0)
    for layer_row in report.per_layer:
        assert layer_row.sum() == pytest.approx(1.0, abs=1e-9)
    assert report.query_pos == n - 1
    assert report.targets == (1, 4)
    assert report.target_mass == pytest.approx(report.query_row[[1, 4]].sum())
    assert report.tokens == ("<ROOT>", "<1", "<2", ">2", "<3")


def test_attention_zeroed_tables_match_base_bitwise():
    model = PushdownModel(
        ModelConfig(
            vocab_size=8, n_layers=2, n_heads=2, d_model=16,
            max_seq_len=32, max_depth=8,
        ),
        seed=7,
    )
    params = model.param_arrays()
    for name in list(params):
        if name.endswith("attn.depth_table"):
            params[name] = np.zeros_like(params[name])
    base_cfg = ModelConfig(
        vocab_size=8, n_layers=2, n_heads=2, d_model=16,
        max_seq_len=32, max_depth=8, mode="base-multitask",
    )
    pushdown = InferenceModel(params, model.config)
    base = InferenceModel(params, base_cfg)
    rep_p = open_bracket_attention(pushdown, [PROBE], "gold-oracle")[0]
    rep_b = open_bracket_attention(base, [PROBE], "gold-oracle")[0]
    assert np.array_equal(rep_p.matrix, rep_b.matrix)
    assert np.array_equal(rep_p.per_layer, rep_b.per_layer)


def test_collecting_attention_leaves_the_forward_untouched():
    engine = fresh_engine(3, seed=5)
    ids = [0, 2, 4, 5, 3, 1]
    r = gold_prefix_attachments(("<1", "<2", ">2", ">1"))
    r.append(len(r))
    tape = precompute_tape_matrix(len(ids), r)
    plain = engine.full_forward(np.asarray(ids), tape)
    collected = engine.full_forward(np.asarray(ids), tape, collect_attention=True)
    assert plain.attention is None
    assert collected.attention.shape == (2, 2, 6, 6)
    assert np.array_equal(plain.lm_logits, collected.lm_logits)
    assert np.array_equal(plain.h, collected.h)


def test_attention_csv_and_svg_exports(tmp_path):
    engine = fresh_engine(3, seed=5)
    report = open_bracket_attention(engine, [PROBE])[0]

    csv_path = tmp_path / "attn.csv"
    write_attention_csv(report, csv_path)
    with open(csv_path, newline="") as fh:
        lines = list(csv.reader(fh))
    assert lines[0] == [""] + list(report.tokens)
    parsed = np.array([[float(x) for x in line[1:]] for line in lines[1:]])
    assert np.array_equal(parsed, report.matrix)

    svg_path = tmp_path / "attn.svg"
    write_attention_svg(report, svg_path)
    text = svg_path.read_text()
    n = len(report.tokens)
    assert text.startswith("<svg")
    assert text.count("<rect x=") == n * n
    assert text.count("&lt;ROOT&gt;") == 2
    assert "&lt;2" in text


def test_attention_report_is_deterministic():
    engine = fresh_engine(3, seed=5)
    first = open_bracket_attention(engine, [PROBE])[0]
    second = open_bracket_attention(engine, [PROBE])[0]
    assert np.array_equal(first.matrix, second.matrix)
    assert first.target_mass == second.target_mass
