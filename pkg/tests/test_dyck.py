import json
import pathlib

import pytest
from hypothesis import given, settings, strategies as st

from stacklm import dyck
from stacklm.stack import replay
from stacklm.treebank import (
    EOS_ID,
    ROOT_ID,
    attach_root,
    binarize,
    load_corpus,
    oracle_extract,
    parse_sexpr,
    precompute_tape_matrix,
    tree_leaves,
)

DATA = pathlib.Path(__file__).parent / "data"

SMALL = dyck.DyckSpec(num_types=3, max_depth=5, min_len=8, max_len=64, seed=7)


# ---------------------------------------------------------------- spec

def test_spec_validation():
    with pytest.raises(dyck.DyckError, match="num_types"):
        dyck.DyckSpec(num_types=0, max_depth=3)
    with pytest.raises(dyck.DyckError, match="max_depth"):
        dyck.DyckSpec(num_types=2, max_depth=0)
    with pytest.raises(dyck.DyckError, match="open_prob"):
        dyck.DyckSpec(num_types=2, max_depth=3, open_prob=1.0)


def test_infeasible_lengths_rejected():
    spec = dyck.DyckSpec(num_types=2, max_depth=3, min_len=9, max_len=9)
    with pytest.raises(dyck.DyckError, match="even length"):
        dyck.sample_dyck(spec, 1)
    spec = dyck.DyckSpec(num_types=2, max_depth=3, min_len=10, max_len=4)
    with pytest.raises(dyck.DyckError, match="even length"):
        dyck.sample_dyck(spec, 1)


def test_vocabulary_layout():
    vocab = dyck.dyck_vocabulary(3)
    assert vocab.id_to_token == ("<ROOT>", "<EOS>", "<1", ">1", "<2", ">2", "<3", ">3")
    assert len(vocab) == 2 * 3 + 2


# ------------------------------------------------------------- matching

def test_match_brackets_pairs_and_depths():
    matching, depth = dyck.match_brackets(("<1", "<2", ">2", ">1"))
    assert matching == (3, 2, 1, 0)
    assert depth == (1, 2, 2, 1)


def test_match_brackets_rejects_violations():
    with pytest.raises(dyck.DyckError, match="no open"):
        dyck.match_brackets((">1",))
    with pytest.raises(dyck.DyckError, match="mismatch at position 1"):
        dyck.match_brackets(("<1", ">2"))
    with pytest.raises(dyck.DyckError, match="unclosed"):
        dyck.match_brackets(("<1", "<2", ">2"))
    with pytest.raises(dyck.DyckError, match="not a bracket"):
        dyck.match_brackets(("<1", "x", ">1"))


# -------------------------------------------------------------- sampler

def test_samples_are_valid_and_within_bounds():
    strings = dyck.sample_dyck(SMALL, 300)
    assert len(strings) == 300
    for s in strings:
        assert dyck.DyckString.from_tokens(s.tokens) == s
        assert SMALL.min_len <= len(s.tokens) <= SMALL.max_len
        assert s.max_depth <= SMALL.max_depth
        types = {tok[1:] for tok in s.tokens}
        assert types <= {"1", "2", "3"}


def test_depth_one_spec_gives_flat_pair_chains():
    spec = dyck.DyckSpec(num_types=2, max_depth=1, min_len=6, max_len=40, seed=3)
    for s in dyck.sample_dyck(spec, 100):
        assert set(s.depth) == {1}
        for i, tok in enumerate(s.tokens):
            if tok.startswith("<"):
                assert s.matching[i] == i + 1


def test_max_depth_is_reached_empirically():
    spec = dyck.DyckSpec(num_types=2, max_depth=6, min_len=16, max_len=96, seed=11)
    observed = max(s.max_depth for s in dyck.sample_dyck(spec, 3000))
    assert observed == spec.max_depth


def test_sampler_deterministic_per_seed_and_shard():
    a = dyck.sample_dyck(SMALL, 20)
    b = dyck.sample_dyck(SMALL, 20)
    assert [s.tokens for s in a] == [s.tokens for s in b]
    c = dyck.sample_dyck(SMALL, 20, shard=1)
    assert [s.tokens for s in a] != [s.tokens for s in c]


# ----------------------------------------------------------- gold trees

def test_trivial_pair_tree():
    tree = dyck.dyck_gold_tree(("<1", ">1"))
    assert tree == (0, (1, 2))     # ROOT on top of node(open, close)


def test_gold_oracles_match_golden_file():
    for line in (DATA / "dyck_oracle_golden.txt").read_text().splitlines():
        toks_part, r_part = line.split(" -> ")
        tokens = tuple(toks_part.split())
        expect = [int(x) for x in r_part.split()]
        assert oracle_extract(dyck.dyck_gold_tree(tokens)) == expect


def test_gold_tree_rejects_ill_nested():
    with pytest.raises(dyck.DyckError):
        dyck.dyck_gold_tree(("<1", ">2"))


def test_pair_intervals_are_tree_spans():
    for s in dyck.sample_dyck(SMALL, 60):
        bare = dyck.dyck_gold_tree(s)[1]   # drop ROOT; leaves shifted by 1
        spans = set()

        def collect(t):
            leaves = tree_leaves(t)
            spans.add((leaves[0] - 1, leaves[-1] - 1))
            if not isinstance(t, int):
                collect(t[0])
                collect(t[1])

        collect(bare)
        for i, j in enumerate(s.matching):
            if s.tokens[i].startswith("<"):
                assert (i, j) in spans
        assert len(tree_leaves(bare)) == len(s.tokens)


def test_generated_strings_roundtrip_through_replay():
    for s in dyck.sample_dyck(SMALL, 80):
        tree = dyck.dyck_gold_tree(s)
        state, forest = replay(oracle_extract(tree))
        assert forest == [tree]
        assert len(state.stack) == 1


def test_sexpr_rendering_reenters_pipeline():
    for s in dyck.sample_dyck(SMALL, 40):
        parsed = parse_sexpr(dyck.dyck_to_sexpr(s))
        assert attach_root(binarize(parsed)) == dyck.dyck_gold_tree(s)


# ---------------------------------------------------- depth generalization

def test_depth_gen_split_respects_range():
    out = dyck.build_depth_gen_split(SMALL, (7, 10), 40)
    assert len(out) == 40
    for s in out:
        assert 7 <= s.max_depth <= 10


def test_depth_gen_split_deterministic():
    a = dyck.build_depth_gen_split(SMALL, (6, 8), 10)
    b = dyck.build_depth_gen_split(SMALL, (6, 8), 10)
    assert [s.tokens for s in a] == [s.tokens for s in b]


def test_depth_gen_rejects_bad_range():
    with pytest.raises(dyck.DyckError, match="depth range"):
        dyck.build_depth_gen_split(SMALL, (5, 3), 5)


# --------------------------------------------------------- long range

def test_longrange_items_hit_targets():
    items = dyck.build_longrange_split(SMALL, targets=(30, 60), count=25)
    assert len(items) == 50
    by_target = {}
    for item in items:
        by_target.setdefault(item.target, []).append(item)
        slack = max(1, round(0.10 * item.target))
        assert abs(item.distance - item.target) <= slack
        # the predicted close matches the open it closes
        matching, _ = dyck.match_brackets(item.source)
        c = len(item.prefix)
        assert item.source[c] == item.gold_close
        assert c - matching[c] == item.distance
        assert item.gold_close[1:] == item.source[matching[c]][1:]
        assert item.prefix == item.source[:c]
    assert set(by_target) == {30, 60}


def test_longrange_prefix_cap():
    items = dyck.build_longrange_split(SMALL, targets=(30,), count=15, max_prefix_len=80)
    assert all(len(item.prefix) <= 80 for item in items)


def test_longrange_budget_error_reports_progress():
    with pytest.raises(dyck.DyckError, match="got 0 of 5"):
        dyck.build_longrange_split(SMALL, targets=(60,), count=5, max_attempts_factor=1)


def test_longrange_excludes_training_strings():
    train = dyck.sample_dyck(SMALL, 200)
    train_set = {s.tokens for s in train}
    items = dyck.build_longrange_split(
        SMALL, targets=(30,), count=20, exclude=train_set
    )
    assert all(item.source not in train_set for item in items)


def test_longrange_file_roundtrip(tmp_path):
    items = dyck.build_longrange_split(SMALL, targets=(30,), count=8)
    path = tmp_path / "lr.jsonl"
    dyck.write_longrange_file(items, path)
    loaded = dyck.read_longrange_file(path)
    assert [(i.prefix, i.gold_close, i.distance, i.target) for i in loaded] == [
        (i.prefix, i.gold_close, i.distance, i.target) for i in items
    ]


# ---------------------------------------------------------------- files

def test_corpus_file_feeds_treebank_loader(tmp_path):
    strings = dyck.sample_dyck(SMALL, 30)
    path = tmp_path / "train.trees"
    dyck.write_corpus_file(strings, path)
    corpus = load_corpus(path, vocab=dyck.dyck_vocabulary(SMALL.num_types))
    assert len(corpus.sequences) == 30
    for s, ids, r in zip(strings, corpus.sequences, corpus.supervision):
        assert len(ids) == len(s.tokens) + 2
        assert ids[0] == ROOT_ID and ids[-1] == EOS_ID
        precompute_tape_matrix(len(ids), r.tolist())   # must not raise


def test_dyck_corpus_matches_the_file_path(tmp_path):
    strings = dyck.sample_dyck(SMALL, 12)
    direct = dyck.dyck_corpus(strings, SMALL.num_types)

    path = tmp_path / "train.trees"
    dyck.write_corpus_file(strings, path)
    loaded = load_corpus(path, vocab=dyck.dyck_vocabulary(SMALL.num_types))

    assert direct.vocab == loaded.vocab
    for a, b in zip(direct.sequences, loaded.sequences):
        assert a.tolist() == b.tolist()
    for a, b in zip(direct.supervision, loaded.supervision):
        assert a.tolist() == b.tolist()


def test_manifest_roundtrip(tmp_path):
    path = tmp_path / "manifest.jsonl"
    records = [
        dyck.manifest_record("train", "train.trees", SMALL, 100),
        dyck.manifest_record("longrange", "lr.jsonl", SMALL, 40, target=60),
    ]
    dyck.write_manifest(records, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    first = json.loads(lines[0])
    assert first["kind"] == "train" and first["count"] == 100
    assert first["spec"]["num_types"] == SMALL.num_types
    assert json.loads(lines[1])["target"] == 60
