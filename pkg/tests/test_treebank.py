import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stacklm import treebank as tb
from stacklm.stack import replay

from treeutil import leaf_depths, random_binary_tree


def random_parse_tree(rng, depth=0):
    if depth >= 3 or rng.random() < 0.35:
        return tb.ParseTree(token=f"w{rng.integers(0, 50)}")
    n_children = int(rng.integers(1, 5))
    kids = tuple(random_parse_tree(rng, depth + 1) for _ in range(n_children))
    return tb.ParseTree(label=f"L{rng.integers(0, 9)}", children=kids)


# ------------------------------------------------------------- parsing

def test_parse_two_child_tree():
    tree = tb.parse_sexpr("(S (NP The dog) (VP is happy))")
    assert tree.label == "S" and len(tree.children) == 2
    assert tb.leaf_tokens(tree) == ["The", "dog", "is", "happy"]
    assert tree.children[0].children[0].token == "The"


def test_parse_single_leaf_tree():
    tree = tb.parse_sexpr("(X a)")
    assert tree.label == "X"
    assert tb.leaf_tokens(tree) == ["a"]


def test_parse_errors_carry_char_offsets():
    with pytest.raises(tb.ParseError, match="char 0"):
        tb.parse_sexpr("")
    with pytest.raises(tb.ParseError, match="unbalanced '\\(' at char 0"):
        tb.parse_sexpr("(X (Y a b)")       # the outer '(' never closes
    with pytest.raises(tb.ParseError, match="char 6"):
        tb.parse_sexpr("(X a) (Y b)")
    with pytest.raises(tb.ParseError, match="unexpected '\\)' at char 0"):
        tb.parse_sexpr(")")
    with pytest.raises(tb.ParseError, match="no children"):
        tb.parse_sexpr("(X)")


@settings(deadline=None, max_examples=200)
@given(st.integers(0, 100_000))
def test_parse_format_roundtrip(seed):
    tree = random_parse_tree(np.random.default_rng(seed))
    if tree.is_leaf:
        tree = tb.ParseTree(label="S", children=(tree,))
    assert tb.parse_sexpr(tb.format_sexpr(tree)) == tree


# ---------------------------------------------------------- binarize

def test_binarize_left_branching():
    assert tb.binarize(tb.parse_sexpr("(X a b c)")) == ((0, 1), 2)


def test_binarize_keeps_binary_shape():
    tree = tb.parse_sexpr("(S (NP The dog) (VP is happy))")
    assert tb.binarize(tree) == ((0, 1), (2, 3))


def test_binarize_collapses_unary_chain():
    assert tb.binarize(tb.parse_sexpr("(X (Y (Z a)))")) == 0


@settings(deadline=None, max_examples=200)
@given(st.integers(0, 100_000))
def test_binarize_preserves_leaf_count_and_order(seed):
    tree = random_parse_tree(np.random.default_rng(seed))
    bt = tb.binarize(tree)
    assert tb.tree_leaves(bt) == list(range(len(tb.leaf_tokens(tree))))


# -------------------------------------------------------- attach_root

def test_attach_root_single_leaf():
    assert tb.attach_root(0) == (0, 1)


def test_attach_root_paper_example():
    bare = ((0, 1), (2, 3))
    assert tb.attach_root(bare) == (0, ((1, 2), (3, 4)))


def test_final_token_attaches_to_root():
    rng = np.random.default_rng(0)
    for _ in range(25):
        bt = tb.attach_root(random_binary_tree(rng, 0, int(rng.integers(1, 10))))
        r = tb.oracle_extract(bt)
        assert r[-1] == 0


# ------------------------------------------------------ oracle_extract

def test_oracle_extract_paper_tree():
    bt = (0, ((1, 2), (3, 4)))    # (ROOT ((The dog) (is happy)))
    assert tb.oracle_extract(bt) == [0, 1, 1, 3, 0]


def test_oracle_extract_bare_tree_attaches_happy_to_dog():
    assert tb.oracle_extract(((0, 1), (2, 3))) == [0, 0, 2, 1]


def test_oracle_extract_left_branching():
    assert tb.oracle_extract((((0, 1), 2), 3)) == [0, 0, 1, 2]


def test_oracle_extract_right_branching():
    assert tb.oracle_extract((0, (1, (2, 3)))) == [0, 1, 2, 0]


# --------------------------------------------------- tape precompute

def test_tape_matrix_paper_rows():
    # ROOT-prefixed "The dog is happy" up to the (is happy) reduce; the
    # figure omits the ROOT column
    S = tb.precompute_tape_matrix(5, [0, 1, 1, 3, 2])
    assert S[3].tolist() == [0, 1, 1, 0, 0]
    assert S[4].tolist() == [0, 2, 2, 2, 2]
    assert S[3, 1:4].tolist() == [1, 1, 0]
    assert S[4, 1:5].tolist() == [2, 2, 2, 2]


def test_tape_matrix_all_shift_is_zero():
    S = tb.precompute_tape_matrix(6, list(range(6)))
    assert not S.any()


def test_tape_matrix_rejects_bad_supervision():
    with pytest.raises(tb.SupervisionError, match="position 3"):
        tb.precompute_tape_matrix(4, [0, 1, 1, 1])
    with pytest.raises(ValueError, match="length"):
        tb.precompute_tape_matrix(3, [0, 1])


def test_tape_matrix_is_lower_triangular():
    S = tb.precompute_tape_matrix(5, [0, 1, 1, 3, 0])
    assert not np.triu(S, k=1).any()


@settings(deadline=None, max_examples=60)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_tape_rows_match_tree_walk_oracle(seed, n):
    tree = random_binary_tree(np.random.default_rng(seed), 0, n)
    r = tb.oracle_extract(tree)
    S = tb.precompute_tape_matrix(n, r)
    for k in range(n):
        _, forest = replay(r[: k + 1])
        expect = {}
        for sub in forest:
            expect.update(leaf_depths(sub))
        assert S[k, : k + 1].tolist() == [expect[j] for j in range(k + 1)]
        assert S[k, : k + 1].max() <= k


# -------------------------------------------------------------- corpus

TWO_TREES = "(S (NP The dog) (VP is happy))\n(S (NP (DT A) (NN cat)) (VP sat))\n"


def test_load_corpus_layout(tmp_path):
    path = tmp_path / "toy.trees"
    path.write_text(TWO_TREES)
    corpus = tb.load_corpus(path)
    assert corpus.vocab.id_to_token[:2] == (tb.ROOT_TOKEN, tb.EOS_TOKEN)
    assert len(corpus.sequences) == 2

    ids, r = corpus.sequences[0], corpus.supervision[0]
    assert ids[0] == tb.ROOT_ID and ids[-1] == tb.EOS_ID
    assert len(ids) == len(r) == 6            # ROOT + 4 words + EOS
    assert r.tolist() == [0, 1, 1, 3, 0, 5]   # EOS shifts, happy -> ROOT
    toks = [corpus.vocab.id_to_token[i] for i in ids]
    assert toks == ["<ROOT>", "The", "dog", "is", "happy", "<EOS>"]


def test_load_corpus_frozen_vocab_rejects_unknown(tmp_path):
    known = tmp_path / "a.trees"
    known.write_text("(S (X a) (Y b))\n")
    vocab = tb.load_corpus(known).vocab
    bad = tmp_path / "b.trees"
    bad.write_text("(S (X a) (Y b))\n(S (X a) (Y zzz))\n")
    with pytest.raises(ValueError, match="line 2.*zzz"):
        tb.load_corpus(bad, vocab=vocab)


def test_load_corpus_parse_error_names_line(tmp_path):
    path = tmp_path / "bad.trees"
    path.write_text("(S (X a) (Y b))\n(S (X a\n")
    with pytest.raises(tb.ParseError, match="line 2"):
        tb.load_corpus(path)


def test_load_corpus_skips_blank_lines(tmp_path):
    path = tmp_path / "gaps.trees"
    path.write_text("(S (X a) (Y b))\n\n(S (X c) (Y d))\n")
    corpus = tb.load_corpus(path)
    assert len(corpus.sequences) == 2


def test_supervision_valid_for_every_sentence(tmp_path):
    path = tmp_path / "toy.trees"
    path.write_text(TWO_TREES)
    corpus = tb.load_corpus(path)
    for ids, r in zip(corpus.sequences, corpus.supervision):
        S = tb.precompute_tape_matrix(len(ids), r.tolist())
        assert S.shape == (len(ids), len(ids))


def test_cache_roundtrip(tmp_path):
    src = tmp_path / "toy.trees"
    src.write_text(TWO_TREES)
    corpus = tb.load_corpus(src)
    cache = tmp_path / "toy.cache"
    tb.save_corpus_cache(corpus, cache)
    loaded = tb.load_corpus_cache(cache)
    assert loaded.vocab.id_to_token == corpus.vocab.id_to_token
    for a, b in zip(corpus.sequences, loaded.sequences):
        assert np.array_equal(a, b)
    for a, b in zip(corpus.supervision, loaded.supervision):
        assert np.array_equal(a, b)

    again = tmp_path / "again.cache"
    tb.save_corpus_cache(loaded, again)
    assert cache.read_bytes() == again.read_bytes()


def test_cache_rejects_bad_magic_and_version(tmp_path):
    path = tmp_path / "junk.cache"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        tb.load_corpus_cache(path)

    src = tmp_path / "toy.trees"
    src.write_text("(S (X a) (Y b))\n")
    good = tmp_path / "good.cache"
    tb.save_corpus_cache(tb.load_corpus(src), good)
    blob = bytearray(good.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="version 99"):
        tb.load_corpus_cache(path)
