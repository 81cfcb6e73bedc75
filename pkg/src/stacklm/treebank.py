"""Bracketed-tree ingestion and attachment supervision.

Pipeline: parse PTB-style s-expressions, binarize left-branching, prepend a
ROOT leaf, then read off each token's gold attachment by walking maximal
constituents. The resulting sequences drive both the training tape matrix
and the stack machine (see stack.replay for the inverse direction).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .stack import AttachmentError, StackState, update_stack_tape

ROOT_TOKEN = "<ROOT>"
EOS_TOKEN = "<EOS>"
ROOT_ID = 0
EOS_ID = 1

_CACHE_MAGIC = b"SLMC"
_CACHE_VERSION = 1


class ParseError(ValueError):
    """Malformed bracketed input; message carries a character offset."""


class SupervisionError(ValueError):
    """An attachment sequence that no incremental parse can produce."""


# --------------------------------------------------------------------------
# s-expression trees


@dataclass(frozen=True)
class ParseTree:
    """A node of a labelled n-ary tree; leaves carry the token string."""

    label: str | None = None
    children: tuple["ParseTree", ...] = ()
    token: str | None = None

    @property
    def is_leaf(self):
        return self.token is not None


def parse_sexpr(text):
    """Parse one bracketed tree, e.g. ``(S (NP The dog) (VP is happy))``.

    Leaves are bare atoms; every parenthesised group is ``(LABEL child+)``.
    """
    tokens = _lex(text)
    if not tokens:
        raise ParseError("empty input at char 0")
    tree, pos = _parse_expr(tokens, 0)
    if pos != len(tokens):
        raise ParseError(f"trailing content at char {tokens[pos][1]}")
    return tree


def _lex(text):
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch in "()":
            out.append((ch, i))
            i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(text) and not text[j].isspace() and text[j] not in "()":
                j += 1
            out.append((text[i:j], i))
            i = j
    return out


def _parse_expr(tokens, pos):
    tok, offset = tokens[pos]
    if tok == ")":
        raise ParseError(f"unexpected ')' at char {offset}")
    if tok != "(":
        return ParseTree(token=tok), pos + 1
    pos += 1
    if pos >= len(tokens):
        raise ParseError(f"unbalanced '(' at char {offset}")
    label, label_off = tokens[pos]
    if label in "()":
        raise ParseError(f"expected node label at char {label_off}")
    pos += 1
    children = []
    while True:
        if pos >= len(tokens):
            raise ParseError(f"unbalanced '(' at char {offset}")
        if tokens[pos][0] == ")":
            break
        child, pos = _parse_expr(tokens, pos)
        children.append(child)
    if not children:
        raise ParseError(f"node '{label}' at char {offset} has no children")
    return ParseTree(label=label, children=tuple(children)), pos + 1


def format_sexpr(tree):
    """Inverse of parse_sexpr up to whitespace."""
    if tree.is_leaf:
        return tree.token
    inner = " ".join(format_sexpr(c) for c in tree.children)
    return f"({tree.label} {inner})"


def leaf_tokens(tree):
    """Token strings in left-to-right leaf order."""
    if tree.is_leaf:
        return [tree.token]
    out = []
    for child in tree.children:
        out.extend(leaf_tokens(child))
    return out


# --------------------------------------------------------------------------
# binary trees over token indices
#
# representation: leaf = int, internal node = (left, right) tuple


def binarize(tree):
    """Left-branching binarization with labels dropped: (A B C) -> ((A B) C).

    Unary chains collapse onto their single descendant. Leaves become their
    left-to-right index.
    """
    counter = iter(range(len(leaf_tokens(tree))))

    def rec(t):
        if t.is_leaf:
            return next(counter)
        acc = rec(t.children[0])
        for child in t.children[1:]:
            acc = (acc, rec(child))
        return acc

    return rec(tree)


def tree_leaves(bt):
    if isinstance(bt, int):
        return [bt]
    return tree_leaves(bt[0]) + tree_leaves(bt[1])


def rightmost_leaf(bt):
    while not isinstance(bt, int):
        bt = bt[1]
    return bt


def attach_root(bt):
    """Prepend a ROOT leaf at index 0; existing leaf indices shift up by 1."""

    def shift(t):
        if isinstance(t, int):
            return t + 1
        return (shift(t[0]), shift(t[1]))

    return (0, shift(bt))


def oracle_extract(bt):
    """Gold attachment index for every leaf of a binary tree.

    For leaf k, let C be the maximal constituent whose rightmost leaf is k:
    r[k] is k itself when C is the leaf (a shift), otherwise the rightmost
    leaf of C's left child. Replaying r through the stack machine rebuilds
    the tree exactly.
    """
    r = {}

    def visit(t, maximal):
        if isinstance(t, int):
            if maximal:
                r[t] = t
            return
        left, right = t
        if maximal:
            r[rightmost_leaf(right)] = rightmost_leaf(left)
        visit(left, True)
        visit(right, False)

    visit(bt, True)
    return [r[k] for k in range(len(r))]


def precompute_tape_matrix(seq_len, r):
    """Lower-triangular (seq_len, seq_len) matrix of tape snapshots.

    Row k holds the tape after token k's attachment; entries past the
    diagonal stay 0 and are meaningless without the causal mask.
    """
    if len(r) != seq_len:
        raise ValueError(f"sequence length {seq_len} but {len(r)} attachments")
    out = np.zeros((seq_len, seq_len), dtype=np.int64)
    state = StackState()
    for k, r_k in enumerate(r):
        try:
            state = update_stack_tape(state, k, int(r_k))
        except AttachmentError as err:
            raise SupervisionError(f"position {k}: {err}") from None
        out[k, : k + 1] = state.tape
    return out


# --------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(compare=False)

    def __len__(self):
        return len(self.id_to_token)

    @classmethod
    def build(cls, tokens):
        ordered = [ROOT_TOKEN, EOS_TOKEN]
        seen = set(ordered)
        for tok in tokens:
            if tok not in seen:
                seen.add(tok)
                ordered.append(tok)
        return cls(tuple(ordered), {t: i for i, t in enumerate(ordered)})


@dataclass
class Corpus:
    """Id sequences plus their gold attachment supervision.

    Every sequence is [ROOT, tokens.., EOS]; the matching r-sequence ends in
    a shift for EOS and sends the final real token to ROOT (index 0).
    """

    vocab: Vocabulary
    sequences: list[np.ndarray]
    supervision: list[np.ndarray]


def sentence_to_example(tree):
    """ParseTree -> (token strings, r-sequence incl. ROOT and EOS slots)."""
    tokens = leaf_tokens(tree)
    bt = attach_root(binarize(tree))
    r = oracle_extract(bt)
    r.append(len(r))  # EOS shifts
    return tokens, r


def load_corpus(path, vocab=None):
    """Read one bracketed tree per line into a Corpus.

    With vocab=None a fresh vocabulary is built over the file; passing a
    frozen Vocabulary makes unseen tokens a hard error naming the line.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]

    examples = []
    for lineno, line in enumerate(lines, start=1):
        if not line:
            continue
        try:
            tree = parse_sexpr(line)
        except ParseError as err:
            raise ParseError(f"line {lineno}: {err}") from None
        examples.append((lineno, sentence_to_example(tree)))

    if vocab is None:
        all_tokens = [t for _, (toks, _) in examples for t in toks]
        vocab = Vocabulary.build(all_tokens)

    sequences = []
    supervision = []
    for lineno, (tokens, r) in examples:
        ids = [ROOT_ID]
        for tok in tokens:
            if tok not in vocab.token_to_id:
                raise ValueError(f"line {lineno}: token {tok!r} not in vocabulary")
            ids.append(vocab.token_to_id[tok])
        ids.append(EOS_ID)
        sequences.append(np.asarray(ids, dtype=np.int64))
        supervision.append(np.asarray(r, dtype=np.int64))
    return Corpus(vocab, sequences, supervision)


# --------------------------------------------------------------------------
# binary cache
#
# byte layout, little-endian throughout:
#   magic "SLMC" | version u32 | vocab_size u32
#   per vocab entry: byte_len u32 | utf-8 bytes
#   n_sequences u32
#   per sequence: length u32 | ids u32[length] | r u32[length]


def save_corpus_cache(corpus, path):
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<II", _CACHE_VERSION, len(corpus.vocab)))
        for tok in corpus.vocab.id_to_token:
            raw = tok.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(struct.pack("<I", len(corpus.sequences)))
        for ids, r in zip(corpus.sequences, corpus.supervision):
            fh.write(struct.pack("<I", len(ids)))
            fh.write(ids.astype("<u4").tobytes())
            fh.write(r.astype("<u4").tobytes())


def load_corpus_cache(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CACHE_MAGIC:
        raise ValueError(f"{path}: not a corpus cache (bad magic)")
    version, vocab_size = struct.unpack_from("<II", blob, 4)
    if version != _CACHE_VERSION:
        raise ValueError(f"{path}: cache version {version}, expected {_CACHE_VERSION}")
    off = 12
    tokens = []
    for _ in range(vocab_size):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        tokens.append(blob[off : off + n].decode("utf-8"))
        off += n
    vocab = Vocabulary(tuple(tokens), {t: i for i, t in enumerate(tokens)})
    (n_seqs,) = struct.unpack_from("<I", blob, off)
    off += 4
    sequences = []
    supervision = []
    for _ in range(n_seqs):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        ids = np.frombuffer(blob, dtype="<u4", count=n, offset=off).astype(np.int64)
        off += 4 * n
        r = np.frombuffer(blob, dtype="<u4", count=n, offset=off).astype(np.int64)
        off += 4 * n
        sequences.append(ids)
        supervision.append(r)
    return Corpus(vocab, sequences, supervision)
