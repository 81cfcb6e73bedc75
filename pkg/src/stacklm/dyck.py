"""Bounded-depth Dyck corpus generation with gold incremental parses.

Bracket tokens are ASCII markers: ``<t`` opens and ``>t`` closes type t, so
they survive the bracketed treebank format unescaped. The gold tree for a
matched pair puts the open bracket on top of a left-branching fold of the
pair's children followed by its close:

    pair(i, j) = (open_i, fold_left(children.., close_j))

which makes every matched pair a constituent and gives each close bracket a
gold attachment inside its own pair (the open itself when the pair is
childless). Top-level sibling pairs fold left-branching, then ROOT attaches.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .treebank import (
    EOS_ID,
    EOS_TOKEN,
    ROOT_ID,
    ROOT_TOKEN,
    Corpus,
    Vocabulary,
    attach_root,
    oracle_extract,
)


class DyckError(ValueError):
    """Ill-nested input or an unsatisfiable generation request."""


# --------------------------------------------------------------------------
# specs and strings


@dataclass(frozen=True)
class DyckSpec:
    num_types: int
    max_depth: int
    open_prob: float = 0.49
    min_len: int = 4
    max_len: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.num_types < 1:
            raise DyckError(f"num_types must be >= 1, got {self.num_types}")
        if self.max_depth < 1:
            raise DyckError(f"max_depth must be >= 1, got {self.max_depth}")
        if not 0.0 < self.open_prob < 1.0:
            raise DyckError(f"open_prob must be in (0, 1), got {self.open_prob}")


def open_token(t):
    return f"<{t}"


def close_token(t):
    return f">{t}"


def dyck_vocabulary(num_types):
    """Fixed vocabulary for a bracket inventory: ROOT, EOS, then pairs."""
    tokens = [ROOT_TOKEN, EOS_TOKEN]
    for t in range(1, num_types + 1):
        tokens.append(open_token(t))
        tokens.append(close_token(t))
    return Vocabulary(tuple(tokens), {tok: i for i, tok in enumerate(tokens)})


@dataclass(frozen=True)
class DyckString:
    """A well-nested bracket string with its pairing and nesting depths.

    matching[i] is the partner index of position i (an involution); depth[i]
    is the nesting depth of the bracket at i, outermost pairs at depth 1.
    """

    tokens: tuple[str, ...]
    matching: tuple[int, ...]
    depth: tuple[int, ...]

    @property
    def max_depth(self):
        return max(self.depth)

    @classmethod
    def from_tokens(cls, tokens):
        tokens = tuple(tokens)
        matching, depth = match_brackets(tokens)
        return cls(tokens, matching, depth)


def match_brackets(tokens):
    """Pair up open/close positions; raises DyckError on any violation."""
    matching = [0] * len(tokens)
    depth = [0] * len(tokens)
    opens = []
    for i, tok in enumerate(tokens):
        if tok.startswith("<"):
            opens.append(i)
            depth[i] = len(opens)
        elif tok.startswith(">"):
            if not opens:
                raise DyckError(f"close bracket with no open at position {i}")
            j = opens.pop()
            if tokens[j][1:] != tok[1:]:
                raise DyckError(
                    f"type mismatch at position {i}: {tokens[j]!r} closed by {tok!r}"
                )
            matching[i], matching[j] = j, i
            depth[i] = depth[j]
        else:
            raise DyckError(f"not a bracket token at position {i}: {tok!r}")
    if opens:
        raise DyckError(f"unclosed bracket at position {opens[-1]}")
    if not tokens:
        raise DyckError("empty string")
    return tuple(matching), tuple(depth)


# --------------------------------------------------------------------------
# sampling


def _check_lengths(spec):
    lo = max(spec.min_len, 2)
    evens = [n for n in range(lo, spec.max_len + 1) if n % 2 == 0]
    if not evens:
        raise DyckError(
            f"no even length in [{spec.min_len}, {spec.max_len}]: "
            "every well-nested string has even length"
        )


def _draw_tokens(rng, spec):
    toks = []
    opens = []
    while True:
        depth = len(opens)
        remaining = spec.max_len - len(toks)
        if depth == 0:
            done = len(toks) >= spec.min_len
            if done and (remaining < 2 or rng.random() >= spec.open_prob):
                break
            open_new = True
        elif remaining <= depth or depth >= spec.max_depth:
            open_new = False
        else:
            open_new = rng.random() < spec.open_prob
        if open_new:
            t = int(rng.integers(1, spec.num_types + 1))
            opens.append(t)
            toks.append(open_token(t))
        else:
            toks.append(close_token(opens.pop()))
    return toks


def sample_dyck(spec, count, shard=0):
    """Draw `count` well-nested strings; (seed, shard) fixes the stream."""
    _check_lengths(spec)
    rng = np.random.default_rng([spec.seed, shard])
    return [DyckString.from_tokens(_draw_tokens(rng, spec)) for _ in range(count)]


# --------------------------------------------------------------------------
# gold trees


def _fold_left(items):
    acc = items[0]
    for item in items[1:]:
        acc = (acc, item)
    return acc


def _bare_gold_tree(s):
    def pair(i, j):
        kids = siblings(i + 1, j)
        return (i, _fold_left(kids + [j]))

    def siblings(lo, hi):
        out = []
        i = lo
        while i < hi:
            out.append(pair(i, s.matching[i]))
            i = s.matching[i] + 1
        return out

    return _fold_left(siblings(0, len(s.tokens)))


def dyck_gold_tree(s):
    """ROOT-attached binary gold tree for a well-nested string."""
    if not isinstance(s, DyckString):
        s = DyckString.from_tokens(s)
    return attach_root(_bare_gold_tree(s))


def dyck_to_sexpr(s):
    """The gold tree in the bracketed treebank format (dummy X labels)."""
    if not isinstance(s, DyckString):
        s = DyckString.from_tokens(s)

    def render(t):
        if isinstance(t, int):
            return s.tokens[t]
        return f"(X {render(t[0])} {render(t[1])})"

    return render(_bare_gold_tree(s))


# --------------------------------------------------------------------------
# generalization splits


def build_depth_gen_split(train_spec, depth_range, count):
    """Strings whose max nesting depth falls in [lo, hi], inclusive.

    Sampled by rejection from the training spec with the depth ceiling and
    length budget raised to make the range reachable.
    """
    lo, hi = depth_range
    if not 1 <= lo <= hi:
        raise DyckError(f"bad depth range [{lo}, {hi}]")
    spec = replace(
        train_spec,
        max_depth=hi,
        min_len=max(train_spec.min_len, 2 * lo),
        max_len=max(train_spec.max_len, 2 * hi + 32),
    )
    _check_lengths(spec)
    rng = np.random.default_rng([spec.seed, 86441, lo, hi])
    out = []
    attempts = 0
    budget = 400 * count
    while len(out) < count:
        if attempts >= budget:
            raise DyckError(
                f"rejection budget exhausted for depths [{lo}, {hi}]: "
                f"got {len(out)} of {count} after {attempts} samples"
            )
        attempts += 1
        s = DyckString.from_tokens(_draw_tokens(rng, spec))
        if lo <= s.max_depth <= hi:
            out.append(s)
    return out


@dataclass(frozen=True)
class LongRangeItem:
    """A prediction problem: given `prefix`, the next token is `gold_close`.

    distance counts tokens from the matching open bracket to the prediction
    slot; source is the full well-nested string the prefix was cut from.
    """

    prefix: tuple[str, ...]
    gold_close: str
    distance: int
    target: int
    source: tuple[str, ...]


def build_longrange_split(
    spec,
    targets,
    count,
    slack_frac=0.10,
    max_prefix_len=None,
    exclude=(),
    max_attempts_factor=200,
):
    """Mine prefixes whose next token closes a target-distant open bracket.

    Returns `count` items per target. Mining rejection-samples from the
    given spec with the length budget raised (and open_prob floored at 0.5,
    giving pair spans the heavy tail long distances need); at most one item
    is cut per sampled string. Strings listed in `exclude` are skipped.
    """
    excluded = {tuple(e) for e in exclude}
    items = []
    for target in sorted(targets):
        slack = max(1, int(round(slack_frac * target)))
        need = int(target * (1 + slack_frac)) + 4
        mine_spec = replace(
            spec,
            open_prob=max(spec.open_prob, 0.5),
            max_len=max(spec.max_len, 2 * need),
        )
        _check_lengths(mine_spec)
        rng = np.random.default_rng([spec.seed, 104729, target])
        got = 0
        attempts = 0
        budget = max_attempts_factor * count
        while got < count:
            if attempts >= budget:
                raise DyckError(
                    f"rejection budget exhausted for target {target}: "
                    f"got {got} of {count} after {attempts} samples"
                )
            attempts += 1
            toks = _draw_tokens(rng, mine_spec)
            if tuple(toks) in excluded:
                continue
            s = DyckString.from_tokens(toks)
            for c, tok in enumerate(s.tokens):
                if not tok.startswith(">"):
                    continue
                d = c - s.matching[c]
                if abs(d - target) > slack:
                    continue
                if max_prefix_len is not None and c > max_prefix_len:
                    continue
                items.append(
                    LongRangeItem(s.tokens[:c], tok, d, target, s.tokens)
                )
                got += 1
                break
    return items


# --------------------------------------------------------------------------
# files


def write_corpus_file(strings, path):
    """One gold tree per line, in the bracketed treebank format."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in strings:
            fh.write(dyck_to_sexpr(s) + "\n")


def write_longrange_file(items, path):
    """JSON-lines: prefix, gold_close, distance, target per item."""
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(
                json.dumps(
                    {
                        "prefix": list(item.prefix),
                        "gold_close": item.gold_close,
                        "distance": item.distance,
                        "target": item.target,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_longrange_file(path):
    items = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            items.append(
                LongRangeItem(
                    tuple(rec["prefix"]),
                    rec["gold_close"],
                    rec["distance"],
                    rec["target"],
                    (),
                )
            )
    return items


def write_manifest(records, path):
    """JSON-lines manifest: one record per emitted split file."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def manifest_record(kind, filename, spec, count, **extra):
    rec = {"kind": kind, "file": filename, "count": count, "spec": asdict(spec)}
    rec.update(extra)
    return rec


def dyck_corpus(strings, num_types):
    """In-memory Corpus over the fixed bracket vocabulary, no file round trip.

    Equivalent to write_corpus_file followed by load_corpus with the
    dyck_vocabulary of the same inventory.
    """
    vocab = dyck_vocabulary(num_types)
    sequences = []
    supervision = []
    for s in strings:
        if not isinstance(s, DyckString):
            s = DyckString.from_tokens(s)
        r = oracle_extract(dyck_gold_tree(s))
        r.append(len(r))
        ids = [ROOT_ID] + [vocab.token_to_id[t] for t in s.tokens] + [EOS_ID]
        sequences.append(np.asarray(ids, dtype=np.int64))
        supervision.append(np.asarray(r, dtype=np.int64))
    return Corpus(vocab, sequences, supervision)
