"""Joint word/attachment decoding: generation, scoring, beams over parses.

Inference here runs on plain numpy arrays instead of the training graph, in
a form chosen so that feeding tokens one at a time against cached keys and
values reproduces, bit for bit, a full re-forward of the same prefix:

  * projections, layer norms, and MLPs go through einsum and elementwise
    ufuncs, whose row t depends only on row t of the input;
  * every attention row and every attachment row is computed by one shared
    helper on exactly the positions that exist, never on padded buffers.

The full-sequence path batches the row-local work and loops over rows for
the rest, so incremental and full scoring agree exactly, not just closely.

All decode-time attachment probabilities are softmaxes renormalized over
the legal candidates (stack rightmosts plus self), which makes hypothesis
scores a proper distribution over valid attachment sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .model import PushdownModel
from .stack import StackState, candidate_mask, replay, update_stack_tape
from .treebank import EOS_ID, ROOT_ID, ParseTree, precompute_tape_matrix

BEAM_MODES = ("score", "parse", "surprisal", "generate")

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class BeamConfig:
    width: int = 32
    mode: str = "score"
    max_len: int = 150
    temperature: float = 1.0

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("beam width must be at least 1")
        if self.mode not in BEAM_MODES:
            raise ValueError(f"mode must be one of {BEAM_MODES}")
        if self.max_len < 2:
            raise ValueError("max_len must allow ROOT plus one token")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


# --------------------------------------------------------------------------
# numpy inference engine


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def _ln(x, gain, bias):
    m = np.mean(x, axis=-1, keepdims=True)
    v = np.var(x, axis=-1, keepdims=True)
    return (x - m) / np.sqrt(v + 1e-5) * gain + bias


def _rows(x, w, b=None):
    out = np.einsum("td,df->tf", x, w)
    return out if b is None else out + b


def _attend_probs(q, k_cache, depth_row, delta, scale):
    """Attention probabilities (K, t) of one query against t cached keys."""
    s = np.einsum("kd,jkd->kj", q, k_cache)
    if depth_row is not None:
        s = s + np.einsum("kd,jkd->kj", q, delta[depth_row])
    s = s * scale
    m = np.max(s, axis=1, keepdims=True)
    e = np.exp(s - m)
    return e / np.sum(e, axis=1, keepdims=True)


def _attend_row(q, k_cache, v_cache, depth_row, delta, scale):
    """One attention row: q (K, hd) against exactly t cached positions."""
    w = _attend_probs(q, k_cache, depth_row, delta, scale)
    return np.einsum("kj,jkd->kd", w, v_cache)


class InferenceModel:
    """Frozen numpy twin of a trained model, shared by all decode paths."""

    def __init__(self, params, config):
        self.config = config
        self.p = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        c = config
        self.scale = 1.0 / math.sqrt(c.head_dim)
        self.attach_scale = 1.0 / math.sqrt(c.d_model)
        self.delta = {}
        for i in c.pushdown_layers:
            table = self.p[f"layer{i}.attn.depth_table"]
            self.delta[i] = table.reshape(c.max_depth + 1, c.n_heads, c.head_dim)
        if c.has_attach_head and c.attach_form == "mlp":
            self.depth_side = np.einsum(
                "ed,df->ef", self.p["attach.depth_table"], self.p["attach.key.w1d"]
            )

    @classmethod
    def from_model(cls, model):
        return cls(model.param_arrays(), model.config)

    @classmethod
    def from_checkpoint(cls, path):
        model, extra = PushdownModel.load(path)
        return cls.from_model(model), extra

    # ------------------------------------------------------------- helpers

    def _clamp_row(self, row):
        row = np.asarray(row, dtype=np.int64)
        c = self.config
        if self.config.clamp_depths:
            return np.minimum(row, c.max_depth)
        if row.size and row.max() > c.max_depth:
            raise ValueError(
                f"tape depth {int(row.max())} exceeds max_depth {c.max_depth}"
            )
        return row

    def _fusion(self, base_row, emb_row, side):
        x = np.concatenate([base_row, emb_row], axis=-1)[None, :]
        h = _gelu(_rows(x, self.p[f"attach.{side}.w1"], self.p[f"attach.{side}.b1"]))
        return _rows(h, self.p[f"attach.{side}.w2"], self.p[f"attach.{side}.b2"])[0]

    def _attach_row(self, qat_row, kat_row, kat_hist, a_hist, depth_row, next_token):
        """Scores for one destination row: columns 0..t-1 plus the self slot.

        qat_row/kat_row: (d,) projections at the destination position;
        kat_hist: (t, d) source projections; a_hist: (t, d) precomputed
        source half of the key MLP (mlp form only); depth_row: (t,) ints.
        """
        emb = self.p["tok_emb"][next_token]
        nwq = self._fusion(qat_row, emb, "nwq")
        nwk = self._fusion(kat_row, emb, "nwk")
        if self.config.attach_form == "mlp":
            hidden = _gelu(
                a_hist + self.depth_side[self._clamp_row(depth_row)]
                + self.p["attach.key.b1"]
            )
            u = _rows(nwq[None, :], self.p["attach.key.w2"])[0]
            pair = np.einsum("d,jd->j", u, hidden)
            pair = (pair + np.einsum("d,d->", nwq, self.p["attach.key.b2"]))
            pair = pair * self.attach_scale
            self_score = np.einsum("d,d->", nwq, nwk) * self.attach_scale
        else:
            nb = _rows(nwq[None, :], self.p["attach.bilinear.w"])[0]
            pair = np.einsum("d,jd->j", nb, kat_hist) * self.attach_scale
            ns = _rows(nwq[None, :], self.p["attach.bilinear.wself"])[0]
            self_score = np.einsum("d,d->", ns, nwk) * self.attach_scale
        return np.concatenate([pair, [self_score]])

    # ---------------------------------------------------------- full pass

    def full_forward(self, tokens, tape=None, collect_attention=False):
        """Parallel forward over a whole sequence; returns a FullForward.

        With collect_attention the per-layer, per-head softmax weights are
        kept as a (L, K, n, n) array, zero above the diagonal; the forward
        computation itself is unchanged.
        """
        c = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        n = len(tokens)
        if n > c.max_seq_len:
            raise ValueError(f"sequence length {n} exceeds {c.max_seq_len}")
        if c.uses_tape_in_attention or (c.has_attach_head and c.attach_form == "mlp"):
            if tape is None:
                raise ValueError(f"{c.mode} decoding requires a tape matrix")
            tape = np.asarray(tape, dtype=np.int64)

        maps = np.zeros((c.n_layers, c.n_heads, n, n)) if collect_attention else None
        x = self.p["tok_emb"][tokens] + self.p["pos_emb"][:n]
        for i in range(c.n_layers):
            pre = f"layer{i}."
            hn = _ln(x, self.p[pre + "ln1.gain"], self.p[pre + "ln1.bias"])
            q = _rows(hn, self.p[pre + "attn.wq"], self.p[pre + "attn.bq"])
            k = _rows(hn, self.p[pre + "attn.wk"], self.p[pre + "attn.bk"])
            v = _rows(hn, self.p[pre + "attn.wv"], self.p[pre + "attn.bv"])
            qh = q.reshape(n, c.n_heads, c.head_dim)
            kh = k.reshape(n, c.n_heads, c.head_dim)
            vh = v.reshape(n, c.n_heads, c.head_dim)
            delta = self.delta.get(i)
            ctx = np.empty((n, c.d_model))
            for t in range(n):
                row = self._clamp_row(tape[t, : t + 1]) if delta is not None else None
                w = _attend_probs(qh[t], kh[: t + 1], row, delta, self.scale)
                if maps is not None:
                    maps[i, :, t, : t + 1] = w
                ctx[t] = np.einsum("kj,jkd->kd", w, vh[: t + 1]).reshape(c.d_model)
            x = x + _rows(ctx, self.p[pre + "attn.wo"], self.p[pre + "attn.bo"])
            hn2 = _ln(x, self.p[pre + "ln2.gain"], self.p[pre + "ln2.bias"])
            f = _gelu(_rows(hn2, self.p[pre + "ff.w1"], self.p[pre + "ff.b1"]))
            x = x + _rows(f, self.p[pre + "ff.w2"], self.p[pre + "ff.b2"])

        h = _ln(x, self.p["ln_f.gain"], self.p["ln_f.bias"])
        lm = _rows(h, self.p["lm_head.w"], self.p["lm_head.b"])
        return FullForward(self, tokens, tape, h, lm, maps)


@dataclass
class FullForward:
    engine: InferenceModel
    tokens: np.ndarray
    tape: Optional[np.ndarray]
    h: np.ndarray           # (n, d) after the final layer norm
    lm_logits: np.ndarray   # (n, V)
    attention: Optional[np.ndarray] = None   # (L, K, n, n) when collected

    def attach_scores(self, i, next_token):
        """Finite attachment scores (i+2,) for the token arriving after row i."""
        e = self.engine
        if e.config.mode == "base-plain":
            raise ValueError("base-plain models have no attachment head")
        p = e.p
        if not hasattr(self, "_qat"):
            self._qat = _rows(self.h, p["attach.q.w"], p["attach.q.b"])
            self._kat = _rows(self.h, p["attach.k.w"], p["attach.k.b"])
            if e.config.attach_form == "mlp":
                self._a = _rows(self._kat, p["attach.key.w1k"])
        a_hist = self._a[: i + 1] if e.config.attach_form == "mlp" else None
        depth_row = self.tape[i, : i + 1] if self.tape is not None else None
        return e._attach_row(
            self._qat[i], self._kat[i], self._kat[: i + 1], a_hist,
            depth_row, next_token,
        )


# --------------------------------------------------------------------------
# incremental state


class Incremental:
    """Per-hypothesis cache; cloning is O(1) because appends never mutate."""

    def __init__(self, engine):
        self.engine = engine
        c = engine.config
        self.k_cache = [np.zeros((0, c.n_heads, c.head_dim)) for _ in range(c.n_layers)]
        self.v_cache = [np.zeros((0, c.n_heads, c.head_dim)) for _ in range(c.n_layers)]
        self.kat = np.zeros((0, c.d_model))
        self.a_hist = np.zeros((0, c.d_model))
        self.qat_last = None
        self.lm_last = None
        self.t = 0

    def clone(self):
        twin = Incremental.__new__(Incremental)
        twin.engine = self.engine
        twin.k_cache = list(self.k_cache)
        twin.v_cache = list(self.v_cache)
        twin.kat = self.kat
        twin.a_hist = self.a_hist
        twin.qat_last = self.qat_last
        twin.lm_last = self.lm_last
        twin.t = self.t
        return twin

    def feed(self, token, tape_row=None):
        """Advance one position; returns the next-token logits row (V,)."""
        e = self.engine
        c = e.config
        t = self.t
        if t >= c.max_seq_len:
            raise ValueError(f"decoding past max_seq_len {c.max_seq_len}")
        if c.uses_tape_in_attention:
            if tape_row is None:
                raise ValueError("pushdown decoding requires the live tape row")
            tape_row = e._clamp_row(tape_row)
            if len(tape_row) != t + 1:
                raise ValueError(f"tape row length {len(tape_row)} != {t + 1}")

        x = (e.p["tok_emb"][token] + e.p["pos_emb"][t])[None, :]
        for i in range(c.n_layers):
            pre = f"layer{i}."
            hn = _ln(x, e.p[pre + "ln1.gain"], e.p[pre + "ln1.bias"])
            q = _rows(hn, e.p[pre + "attn.wq"], e.p[pre + "attn.bq"])
            k = _rows(hn, e.p[pre + "attn.wk"], e.p[pre + "attn.bk"])
            v = _rows(hn, e.p[pre + "attn.wv"], e.p[pre + "attn.bv"])
            self.k_cache[i] = np.concatenate(
                [self.k_cache[i], k.reshape(1, c.n_heads, c.head_dim)], axis=0
            )
            self.v_cache[i] = np.concatenate(
                [self.v_cache[i], v.reshape(1, c.n_heads, c.head_dim)], axis=0
            )
            delta = e.delta.get(i)
            row = tape_row if delta is not None else None
            ctx = _attend_row(
                q.reshape(c.n_heads, c.head_dim), self.k_cache[i], self.v_cache[i],
                row, delta, e.scale,
            ).reshape(1, c.d_model)
            x = x + _rows(ctx, e.p[pre + "attn.wo"], e.p[pre + "attn.bo"])
            hn2 = _ln(x, e.p[pre + "ln2.gain"], e.p[pre + "ln2.bias"])
            f = _gelu(_rows(hn2, e.p[pre + "ff.w1"], e.p[pre + "ff.b1"]))
            x = x + _rows(f, e.p[pre + "ff.w2"], e.p[pre + "ff.b2"])

        h = _ln(x, e.p["ln_f.gain"], e.p["ln_f.bias"])
        if c.has_attach_head:
            kat = _rows(h, e.p["attach.k.w"], e.p["attach.k.b"])
            self.kat = np.concatenate([self.kat, kat], axis=0)
            if c.attach_form == "mlp":
                self.a_hist = np.concatenate(
                    [self.a_hist, _rows(kat, e.p["attach.key.w1k"])], axis=0
                )
            self.qat_last = _rows(h, e.p["attach.q.w"], e.p["attach.q.b"])[0]
        self.t = t + 1
        self.lm_last = _rows(h, e.p["lm_head.w"], e.p["lm_head.b"])[0]
        return self.lm_last

    def attach_scores(self, next_token, tape_row=None):
        """Scores (t+1,) for attaching next_token: sources 0..t-1 plus self."""
        e = self.engine
        i = self.t - 1
        if i < 0:
            raise ValueError("feed at least one token before attaching")
        a_hist = self.a_hist if e.config.attach_form == "mlp" else None
        return e._attach_row(
            self.qat_last, self.kat[i], self.kat, a_hist, tape_row, next_token
        )


# --------------------------------------------------------------------------
# score helpers


def log_softmax_row(row):
    m = float(np.max(row))
    return row - (m + math.log(float(np.sum(np.exp(row - m)))))


def _logsumexp(values):
    m = max(values)
    if math.isinf(m):
        return m
    return m + math.log(sum(math.exp(v - m) for v in values))


def _candidate_logprobs(scores, state, k):
    """Renormalized log-probs over legal slots for token k; dict slot -> lp."""
    mask = candidate_mask(state, k)
    idx = np.flatnonzero(mask)
    sub = scores[idx]
    m = float(np.max(sub))
    lse = m + math.log(float(np.sum(np.exp(sub - m))))
    return {int(j): float(scores[j] - lse) for j in idx}


# --------------------------------------------------------------------------
# hypotheses and beams


@dataclass
class Hypothesis:
    r_history: tuple
    state: StackState
    logp: float
    cache: Incremental


def _start_hypothesis(engine):
    state = update_stack_tape(StackState((), ()), 0, 0)
    cache = Incremental(engine)
    cache.feed(ROOT_ID, np.asarray(state.tape))
    return Hypothesis((0,), state, 0.0, cache)


def _advance(hyp, k, token, r_k, new_logp):
    state = update_stack_tape(hyp.state, k, r_k)
    cache = hyp.cache.clone()
    cache.feed(token, np.asarray(state.tape))
    return Hypothesis(hyp.r_history + (r_k,), state, new_logp, cache)


def _prune(entries, width):
    """Keep the top scores; ties resolve to the lexicographically least r."""
    entries.sort(key=lambda e: (-e[0], e[1]))
    return entries[:width]


def _attachment_beam(engine, tokens, config, collect_surprisals=False):
    """Teacher-forced tokens, beam over attachment sequences.

    Returns (final hypotheses, per-token surprisals). Hypothesis log-probs
    are joint word+attachment scores; no recombination is performed.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens[0] != ROOT_ID:
        raise ValueError("sequences must start at ROOT")
    hyps = [_start_hypothesis(engine)]
    surprisals = []
    for k in range(1, len(tokens)):
        word_lps = [
            float(log_softmax_row(h.cache.lm_last)[tokens[k]]) for h in hyps
        ]
        if collect_surprisals:
            prev = _logsumexp([h.logp for h in hyps])
            joint = _logsumexp([h.logp + w for h, w in zip(hyps, word_lps)])
            surprisals.append(-(joint - prev))
        expansions = []
        for h, wlp in zip(hyps, word_lps):
            scores = h.cache.attach_scores(int(tokens[k]), np.asarray(h.state.tape))
            for r_k, alp in _candidate_logprobs(scores, h.state, k).items():
                expansions.append(
                    (h.logp + wlp + alp, h.r_history + (r_k,), h, r_k)
                )
        kept = _prune(expansions, config.width)
        hyps = [_advance(h, k, int(tokens[k]), r_k, lp) for lp, _, h, r_k in kept]
    return hyps, surprisals


# --------------------------------------------------------------------------
# public decode operations


def score_joint(engine, tokens, r):
    """Joint log-prob of a token sequence with a fixed attachment sequence.

    Word terms are full-vocabulary log-softmaxes; attachment terms are
    renormalized over the legal candidates at each step, matching the beam.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    r = list(r)
    if len(r) != len(tokens):
        raise ValueError("tokens and attachments must have equal length")
    if r[0] != 0 or tokens[0] != ROOT_ID:
        raise ValueError("sequences must start with ROOT shifted")
    n = len(tokens)
    tape = precompute_tape_matrix(n, r)
    fw = engine.full_forward(tokens, tape)
    has_attach = engine.config.has_attach_head

    total = 0.0
    state = update_stack_tape(StackState((), ()), 0, 0)
    for k in range(1, n):
        total += float(log_softmax_row(fw.lm_logits[k - 1])[tokens[k]])
        if has_attach:
            scores = fw.attach_scores(k - 1, int(tokens[k]))
            lps = _candidate_logprobs(scores, state, k)
            total += lps[r[k]]
        state = update_stack_tape(state, k, r[k])
    return total


def marginal_logprob(engine, tokens, config):
    """log p(tokens), attachments marginalized by beam (exact at full width)."""
    hyps, _ = _attachment_beam(engine, tokens, config)
    return _logsumexp([h.logp for h in hyps])


def surprisals(engine, tokens, config):
    """Per-token -log p(x_k | x_<k) for k = 1.., marginalized by beam."""
    _, surps = _attachment_beam(engine, tokens, config, collect_surprisals=True)
    return np.array(surps)


def best_parse(engine, tokens, config):
    """Highest-scoring attachment sequence and its joint log-prob."""
    hyps, _ = _attachment_beam(engine, tokens, config)
    best = min(hyps, key=lambda h: (-h.logp, h.r_history))
    return best.r_history, best.logp


@dataclass
class GenerationResult:
    tokens: list            # generated ids, ROOT excluded, EOS included if hit
    r_history: tuple        # attachments for every position incl. ROOT
    logp: float
    hit_eos: bool


def generate(engine, config, rng=None, prompt=None):
    """Free generation: sample (or argmax) words, argmax attachments.

    Words are drawn from the temperature-scaled LM head; each word's
    attachment is the argmax over legal candidates, after which the stack
    advances and the word is fed with its own tape row. prompt tokens, when
    given, are consumed the same way with their words forced.
    """
    hyp = _start_hypothesis(engine)
    base_plain = engine.config.mode == "base-plain"
    out_tokens = []
    logp = 0.0
    hit_eos = False
    prompt = list(prompt) if prompt else []

    k = 1
    while k < config.max_len:
        forced = prompt[k - 1] if k - 1 < len(prompt) else None
        row = log_softmax_row(hyp.cache.lm_last / config.temperature)
        if forced is not None:
            token = int(forced)
        elif rng is None:
            token = int(np.argmax(row))
        else:
            token = int(rng.choice(len(row), p=np.exp(row)))
        logp += float(row[token])

        if base_plain:
            r_k = k  # no attachment head: every token shifts
        else:
            scores = hyp.cache.attach_scores(token, np.asarray(hyp.state.tape))
            lps = _candidate_logprobs(scores, hyp.state, k)
            r_k = min(lps, key=lambda j: (-lps[j], j))
            logp += lps[r_k]
        hyp = _advance(hyp, k, token, r_k, logp)
        out_tokens.append(token)
        if token == EOS_ID:
            hit_eos = True
            break
        k += 1
    return GenerationResult(out_tokens, hyp.r_history, logp, hit_eos)


# --------------------------------------------------------------------------
# parse rendering


def attachments_to_tree(token_strings, r_history):
    """Bracketed tree over the real tokens, ROOT and EOS pruned away.

    The replay forest is binary over positions; marker leaves are removed by
    promoting the surviving sibling. A forest that stays unreduced is
    wrapped under a single X node.
    """
    n = len(token_strings)
    _, forest = replay(list(r_history))
    markers = {0, n - 1}

    def prune(t):
        if isinstance(t, int):
            return None if t in markers else t
        left, right = prune(t[0]), prune(t[1])
        if left is None:
            return right
        if right is None:
            return left
        return (left, right)

    def build(t):
        if isinstance(t, int):
            return ParseTree(None, (), token_strings[t])
        return ParseTree("X", tuple(build(c) for c in t), None)

    kept = [prune(t) for t in forest]
    kept = [t for t in kept if t is not None]
    if not kept:
        raise ValueError("nothing to render once markers are removed")
    top = kept[0]
    for t in kept[1:]:
        top = (top, t)
    tree = build(top)
    if tree.is_leaf:
        tree = ParseTree("X", (tree,), None)
    return tree
