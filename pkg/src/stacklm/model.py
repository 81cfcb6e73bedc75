"""Transformer LM with stack-tape-conditioned attention and attachment head.

Three modes share one parameter layout:
  pushdown        tape-augmented attention + attachment head
  base-multitask  plain attention; attachment head kept (with its own depth
                  conditioning) as an auxiliary objective
  base-plain      plain attention, LM head only

Attention augmentation is computed in decomposed form: per head,
score[k, j] = q_k . key_j + q_k . delta[S[k, j]], realized as a dense
q @ delta^T table lookup gathered by the tape matrix. This is exactly the
augmented-keys formulation (keys + depth embedding before scaling) but never
materializes per-query keys, and with a zeroed table the gathered bias is a
signed zero that washes out in softmax, leaving the base forward bit-intact.

The attachment head scores destination row i (predicting token i+1) against
source slots j <= i plus a self slot at column i+1. Its key MLP is factored:
act(W1 [k_j ; depth_emb]) = act(k_j W1k + depth_emb W1d + b1), so the
per-source and per-depth halves are computed once each.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T

_CKPT_MAGIC = b"SLMK"
_CKPT_VERSION = 1

MODES = ("pushdown", "base-multitask", "base-plain")
ATTACH_FORMS = ("mlp", "bilinear")


# --------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 6
    n_heads: int = 4
    d_model: int = 48
    max_seq_len: int = 128
    max_depth: int = 24
    mode: str = "pushdown"
    pushdown_layers: Optional[tuple] = None
    dropout: float = 0.0
    attach_form: str = "mlp"
    clamp_depths: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.attach_form not in ATTACH_FORMS:
            raise ValueError(f"attach_form must be one of {ATTACH_FORMS}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.vocab_size < 2:
            raise ValueError("vocab_size must cover ROOT and EOS")
        if self.mode == "pushdown":
            layers = self.pushdown_layers
            layers = tuple(range(self.n_layers)) if layers is None else tuple(layers)
            if not layers:
                raise ValueError("pushdown mode needs at least one pushdown layer")
            if any(not 0 <= i < self.n_layers for i in layers):
                raise ValueError(f"pushdown_layers out of range: {layers}")
            object.__setattr__(self, "pushdown_layers", tuple(sorted(set(layers))))
        else:
            if self.pushdown_layers:
                raise ValueError(f"{self.mode} mode must not set pushdown_layers")
            object.__setattr__(self, "pushdown_layers", ())

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    @property
    def d_ff(self):
        return 4 * self.d_model

    @property
    def has_attach_head(self):
        return self.mode != "base-plain"

    @property
    def uses_tape_in_attention(self):
        return self.mode == "pushdown"


@dataclass
class ForwardOutputs:
    lm_logits: T.Tensor                 # (B, T, V); row t predicts token t+1
    attach_logits: Optional[T.Tensor]   # (B, T, T+1); row i scores r of token i+1
    h_final: T.Tensor                   # (B, T, d) after the final layer norm


# --------------------------------------------------------------------------
# model


class PushdownModel:
    def __init__(self, config, seed=0):
        self.config = config
        self.params = {}
        rng = np.random.default_rng(seed)
        c = config
        d, V = c.d_model, c.vocab_size

        def w(name, *shape):
            self.params[name] = T.parameter(rng.normal(0.0, 0.02, size=shape))

        def zeros(name, *shape):
            self.params[name] = T.parameter(np.zeros(shape))

        def ones(name, *shape):
            self.params[name] = T.parameter(np.ones(shape))

        w("tok_emb", V, d)
        w("pos_emb", c.max_seq_len, d)
        for i in range(c.n_layers):
            p = f"layer{i}."
            ones(p + "ln1.gain", d)
            zeros(p + "ln1.bias", d)
            for nm in ("wq", "wk", "wv", "wo"):
                w(p + "attn." + nm, d, d)
            for nm in ("bq", "bk", "bv", "bo"):
                zeros(p + "attn." + nm, d)
            if i in c.pushdown_layers:
                w(p + "attn.depth_table", c.max_depth + 1, d)
            ones(p + "ln2.gain", d)
            zeros(p + "ln2.bias", d)
            w(p + "ff.w1", d, c.d_ff)
            zeros(p + "ff.b1", c.d_ff)
            w(p + "ff.w2", c.d_ff, d)
            zeros(p + "ff.b2", d)
        ones("ln_f.gain", d)
        zeros("ln_f.bias", d)
        w("lm_head.w", d, V)
        zeros("lm_head.b", V)

        if c.has_attach_head:
            w("attach.q.w", d, d)
            zeros("attach.q.b", d)
            w("attach.k.w", d, d)
            zeros("attach.k.b", d)
            for side in ("nwq", "nwk"):
                w(f"attach.{side}.w1", 2 * d, d)
                zeros(f"attach.{side}.b1", d)
                w(f"attach.{side}.w2", d, d)
                zeros(f"attach.{side}.b2", d)
            if c.attach_form == "mlp":
                w("attach.depth_table", c.max_depth + 1, d)
                w("attach.key.w1k", d, d)
                w("attach.key.w1d", d, d)
                zeros("attach.key.b1", d)
                w("attach.key.w2", d, d)
                zeros("attach.key.b2", d)
            else:
                w("attach.bilinear.w", d, d)
                w("attach.bilinear.wself", d, d)

    # ------------------------------------------------------------- helpers

    @property
    def n_params(self):
        return sum(t.size for t in self.params.values())

    def trainable(self):
        return list(self.params.values())

    def param_arrays(self):
        return {name: t.data for name, t in self.params.items()}

    def _prepare_tape(self, tape, T_len):
        c = self.config
        tape = np.asarray(tape)
        if tape.shape[-2:] != (T_len, T_len):
            raise ValueError(f"tape shape {tape.shape} does not match length {T_len}")
        if c.clamp_depths:
            return np.minimum(tape, c.max_depth)
        if tape.max(initial=0) > c.max_depth:
            raise ValueError(
                f"tape depth {int(tape.max())} exceeds max_depth {c.max_depth} "
                "and clamp_depths is off"
            )
        return tape

    # ------------------------------------------------------------- forward

    def forward(self, tokens, tape=None, next_tokens=None, *, train=False, rng=None):
        c = self.config
        tokens = np.asarray(tokens)
        B, T_len = tokens.shape
        if T_len > c.max_seq_len:
            raise ValueError(f"sequence length {T_len} exceeds {c.max_seq_len}")
        needs_tape = c.uses_tape_in_attention or (
            c.has_attach_head and c.attach_form == "mlp"
        )
        if needs_tape:
            if tape is None:
                raise ValueError(f"{c.mode} forward requires a tape matrix")
            tape = self._prepare_tape(tape, T_len)

        P = self.params
        positions = np.broadcast_to(np.arange(T_len), (B, T_len))
        x = T.add(
            T.gather_rows(P["tok_emb"], tokens),
            T.gather_rows(P["pos_emb"], positions),
        )
        x = T.dropout(x, c.dropout, train=train, rng=rng)

        keep = np.tril(np.ones((T_len, T_len), dtype=bool))[None, None]
        for i in range(c.n_layers):
            layer_tape = tape if (c.uses_tape_in_attention and i in c.pushdown_layers) else None
            x = pushdown_attention(
                x, layer_tape, P, f"layer{i}.", c, keep, train=train, rng=rng
            )

        h = T.layer_norm(x, P["ln_f.gain"], P["ln_f.bias"])
        lm_logits = T.add(T.bmm(h, P["lm_head.w"]), P["lm_head.b"])

        attach = None
        if c.has_attach_head:
            if next_tokens is None:
                next_tokens = np.concatenate(
                    [tokens[:, 1:], np.zeros((B, 1), dtype=tokens.dtype)], axis=1
                )
            attach = attachment_logits(h, tape, next_tokens, P, c)
        return ForwardOutputs(lm_logits, attach, h)

    # --------------------------------------------------------------- loss

    def loss(self, outputs, tokens, r_gold=None, lengths=None, lambda_attach=1.0):
        """(total, lm, attach) scalar tensors; attach is None without a head.

        LM rows score tokens[t+1] (so ROOT is never a target); attachment
        rows score r_gold[i+1]. Positions at or beyond each sequence length
        are ignored in both.
        """
        c = self.config
        tokens = np.asarray(tokens)
        B, T_len = tokens.shape
        if lengths is None:
            lengths = np.full(B, T_len)
        lengths = np.asarray(lengths)
        cols = np.arange(T_len)

        lm_targets = np.concatenate(
            [tokens[:, 1:], np.zeros((B, 1), dtype=np.int64)], axis=1
        )
        lm_ignore = (cols[None, :] + 1) >= lengths[:, None]
        lm = T.cross_entropy(
            T.reshape(outputs.lm_logits, (B * T_len, c.vocab_size)),
            lm_targets.reshape(-1),
            ignore=lm_ignore.reshape(-1),
        )

        if outputs.attach_logits is None or lambda_attach == 0.0 or r_gold is None:
            attach = None
            total = lm
        else:
            r_gold = np.asarray(r_gold)
            att_targets = np.concatenate(
                [r_gold[:, 1:], np.zeros((B, 1), dtype=np.int64)], axis=1
            )
            att_ignore = lm_ignore
            attach = T.cross_entropy(
                T.reshape(outputs.attach_logits, (B * T_len, T_len + 1)),
                att_targets.reshape(-1),
                ignore=att_ignore.reshape(-1),
            )
            total = T.add(lm, T.mul(attach, float(lambda_attach)))
        return total, lm, attach

    # ---------------------------------------------------------- checkpoint

    def save(self, path, extra=None):
        """Versioned binary: magic, version, config+extra JSON, named f64 tensors."""
        header = json.dumps(
            {"config": asdict(self.config), "extra": extra or {}}, sort_keys=True
        ).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_CKPT_MAGIC)
            fh.write(struct.pack("<II", _CKPT_VERSION, len(header)))
            fh.write(header)
            fh.write(struct.pack("<I", len(self.params)))
            for name, t in self.params.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", t.data.ndim))
                fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
                fh.write(t.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        """Returns (model, extra dict). Rejects unknown versions and layouts."""
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic)")
        version, header_len = struct.unpack_from("<II", blob, 4)
        if version != _CKPT_VERSION:
            raise ValueError(
                f"{path}: checkpoint version {version}, expected {_CKPT_VERSION}"
            )
        off = 12
        header = json.loads(blob[off : off + header_len].decode("utf-8"))
        off += header_len
        cfg_dict = dict(header["config"])
        if cfg_dict.get("pushdown_layers") is not None:
            cfg_dict["pushdown_layers"] = tuple(cfg_dict["pushdown_layers"])
        config = ModelConfig(**cfg_dict)
        model = cls(config, seed=0)
        (n_params,) = struct.unpack_from("<I", blob, off)
        off += 4
        if n_params != len(model.params):
            raise ValueError(f"{path}: parameter count mismatch")
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
            off += 8 * count
            if name not in model.params:
                raise ValueError(f"{path}: unknown parameter {name!r}")
            if model.params[name].data.shape != tuple(shape):
                raise ValueError(f"{path}: shape mismatch for {name!r}")
            model.params[name].data = data.reshape(shape).copy()
        return model, header["extra"]


# --------------------------------------------------------------------------
# attention block


def pushdown_attention(h, tape, params, prefix, config, keep=None, *, train=False, rng=None):
    """One pre-norm transformer block; tape=None gives plain attention.

    With a tape, each head's scores gain q_k . delta[S[k, j]] before the
    1/sqrt(head_dim) scaling, the decomposed equivalent of adding the depth
    embedding to every key.
    """
    B, T_len, d = h.shape
    K, hd = config.n_heads, config.head_dim
    P, p = params, prefix
    if keep is None:
        keep = np.tril(np.ones((T_len, T_len), dtype=bool))[None, None]

    hn = T.layer_norm(h, P[p + "ln1.gain"], P[p + "ln1.bias"])
    q = T.add(T.bmm(hn, P[p + "attn.wq"]), P[p + "attn.bq"])
    k = T.add(T.bmm(hn, P[p + "attn.wk"]), P[p + "attn.bk"])
    v = T.add(T.bmm(hn, P[p + "attn.wv"]), P[p + "attn.bv"])

    def heads(t):
        return T.transpose(T.reshape(t, (B, T_len, K, hd)), (0, 2, 1, 3))

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = T.bmm(qh, T.transpose(kh, (0, 1, 3, 2)))
    if tape is not None:
        table = P[p + "attn.depth_table"]
        delta = T.transpose(T.reshape(table, (config.max_depth + 1, K, hd)), (1, 2, 0))
        by_depth = T.bmm(qh, delta)             # (B, K, T, max_depth+1)
        scores = T.add(scores, T.tape_bias(by_depth, tape))
    scores = T.mul(scores, 1.0 / math.sqrt(hd))

    probs = T.softmax_rows(scores, keep)
    ctx = T.bmm(probs, vh)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, T_len, d))
    out = T.add(T.bmm(merged, P[p + "attn.wo"]), P[p + "attn.bo"])
    out = T.dropout(out, config.dropout, train=train, rng=rng)
    h = T.add(h, out)

    hn2 = T.layer_norm(h, P[p + "ln2.gain"], P[p + "ln2.bias"])
    f = T.gelu(T.add(T.bmm(hn2, P[p + "ff.w1"]), P[p + "ff.b1"]))
    f = T.add(T.bmm(f, P[p + "ff.w2"]), P[p + "ff.b2"])
    f = T.dropout(f, config.dropout, train=train, rng=rng)
    return T.add(h, f)


# --------------------------------------------------------------------------
# attachment head


def _fusion_mlp(base, next_emb, params, side):
    hidden = T.gelu(
        T.add(T.bmm(T.concat_last(base, next_emb), params[f"attach.{side}.w1"]),
              params[f"attach.{side}.b1"])
    )
    return T.add(T.bmm(hidden, params[f"attach.{side}.w2"]), params[f"attach.{side}.b2"])


def attachment_logits(h_final, tape, next_tokens, params, config):
    """(B, T, T+1) attachment scores; row i decides token i+1's attachment.

    Columns 0..i score a reduce with that source token, column i+1 is the
    shift/self slot, and later columns are -inf.
    """
    B, T_len, d = h_final.shape
    P = params
    next_tokens = np.asarray(next_tokens)

    q = T.add(T.bmm(h_final, P["attach.q.w"]), P["attach.q.b"])
    k = T.add(T.bmm(h_final, P["attach.k.w"]), P["attach.k.b"])
    next_emb = T.gather_rows(P["tok_emb"], next_tokens)
    nwq = _fusion_mlp(q, next_emb, P, "nwq")
    nwk = _fusion_mlp(k, next_emb, P, "nwk")
    scale = 1.0 / math.sqrt(d)

    if config.attach_form == "mlp":
        if tape is None:
            raise ValueError("mlp attachment head requires a tape matrix")
        a_side = T.bmm(k, P["attach.key.w1k"])                       # (B, T, d)
        d_side = T.matmul(P["attach.depth_table"], P["attach.key.w1d"])
        d_gath = T.gather_rows(d_side, np.minimum(tape, config.max_depth))
        hidden = T.gelu(
            T.add(T.add(T.reshape(a_side, (B, 1, T_len, d)), d_gath),
                  P["attach.key.b1"])
        )                                                            # (B, T, T, d)
        u = T.bmm(nwq, P["attach.key.w2"])
        pair = T.batched_matmul_3d(
            T.reshape(u, (B * T_len, 1, d)),
            T.reshape(hidden, (B * T_len, T_len, d)),
        )
        pair = T.reshape(pair, (B, T_len, T_len))
        bias = T.bmm(nwq, T.reshape(P["attach.key.b2"], (d, 1)))     # (B, T, 1)
        pair = T.mul(T.add(pair, bias), scale)
    else:
        pair = T.bmm(T.bmm(nwq, P["attach.bilinear.w"]),
                     T.transpose(k, (0, 2, 1)))
        pair = T.mul(pair, scale)
        nwq = T.bmm(nwq, P["attach.bilinear.wself"])

    self_score = T.batched_matmul_3d(
        T.reshape(nwq, (B * T_len, 1, d)),
        T.reshape(nwk, (B * T_len, 1, d)),
    )
    self_score = T.mul(T.reshape(self_score, (B, T_len, 1)), scale)

    rows = np.arange(T_len)[:, None]
    cols = np.arange(T_len + 1)[None, :]
    m_tok = (cols <= rows).astype(np.float64)
    m_self = (cols == rows + 1).astype(np.float64)
    fill = np.where(cols <= rows + 1, 0.0, -np.inf)

    pair_pad = T.concat_last(pair, T.tensor(np.zeros((B, T_len, 1))))
    return T.add(
        T.add(T.mul(pair_pad, T.tensor(m_tok)), T.mul(self_score, T.tensor(m_self))),
        T.tensor(fill),
    )
