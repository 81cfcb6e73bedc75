"""Reverse-mode autodiff over dense float64 numpy arrays.

Small by design: just the ops the models in this package need. Tensors hold
f64 data, an optional grad buffer of the same shape, and closure-style
backward hooks. Graphs are implicit (parent links); backward() topologically
sorts once and visits every node exactly once. Grads accumulate across
backward calls until zero_grads() is used.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

__all__ = [
    "Tensor", "tensor", "parameter", "no_grad", "grad_enabled",
    "set_matmul_backend", "matmul_backend", "count_flops",
    "add", "mul", "matmul", "bmm", "batched_matmul_3d",
    "reshape", "transpose", "concat_last",
    "gather_rows", "tape_bias", "layer_norm", "gelu", "relu",
    "dropout", "softmax_rows", "cross_entropy", "backward", "zero_grads",
]


# ---------------------------------------------------------------- globals

_GRAD_ENABLED = True
_BACKEND = "blas"          # "blas" (fast) or "stable" (shape-stable einsum)
_FLOPS = None              # active FlopCounter or None


def grad_enabled():
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block. Forward math is unchanged."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_matmul_backend(name):
    """Select the matmul kernel: 'blas' (default) or 'stable'.

    'stable' routes every matrix product through unoptimized einsum, whose
    per-element accumulation order does not depend on the output shape, so
    row-sliced products are bitwise equal to full ones. Slower; used by
    equivalence tests.
    """
    global _BACKEND
    if name not in ("blas", "stable"):
        raise ValueError(f"unknown matmul backend: {name!r}")
    _BACKEND = name


def matmul_backend():
    return _BACKEND


class FlopCounter:
    """Counts scalar multiplies performed by matmul-family forward ops."""

    def __init__(self):
        self.multiplies = 0


@contextlib.contextmanager
def count_flops():
    global _FLOPS
    prev = _FLOPS
    _FLOPS = FlopCounter()
    try:
        yield _FLOPS
    finally:
        _FLOPS = prev


def _tally(n):
    if _FLOPS is not None:
        _FLOPS.multiplies += int(n)


def _mm(a, b):
    """Raw matrix product honoring the backend switch. a: (..., m, k), b: (..., k, n)."""
    if _BACKEND == "stable":
        return np.einsum("...ik,...kj->...ij", a, b)
    return np.matmul(a, b)


# ----------------------------------------------------------------- Tensor

class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def backward(self, seed=None):
        backward(self, seed)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Light operator sugar; everything routes through module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))


def tensor(data):
    return data if isinstance(data, Tensor) else Tensor(data)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _make(data, parents, backward_fn):
    """Wrap an op result, recording the graph edge when grads are live."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss, seed=None):
    """Reverse sweep from `loss`. Grads accumulate; call zero_grads to reset.

    loss must be scalar unless an explicit seed array of loss's shape is
    given. Each graph node is visited exactly once.
    """
    if seed is None:
        if loss.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar loss, got shape {loss.data.shape}; "
                "pass an explicit seed to differentiate a non-scalar"
            )
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != loss.data.shape:
            raise ValueError("seed shape must match loss shape")

    # Iterative topological order over the recorded graph.
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    _accum(loss, seed)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ------------------------------------------------------------ basic ops

def add(a, b):
    a, b = tensor(a), tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b):
    """Elementwise (broadcasting) product; b may be a python scalar."""
    a = tensor(a)
    if isinstance(b, (int, float)):
        s = float(b)
        out_data = a.data * s

        def bwd_scalar(g):
            _accum(a, g * s)

        return _make(out_data, (a,), bwd_scalar)

    b = tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def matmul(a, b):
    """Strict 2D product: (m, k) @ (k, n) -> (m, n)."""
    a, b = tensor(a), tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.data.shape} vs {b.data.shape}"
        )
    m, k = a.data.shape
    n = b.data.shape[1]
    _tally(m * k * n)
    out_data = _mm(a.data, b.data)

    def bwd(g):
        _accum(a, _mm(g, b.data.T))
        _accum(b, _mm(a.data.T, g))

    return _make(out_data, (a, b), bwd)


def bmm(a, b):
    """Batched product over leading dims: (..., m, k) @ (..., k, n).

    Leading dims broadcast like numpy matmul.
    """
    a, b = tensor(a), tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("bmm expects >=2D operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"bmm inner dimensions differ: {a.data.shape} vs {b.data.shape}"
        )
    out_data = _mm(a.data, b.data)
    batch = int(np.prod(out_data.shape[:-2])) if out_data.ndim > 2 else 1
    _tally(batch * a.data.shape[-2] * a.data.shape[-1] * b.data.shape[-1])

    def bwd(g):
        ga = _mm(g, np.swapaxes(b.data, -1, -2))
        gb = _mm(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), bwd)


def batched_matmul_3d(q, k):
    """Per-row scores: q (n_d, 1, d) against k (n_d, n_s, d) -> (n_d, 1, n_s).

    Row t of the output is q[t] dotted with every key in k[t]. Costs exactly
    n_d * n_s * d multiplies, the same as the plain (n_d, d) @ (d, n_s)
    product it replaces.
    """
    q, k = tensor(q), tensor(k)
    if q.data.ndim != 3 or k.data.ndim != 3:
        raise ValueError(
            f"batched_matmul_3d expects 3D operands, got {q.data.shape} and {k.data.shape}"
        )
    if q.data.shape[1] != 1:
        raise ValueError(f"q must have a singleton middle dim, got {q.data.shape}")
    if q.data.shape[0] != k.data.shape[0]:
        raise ValueError(
            f"batch dims differ: {q.data.shape[0]} vs {k.data.shape[0]}"
        )
    if q.data.shape[2] != k.data.shape[2]:
        raise ValueError(
            f"feature dims differ: {q.data.shape} vs {k.data.shape}"
        )
    n_d, _, d = q.data.shape
    n_s = k.data.shape[1]
    _tally(n_d * n_s * d)
    out_data = _mm(q.data, np.swapaxes(k.data, 1, 2))

    def bwd(g):
        _accum(q, _mm(g, k.data))
        _accum(k, _mm(np.swapaxes(g, 1, 2), q.data))

    return _make(out_data, (q, k), bwd)


# ----------------------------------------------------------- shape ops

def reshape(a, shape):
    a = tensor(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), bwd)


def transpose(a, axes):
    a = tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.transpose(a.data, axes)

    def bwd(g):
        _accum(a, np.transpose(g, inverse))

    return _make(out_data, (a,), bwd)


def concat_last(a, b):
    """Concatenate along the last axis."""
    a, b = tensor(a), tensor(b)
    na = a.data.shape[-1]
    out_data = np.concatenate([a.data, b.data], axis=-1)

    def bwd(g):
        _accum(a, g[..., :na])
        _accum(b, g[..., na:])

    return _make(out_data, (a, b), bwd)


# ------------------------------------------------------- gather/scatter

def gather_rows(table, idx):
    """Embedding lookup: table (V, d), idx int array of any shape -> (*idx, d).

    Backward scatter-adds into the table rows.
    """
    table = tensor(table)
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ValueError("gather_rows needs integer indices")
    out_data = table.data[idx]

    def bwd(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))

    return _make(out_data, (table,), bwd)


def tape_bias(scores_by_depth, depths):
    """Gather per-depth scores into per-position scores.

    scores_by_depth: (B, K, T, D); depths: int (B, T, T) with values in [0, D).
    Output (B, K, T, T): out[b, h, t, j] = scores_by_depth[b, h, t, depths[b, t, j]].
    Backward scatter-adds along the depth axis.
    """
    s = tensor(scores_by_depth)
    depths = np.asarray(depths)
    if depths.dtype.kind not in "iu":
        raise ValueError("tape_bias needs integer depths")
    B, K, T, D = s.data.shape
    if depths.shape != (B, T, T):
        raise ValueError(f"depth matrix shape {depths.shape} != {(B, T, T)}")
    if depths.min() < 0 or depths.max() >= D:
        raise ValueError(
            f"depth {int(depths.max())} outside the embedded range [0, {D})"
        )
    idx = np.broadcast_to(depths[:, None, :, :], (B, K, T, T))
    out_data = np.take_along_axis(s.data, idx, axis=3)

    def bwd(g):
        if not s.requires_grad:
            return
        if s.grad is None:
            s.grad = np.zeros_like(s.data)
        bi, ki, ti = np.ogrid[:B, :K, :T]
        np.add.at(s.grad, (bi[..., None], ki[..., None], ti[..., None], idx), g)

    return _make(out_data, (s,), bwd)


# --------------------------------------------------------- neural ops

_LN_EPS = 1e-5


def layer_norm(x, gain, bias):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = tensor(x), tensor(gain), tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        n = x.data.shape[-1]
        gx = g * gain.data
        dx = inv * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        _accum(x, dx)
        red = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=red))
        _accum(bias, g.sum(axis=red))

    return _make(out_data, (x, gain, bias), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximation GELU."""
    x = tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out_data = 0.5 * x.data * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        _accum(x, g * dx)

    return _make(out_data, (x,), bwd)


def relu(x):
    x = tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def bwd(g):
        _accum(x, g * (x.data > 0.0))

    return _make(out_data, (x,), bwd)


def dropout(x, p, train, rng=None):
    """Inverted dropout. Eval mode is a pure pass-through (same tensor)."""
    if not train or p <= 0.0:
        return tensor(x)
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    x = tensor(x)
    keep = rng.random(x.data.shape) >= p
    scale = 1.0 / (1.0 - p)
    out_data = x.data * keep * scale

    def bwd(g):
        _accum(x, g * keep * scale)

    return _make(out_data, (x,), bwd)


def softmax_rows(x, mask=None):
    """Row softmax over the last axis with an optional boolean keep-mask.

    Masked entries come out exactly 0. Stabilized by max subtraction over the
    unmasked entries. A fully masked row is an error.
    """
    x = tensor(x)
    if mask is None:
        mask = np.ones(x.data.shape, dtype=bool)
    else:
        mask = np.asarray(mask)
        if mask.dtype != np.bool_:
            raise ValueError("mask must be boolean")
        mask = np.broadcast_to(mask, x.data.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("softmax_rows: some row is fully masked")

    neg = np.where(mask, x.data, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    e = np.exp(neg - m)
    e = np.where(mask, e, 0.0)
    z = e.sum(axis=-1, keepdims=True)
    out_data = e / z

    def bwd(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(x, out_data * (g - dot))

    return _make(out_data, (x,), bwd)


def cross_entropy(logits, targets, ignore=None):
    """Mean NLL over non-ignored rows. logits (N, V), targets (N,) ints.

    Rows may contain -inf at disallowed classes; the target class must be
    finite. ignore is a boolean (N,) mask of rows to drop.
    """
    logits = tensor(logits)
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects (N, V) logits, got {logits.data.shape}")
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} != ({n},)")
    if ignore is None:
        keep = np.ones(n, dtype=bool)
    else:
        keep = ~np.asarray(ignore, dtype=bool)
    if not keep.any():
        raise ValueError("cross_entropy: every position is ignored")
    tgt = targets.copy()
    tgt[~keep] = 0
    if tgt.min() < 0 or tgt.max() >= v:
        raise ValueError("target index outside [0, V)")

    m = np.max(logits.data, axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=-1, keepdims=True)
    logz = m[:, 0] + np.log(z[:, 0])
    picked = logits.data[np.arange(n), tgt]
    nll = logz - picked
    count = int(keep.sum())
    out_data = np.asarray(nll[keep].mean())

    def bwd(g):
        gs = float(g) / count
        p = e / z
        p[np.arange(n), tgt] -= 1.0
        p[~keep] = 0.0
        _accum(logits, p * gs)

    return _make(out_data, (logits,), bwd)
