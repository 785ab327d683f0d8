"""From-scratch numerics: reverse-mode autodiff on numpy arrays, a named
parameter store with trainability flags, AdamW with decoupled weight decay,
gradient clipping, LR schedules, and a versioned binary checkpoint container.

A ``Tensor`` wraps an ndarray and records the operation that produced it.
Calling ``backward()`` on a scalar output walks the recorded graph once in
reverse topological order and accumulates gradients into the leaf tensors
created with ``requires_grad=True``.  Every operation checks its result for
NaN/Inf while finite checks are enabled (the default); shape and domain
violations raise typed errors that name the offending operation.

Parameters live under slash-separated paths ("model/trunk/0/attn/wq") so the
stage freeze maps, the optimizer, and checkpoints all address one flat
namespace; iteration is always sorted-by-path, keeping update order and
therefore whole training runs bit-reproducible.

Checkpoint layout: 8-byte magic "DENCKPT1", u64 little-endian header length,
UTF-8 JSON header (entries with path, kind, dtype, shape, offset, nbytes,
trainable flag, plus optimizer step and free-form metadata), then raw
little-endian value bytes back to back.  Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf


# ============================== autodiff ==============================

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes or dtypes are incompatible with the operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf while finite checks were enabled."""


class GraphError(RuntimeError):
    """The computation record was used in an unsupported way."""


_finite_checks = True
_grad_enabled = True
_op_counter = itertools.count(1)


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf checking of op results. Returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


def finite_checks_enabled() -> bool:
    return _finite_checks


@contextmanager
def no_grad():
    """Context in which no computation graph is recorded."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "op_index",
                 "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype == np.float64 and dtype is None and not isinstance(data, np.ndarray):
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None
        self.op_index = 0
        self._parents = ()
        self._vjp = None
        self._consumed = False

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.op or ("leaf" if self.requires_grad else "const")
        return f"Tensor({tag}, shape={self.shape}, dtype={self.data.dtype})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    # -- backward ------------------------------------------------------------
    def backward(self, adjoint=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        The recorded graph is single-use: a second backward through the same
        record raises GraphError because intermediate buffers may be shared.
        """
        if self._consumed:
            raise GraphError(
                "backward() was already called through this computation record; "
                "rebuild the forward pass before differentiating again")
        if adjoint is None:
            if self.size != 1:
                raise GraphError(
                    f"backward() on non-scalar output of shape {self.shape} "
                    "requires an explicit adjoint")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(adjoint, dtype=self.data.dtype)
            if seed.shape != self.shape:
                raise GraphError(
                    f"adjoint shape {seed.shape} does not match output shape {self.shape}")

        # reverse topological order over the requires_grad subgraph
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        flowing = {id(self): seed}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            node._consumed = True
            if node._vjp is None:
                # leaf: accumulate into .grad
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                held = flowing.get(id(parent))
                flowing[id(parent)] = pg if held is None else held + pg
        self._consumed = True


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _coerce_pair(a, b, op: str):
    """Promote python/numpy scalars to the partner tensor's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.data.dtype != b.data.dtype:
            raise ShapeError(
                f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    raise ShapeError(f"{op}: at least one operand must be a Tensor")


def _make(data: np.ndarray, op: str, parents, vjp):
    idx = next(_op_counter)
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(
            f"non-finite values produced by '{op}' (operation index {idx})")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.op_index = idx
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = _coerce_pair(a, b, "add")
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), vjp)


def sub(a, b):
    a, b = _coerce_pair(a, b, "sub")
    _check_broadcast(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b):
    a, b = _coerce_pair(a, b, "mul")
    _check_broadcast(a, b, "mul")

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, "mul", (a, b), vjp)


def div(a, b):
    a, b = _coerce_pair(a, b, "div")
    _check_broadcast(a, b, "div")

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, "div", (a, b), vjp)


def neg(a):
    a = as_tensor(a)

    def vjp(g):
        return (-g,)

    return _make(-a.data, "neg", (a,), vjp)


def pow_(a, p: float):
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise ShapeError("pow: exponent must be a python scalar")
    p = float(p)

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data ** p, "pow", (a,), vjp)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def vjp(g):
        return (g * out_data,)

    return _make(out_data, "exp", (a,), vjp)


def log(a):
    a = as_tensor(a)

    def vjp(g):
        return (g / a.data,)

    return _make(np.log(a.data), "log", (a,), vjp)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out_data,)

    return _make(out_data, "sqrt", (a,), vjp)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out_data * out_data),)

    return _make(out_data, "tanh", (a,), vjp)


def relu(a):
    a = as_tensor(a)

    def vjp(g):
        return (g * (a.data > 0),)

    return _make(np.maximum(a.data, 0), "relu", (a,), vjp)


def gelu(a):
    """Exact Gaussian error linear unit: x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = (x * phi).astype(x.dtype)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * pdf).astype(x.dtype),)

    return _make(out_data, "gelu", (a,), vjp)


def clamp(a, lo: float, hi: float):
    a = as_tensor(a)
    if not lo <= hi:
        raise ShapeError(f"clamp: lo {lo} exceeds hi {hi}")

    def vjp(g):
        inside = (a.data >= lo) & (a.data <= hi)
        return (g * inside,)

    return _make(np.clip(a.data, lo, hi), "clamp", (a,), vjp)


def straight_through(a, values):
    """Take the data of ``values`` forward, route the gradient to ``a``.

    ``values`` contributes no gradient of its own; its graph is dropped.
    """
    a, values = as_tensor(a), as_tensor(values)
    if a.shape != values.shape:
        raise ShapeError(
            f"straight_through: shape mismatch {a.shape} vs {values.shape}")
    if a.data.dtype != values.data.dtype:
        raise ShapeError(
            f"straight_through: dtype mismatch {a.data.dtype} vs {values.data.dtype}")

    def vjp(g):
        return (g,)

    return _make(values.data.copy(), "straight_through", (a,), vjp)


def stop_gradient(a):
    """Value passes through; gradient does not flow to the input."""
    a = as_tensor(a)
    return Tensor(a.data, requires_grad=False)


# -- reductions ---------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _make(np.asarray(out_data), "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims, dtype=a.data.dtype)
    count = a.size if axis is None else a.data.size // out_data.size

    def vjp(g):
        scale = np.asarray(1.0 / count, dtype=a.data.dtype)
        if axis is None:
            return (np.broadcast_to(g * scale, a.shape).astype(a.data.dtype, copy=True),)
        g2 = g * scale
        if not keepdims:
            g2 = np.expand_dims(g2, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _make(np.asarray(out_data), "mean", (a,), vjp)


# -- shape manipulation -------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def vjp(g):
        return (g.reshape(a.shape),)

    return _make(out_data, "reshape", (a,), vjp)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} are not a permutation for ndim {a.ndim}")
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), "transpose", (a,), vjp)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), "concat", ts, vjp)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = _coerce_pair(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul: operands must have ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), "matmul", (a, b), vjp)


# -- indexed access -----------------------------------------------------------

def gather_rows(table, ids):
    """Look rows of ``table`` [R, ...] up by integer index array ``ids``.

    Output shape is ``ids.shape + table.shape[1:]``.  Gradient scatters back
    with repeated ids accumulating.
    """
    table = as_tensor(table)
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather_rows: ids must be integers")
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise ShapeError(
            f"gather_rows: id out of range [0, {rows}) "
            f"(min {idx.min()}, max {idx.max()})")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(table.data[idx], "gather_rows", (table,), vjp)


def scatter_rows(num_rows: int, ids, rows):
    """Place ``rows`` [N, ...] at distinct indices of a zero [num_rows, ...] buffer."""
    rows = as_tensor(rows)
    idx = np.asarray(ids)
    if idx.ndim != 1 or idx.shape[0] != rows.shape[0]:
        raise ShapeError(
            f"scatter_rows: ids shape {idx.shape} does not match rows leading dim {rows.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ShapeError(f"scatter_rows: id out of range [0, {num_rows})")
    if np.unique(idx).size != idx.size:
        raise ShapeError("scatter_rows: duplicate destination ids")
    out_data = np.zeros((num_rows,) + rows.shape[1:], dtype=rows.data.dtype)
    out_data[idx] = rows.data

    def vjp(g):
        return (g[idx],)

    return _make(out_data, "scatter_rows", (rows,), vjp)


# -- normalization and attention ----------------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _make(out_data, "softmax", (a,), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match feature dim {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out_data = xhat * gamma.data + beta.data

    def vjp(g):
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        dxhat = g * gamma.data
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * ivar
        return dx.astype(x.data.dtype), dgamma, dbeta

    return _make(out_data.astype(x.data.dtype), "layer_norm", (x, gamma, beta), vjp)


def masked_attention(q, k, v, additive_mask=None):
    """Scaled dot-product attention with an additive mask.

    q, k, v: [B, H, T, dh].  ``additive_mask`` is a constant ndarray
    broadcastable to [B, H, T, T] holding 0 where attention is allowed and a
    large negative number where it is blocked; it is not differentiated.
    Fused forward/backward keeps one softmax buffer alive instead of a chain
    of elementwise nodes.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if not (q.ndim == k.ndim == v.ndim == 4):
        raise ShapeError(
            f"masked_attention: expected rank-4 inputs, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"masked_attention: incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    scale = q.data.dtype.type(1.0 / np.sqrt(q.shape[-1]))
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    if additive_mask is not None:
        scores = scores + np.asarray(additive_mask, dtype=scores.dtype)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    out_data = np.matmul(w, v.data)

    def vjp(g):
        gv = np.matmul(np.swapaxes(w, -1, -2), g)
        gw = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True))
        gq = np.matmul(gs, k.data) * scale
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data) * scale
        return (gq.astype(q.data.dtype), gk.astype(k.data.dtype),
                gv.astype(v.data.dtype))

    return _make(out_data, "masked_attention", (q, k, v), vjp)


def softmax_cross_entropy(logits, targets, mask=None, reduction="mean"):
    """Cross entropy between rows of ``logits`` [N, V] and integer ``targets`` [N].

    ``mask`` selects the rows that contribute; the result is the mean (or sum)
    of the selected rows' negative log likelihoods.  At least one row must be
    selected.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [N, V], got {logits.shape}")
    n, v = logits.shape
    tgt = np.asarray(targets)
    if tgt.shape != (n,):
        raise ShapeError(
            f"softmax_cross_entropy: targets shape {tgt.shape} does not match logits rows {n}")
    if not np.issubdtype(tgt.dtype, np.integer):
        raise ShapeError("softmax_cross_entropy: targets must be integers")
    if n and (tgt.min() < 0 or tgt.max() >= v):
        raise ShapeError(
            f"softmax_cross_entropy: target id out of range [0, {v})")
    if mask is None:
        m = np.ones(n, dtype=logits.data.dtype)
    else:
        m = np.asarray(mask).astype(logits.data.dtype)
        if m.shape != (n,):
            raise ShapeError(
                f"softmax_cross_entropy: mask shape {m.shape} does not match logits rows {n}")
    count = float(m.sum())
    if count < 1.0:
        raise ShapeError("softmax_cross_entropy: no unmasked positions")
    if reduction not in ("mean", "sum"):
        raise ShapeError(f"softmax_cross_entropy: unknown reduction '{reduction}'")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(n), tgt]
    denom = count if reduction == "mean" else 1.0
    out_data = np.asarray((nll * m).sum() / denom, dtype=logits.data.dtype)

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), tgt] -= 1.0
        dl = p * (m / denom)[:, None] * g
        return (dl.astype(logits.data.dtype),)

    return _make(out_data, "softmax_cross_entropy", (logits,), vjp)


# -- convolution --------------------------------------------------------------

def _conv_out_side(s, k, stride, pad):
    return (s + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0):
    """2D convolution, channels-last.

    x: [B, H, W, Cin], w: [KH, KW, Cin, Cout], b: [Cout] or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected x [B,H,W,C] and w [KH,KW,Cin,Cout], got {x.shape}, {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: channel mismatch, x {x.shape} vs w {w.shape}")
    bt = as_tensor(b) if b is not None else None
    kh, kw, cin, cout = w.shape
    bsz, h, ww_, _ = x.shape
    oh = _conv_out_side(h, kh, stride, padding)
    ow = _conv_out_side(ww_, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{ww_} at padding {padding}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    # im2col via strided sliding windows
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]              # [B, OH, OW, Cin, KH, KW]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * oh * ow, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out_data = (cols @ wmat).reshape(bsz, oh, ow, cout)
    if bt is not None:
        out_data = out_data + bt.data

    def vjp(g):
        gm = g.reshape(bsz * oh * ow, cout)
        gw = (cols.T @ gm).reshape(kh, kw, cin, cout)
        gcols = gm @ wmat.T
        gwin = gcols.reshape(bsz, oh, ow, kh, kw, cin).transpose(0, 1, 2, 5, 3, 4)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + oh * stride:stride, j:j + ow * stride:stride, :] += gwin[:, :, :, :, i, j]
        gx = gxp[:, padding:padding + h, padding:padding + ww_, :] if padding else gxp
        gb = g.sum(axis=(0, 1, 2)) if bt is not None else None
        if bt is not None:
            return gx.astype(x.data.dtype), gw.astype(w.data.dtype), gb.astype(bt.data.dtype)
        return gx.astype(x.data.dtype), gw.astype(w.data.dtype)

    parents = (x, w) if bt is None else (x, w, bt)
    return _make(out_data.astype(x.data.dtype), "conv2d", parents, vjp)


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0):
    """Transposed 2D convolution (upsampling), channels-last.

    x: [B, H, W, Cin], w: [KH, KW, Cin, Cout].  Output spatial side is
    (H - 1) * stride + KH - 2 * padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expected rank-4 x and w, got {x.shape}, {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv_transpose2d: channel mismatch, x {x.shape} vs w {w.shape}")
    bt = as_tensor(b) if b is not None else None
    kh, kw, cin, cout = w.shape
    bsz, h, ww_, _ = x.shape
    oh = (h - 1) * stride + kh - 2 * padding
    ow = (ww_ - 1) * stride + kw - 2 * padding
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv_transpose2d: output side would be non-positive")

    full = np.zeros((bsz, oh + 2 * padding, ow + 2 * padding, cout), dtype=x.data.dtype)
    # each input pixel paints a KHxKW patch
    contrib = np.einsum("bhwc,ijcd->bhwijd", x.data, w.data)
    for i in range(kh):
        for j in range(kw):
            full[:, i:i + h * stride:stride, j:j + ww_ * stride:stride, :] += contrib[:, :, :, i, j, :]
    out_data = full[:, padding:padding + oh, padding:padding + ow, :]
    if bt is not None:
        out_data = out_data + bt.data

    def vjp(g):
        gfull = np.zeros((bsz, oh + 2 * padding, ow + 2 * padding, cout), dtype=g.dtype)
        gfull[:, padding:padding + oh, padding:padding + ow, :] = g
        gcontrib = np.empty((bsz, h, ww_, kh, kw, cout), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gcontrib[:, :, :, i, j, :] = gfull[:, i:i + h * stride:stride, j:j + ww_ * stride:stride, :]
        gx = np.einsum("bhwijd,ijcd->bhwc", gcontrib, w.data)
        gw = np.einsum("bhwc,bhwijd->ijcd", x.data, gcontrib)
        gb = g.sum(axis=(0, 1, 2)) if bt is not None else None
        if bt is not None:
            return gx.astype(x.data.dtype), gw.astype(w.data.dtype), gb.astype(bt.data.dtype)
        return gx.astype(x.data.dtype), gw.astype(w.data.dtype)

    parents = (x, w) if bt is None else (x, w, bt)
    return _make(out_data.astype(x.data.dtype), "conv_transpose2d", parents, vjp)


# =========================== parameter store ===========================

class FreezeViolation(ValueError):
    """A gradient or update touched a parameter marked non-trainable."""


class ParameterStore:
    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, path: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if path in self._params:
            raise ValueError(f"parameter '{path}' already exists")
        t = Tensor(np.asarray(value), requires_grad=trainable)
        self._params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._params[path]
        except KeyError:
            raise KeyError(f"no parameter at '{path}'") from None

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self) -> list[str]:
        return sorted(self._params)

    def trainable_paths(self) -> list[str]:
        return [p for p in self.paths() if self._params[p].requires_grad]

    def is_trainable(self, path: str) -> bool:
        return self[path].requires_grad

    def set_trainable(self, predicate) -> list[str]:
        """Apply a freeze map: predicate(path) -> bool decides trainability.

        Returns the resulting trainable path list.
        """
        for path, t in self._params.items():
            t.requires_grad = bool(predicate(path))
        return self.trainable_paths()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def collect_grads(self) -> dict[str, np.ndarray]:
        """Gather gradients for every trainable parameter.

        A parameter that did not participate in the graph contributes an exact
        zero gradient.  A gradient sitting on a frozen parameter means the
        freeze map was not respected and raises.
        """
        grads: dict[str, np.ndarray] = {}
        for path in self.paths():
            t = self._params[path]
            if t.requires_grad:
                grads[path] = t.grad if t.grad is not None else np.zeros_like(t.data)
            elif t.grad is not None:
                raise FreezeViolation(f"gradient present on frozen parameter '{path}'")
        return grads

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copy of all parameter values, for bit-identity comparisons."""
        return {p: self._params[p].data.copy() for p in self.paths()}

    def load_values(self, values: dict[str, np.ndarray]):
        for path, arr in values.items():
            t = self[path]
            if t.data.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch loading '{path}': have {t.data.shape}, got {arr.shape}")
            t.data = np.asarray(arr, dtype=t.data.dtype)

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())


# =============================== optimizer ===============================

BETA1 = 0.9
BETA2 = 0.95
EPS = 1e-8


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, store: ParameterStore) -> "OptimizerState":
        m = {p: np.zeros_like(store[p].data) for p in store.trainable_paths()}
        v = {p: np.zeros_like(store[p].data) for p in store.trainable_paths()}
        return cls(m=m, v=v, step=0)


def adamw_step(store: ParameterStore, grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float, weight_decay: float = 0.0):
    """One in-place AdamW update over the trainable parameters.

    ``grads`` must hold exactly the trainable paths: a gradient for a frozen
    parameter is a freeze-map violation, a missing one means the caller lost
    track of the training set.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    trainable = set(store.trainable_paths())
    extra = sorted(set(grads) - trainable)
    if extra:
        raise FreezeViolation(f"gradient supplied for frozen parameter '{extra[0]}'")
    missing = sorted(trainable - set(grads))
    if missing:
        raise ValueError(f"no gradient supplied for trainable parameter '{missing[0]}'")

    state.step += 1
    t = state.step
    bc1 = 1.0 - BETA1 ** t
    bc2 = 1.0 - BETA2 ** t
    for path in sorted(grads):
        g = grads[path]
        p = store[path]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} at '{path}'")
        if path not in state.m:
            # parameter newly unfrozen relative to this state
            state.m[path] = np.zeros_like(p.data)
            state.v[path] = np.zeros_like(p.data)
        m = state.m[path]
        v = state.v[path]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * mhat / (np.sqrt(vhat) + EPS)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float):
    """Scale grads so the global L2 norm is at most ``max_norm``.

    Returns (new grads dict, pre-clip global norm).
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for path in sorted(grads):
        g = grads[path]
        if not np.all(np.isfinite(g)):
            raise ArithmeticError(f"non-finite gradient for parameter '{path}'")
        flat = g.reshape(-1)
        total += float(flat @ flat)
    norm = float(np.sqrt(total))
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {p: g * scale for p, g in grads.items()}, norm


@dataclass(frozen=True)
class LrSchedule:
    kind: str                 # "constant" or "cosine", both with linear warmup
    base_lr: float
    warmup_steps: int = 0
    total_steps: int = 1
    min_lr: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule kind '{self.kind}'")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie within [0, total_steps]")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate for the update performed at ``step`` (0-based)."""
    if step < 0 or step > schedule.total_steps:
        raise ValueError(
            f"step {step} outside schedule range [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        frac = step / schedule.warmup_steps
        return schedule.min_lr + (schedule.base_lr - schedule.min_lr) * frac
    if schedule.kind == "constant":
        return schedule.base_lr
    span = schedule.total_steps - schedule.warmup_steps
    progress = 1.0 if span == 0 else (step - schedule.warmup_steps) / span
    cos = 0.5 * (1.0 + np.cos(np.pi * progress))
    return schedule.min_lr + (schedule.base_lr - schedule.min_lr) * float(cos)


# =============================== checkpoints ===============================

MAGIC = b"DENCKPT1"
FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    want = arr.dtype.newbyteorder("<")
    return arr.astype(want, copy=False)


def save_checkpoint(path, store: ParameterStore, optimizer: OptimizerState | None = None,
                    meta: dict | None = None) -> str:
    """Write store (+ optional optimizer state) to ``path``; returns sha256 hex."""
    entries = []
    blobs = []
    offset = 0

    def push(name, kind, arr, trainable=None):
        nonlocal offset
        arr = _le(np.ascontiguousarray(arr))
        code = arr.dtype.str
        if code not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for '{name}'")
        raw = arr.tobytes()
        e = {"name": name, "kind": kind, "dtype": code,
             "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        if trainable is not None:
            e["trainable"] = bool(trainable)
        entries.append(e)
        blobs.append(raw)
        offset += len(raw)

    for p in store.paths():
        push(p, "param", store[p].data, trainable=store.is_trainable(p))
    if optimizer is not None:
        for p in sorted(optimizer.m):
            push(p, "adam_m", optimizer.m[p])
        for p in sorted(optimizer.v):
            push(p, "adam_v", optimizer.v[p])

    header = {
        "format_version": FORMAT_VERSION,
        "entries": entries,
        "optimizer_step": None if optimizer is None else optimizer.step,
        "meta": meta or {},
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hjson)))
        f.write(hjson)
        for raw in blobs:
            f.write(raw)
    return checkpoint_hash(out)


def load_checkpoint(path):
    """Read a container back into (ParameterStore, OptimizerState | None, meta)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"'{path}' is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {header.get('format_version')}")
    body = raw[16 + hlen:]

    store = ParameterStore()
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for e in header["entries"]:
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise CheckpointError(f"unknown dtype {e['dtype']} in entry '{e['name']}'")
        seg = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(seg) != e["nbytes"]:
            raise CheckpointError(f"truncated data for entry '{e['name']}'")
        arr = np.frombuffer(seg, dtype=dt).reshape(e["shape"]).copy()
        if e["kind"] == "param":
            store.add(e["name"], arr, trainable=e.get("trainable", True))
        elif e["kind"] == "adam_m":
            m[e["name"]] = arr
        elif e["kind"] == "adam_v":
            v[e["name"]] = arr
        else:
            raise CheckpointError(f"unknown entry kind '{e['kind']}'")

    opt = None
    if header.get("optimizer_step") is not None or m or v:
        opt = OptimizerState(m=m, v=v, step=int(header.get("optimizer_step") or 0))
    return store, opt, header.get("meta", {})


def checkpoint_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
