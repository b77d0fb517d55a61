"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

The engine covers exactly the primitives the rest of the toolkit needs:
matrix products, broadcast add/multiply, gather, concatenation, reshape,
transpose, log, ReLU, clamp, 2-D convolution, 2x2 max-pooling, log-softmax,
negative log-likelihood and full reductions.  Graphs are built eagerly by
calling the op functions on `Tensor` values and differentiated by
`backward()` on a scalar loss.

Training runs in single precision; gradient-verification tests use double
precision (single precision alone cannot meet tight finite-difference
tolerances).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class AutogradError(Exception):
    """Raised for malformed graphs or numerical failures during backward."""


class Tensor:
    """A node in the computation graph.

    `data` is a numpy array, never mutated after creation.  `grad` is
    populated by `backward` for nodes with `requires_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), vjp=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # light operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, dtype=None):
    """Create a leaf tensor."""
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def constant(data, dtype=None):
    """Create a non-differentiable leaf."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=False)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return constant(x, dtype=dtype)


def _node(data, op, parents, vjp):
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, op=op,
                  parents=parents, vjp=vjp if requires else None)


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, "add", (a, b), vjp)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _node(out, "mul", (a, b), vjp)


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise AutogradError("matmul expects 2-D operands")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, "matmul", (a, b), vjp)


def log(a):
    a = _as_tensor(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _node(out, "log", (a,), vjp)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0)

    def vjp(g):
        return (g * mask,)

    return _node(out, "relu", (a,), vjp)


def clamp(a, lo, hi):
    """Clamp to [lo, hi].  Gradient passes through strictly inside the
    bounds and is zero at or outside them (projected-gradient subgradient)."""
    if lo > hi:
        raise AutogradError(f"clamp bounds inverted: {lo} > {hi}")
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * inside,)

    return _node(out, "clamp", (a,), vjp)


def take(a, index):
    """Gather from a 1-D tensor with an arbitrary-shape integer index map."""
    a = _as_tensor(a)
    if a.data.ndim != 1:
        raise AutogradError("take expects a 1-D source tensor")
    index = np.asarray(index)
    out = a.data[index]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index.ravel(), g.ravel())
        return (ga,)

    return _node(out, "take", (a,), vjp)


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _node(out, "concat", tuple(parts), vjp)


def reshape(a, shape):
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _node(out, "reshape", (a,), vjp)


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise AutogradError("transpose expects a 2-D tensor")
    out = a.data.T.copy()

    def vjp(g):
        return (g.T,)

    return _node(out, "transpose", (a,), vjp)


def reduce_sum(a):
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)

    return _node(out, "sum", (a,), vjp)


def reduce_mean(a):
    a = _as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype, copy=False),)

    return _node(out, "mean", (a,), vjp)


# ---------------------------------------------------------------------------
# network primitives
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None):
    """Valid 2-D convolution (cross-correlation), stride 1.

    x: (B, C, H, W), w: (F, C, kh, kw), optional bias (F,).
    Realized as im2col + matmul so the backward pass is an exact transpose.
    """
    x = _as_tensor(x)
    w = _as_tensor(w, like=x)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise AutogradError("conv2d expects x (B,C,H,W) and w (F,C,kh,kw)")
    B, C, H, W = x.data.shape
    F, Cw, kh, kw = w.data.shape
    if Cw != C:
        raise AutogradError(f"conv2d channel mismatch: input {C}, weight {Cw}")
    Ho, Wo = H - kh + 1, W - kw + 1
    if Ho < 1 or Wo < 1:
        raise AutogradError(f"conv2d kernel {kh}x{kw} larger than input {H}x{W}")

    view = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    # (B, C, Ho, Wo, kh, kw) -> (B*Ho*Wo, C*kh*kw)
    patches = view.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(F, C * kh * kw)
    out = patches @ wmat.T
    if b is not None:
        b = _as_tensor(b, like=x)
        out = out + b.data
    out = out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        gw = (gmat.T @ patches).reshape(F, C, kh, kw)
        gpatch = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + Ho, j:j + Wo] += gpatch[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    return _node(out, "conv2d", parents, vjp)


def maxpool2d(x):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Ties route the gradient to the first maximal element in scan order.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise AutogradError("maxpool2d expects (B,C,H,W)")
    B, C, H, W = x.data.shape
    Ho, Wo = H // 2, W // 2
    if Ho < 1 or Wo < 1:
        raise AutogradError(f"maxpool2d input {H}x{W} smaller than window")
    crop = x.data[:, :, :2 * Ho, :2 * Wo]
    windows = crop.reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros((B, C, Ho, Wo, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :2 * Ho, :2 * Wo] = (
            gw.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * Ho, 2 * Wo))
        return (gx,)

    return _node(out, "maxpool2d", (x,), vjp)


def log_softmax(x):
    """Row-wise log-softmax over the last axis of a 2-D tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise AutogradError("log_softmax expects (B, K)")
    m = x.data.max(axis=1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _node(out, "log_softmax", (x,), vjp)


def nll_loss(logp, labels):
    """Mean negative log-likelihood of integer labels under row log-probs."""
    logp = _as_tensor(logp)
    labels = np.asarray(labels, dtype=np.int64)
    if logp.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logp.data.shape[0]:
        raise AutogradError("nll_loss expects logp (B,K) and labels (B,)")
    B = labels.shape[0]
    picked = logp.data[np.arange(B), labels]
    out = np.asarray(-picked.mean(), dtype=logp.data.dtype)

    def vjp(g):
        gl = np.zeros_like(logp.data)
        gl[np.arange(B), labels] = -g / B
        return (gl,)

    return _node(out, "nll_loss", (logp,), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _first_nonfinite(order):
    """Earliest node (parents before children) holding a non-finite value."""
    for node in order:
        if not np.all(np.isfinite(node.data)):
            return node
    return None


def backward(loss):
    """Accumulate gradients of a scalar `loss` into every reachable leaf
    with `requires_grad`.  Forward values are never mutated."""
    if loss.data.size != 1:
        raise AutogradError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    if not np.isfinite(loss.data):
        bad = _first_nonfinite(order)
        raise AutogradError(f"non-finite forward value produced by op {bad.op!r}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if not np.all(np.isfinite(node.data)):
            bad = _first_nonfinite(order)
            raise AutogradError(f"non-finite forward value produced by op {bad.op!r}")
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# projection and Adam
# ---------------------------------------------------------------------------

def clip(values, lo, hi):
    """Elementwise clamp of a plain array (the projection step of
    projected gradient descent)."""
    if lo > hi:
        raise ValueError(f"clip bounds inverted: {lo} > {hi}")
    return np.clip(values, lo, hi)


@dataclass
class AdamState:
    """First/second moment accumulators for one named parameter set."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, alpha):
    """One Adam update with bias correction.

    `params` and `grads` are dicts of identically shaped arrays.  Returns
    (new_params, new_state); inputs are not mutated.
    """
    new_m, new_v, new_p = {}, {}, {}
    t = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step shape mismatch for {name!r}: {g.shape} vs {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * (g * g)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p[name] = p - alpha * mhat / (np.sqrt(vhat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_p, AdamState(m=new_m, v=new_v, step=t, beta1=b1, beta2=b2, eps=eps)
