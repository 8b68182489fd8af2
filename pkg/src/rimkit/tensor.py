"""Minimal reverse-mode autodiff over numpy arrays.

The graph is rebuilt on every forward pass (define-by-run). Each op returns a
new ``Tensor`` that remembers its parents and a closure mapping the upstream
gradient to one gradient per parent. ``Tensor.backward`` walks the graph in
reverse topological order and accumulates into leaf ``.grad`` buffers.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    out.op = op
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_broadcast(a, b, "multiply")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def scale(a, c):
    """Multiply by a python scalar constant."""
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make(a.data * a.data.dtype.type(c), (a,), bw, "scale")


def neg(a):
    return scale(a, -1.0)


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        if bd.ndim == 2 and ad.ndim > 2:
            # (..., m, k) @ (k, n): fold leading axes for the weight grad
            k, n = bd.shape
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
        if ad.ndim == 2 and bd.ndim > 2:
            # (m, k) @ (..., k, n)
            lead = tuple(range(bd.ndim - 2))
            ga = np.tensordot(g, bd, axes=(lead + (bd.ndim - 1,), lead + (bd.ndim - 1,)))
            gb = ad.T @ g
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


def _sigmoid_np(x):
    return expit(x)


def sigmoid(a):
    s = _sigmoid_np(a.data)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make(s, (a,), bw, "sigmoid")


def tanh(a):
    t = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - t * t),)

    return _make(t, (a,), bw, "tanh")


def silu(a):
    x = a.data
    # tanh identity: several times faster than expit, and x * s hides its
    # loss of relative precision in the far negative tail
    s = 0.5 * (1.0 + np.tanh(0.5 * x))

    def bw(g):
        return (g * s * (1.0 + x * (1.0 - s)),)

    return _make(x * s, (a,), bw, "silu")


def _softmax_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a):
    """Softmax over the last axis."""
    s = _softmax_np(a.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), bw, "softmax")


def rms_norm(a, eps=1e-6):
    """Scale each last-axis vector to unit root-mean-square (no gain)."""
    x = a.data
    r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    y = x / r

    def bw(g):
        return ((g - y * (g * y).mean(axis=-1, keepdims=True)) / r,)

    return _make(y, (a,), bw, "rms_norm")


def layer_norm(a, eps=1e-5):
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    std = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc / std

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return ((g - gm - xhat * gx) / std,)

    return _make(xhat, (a,), bw, "layer_norm")


def embedding(table, idx):
    """Row lookup ``table[idx]``; the backward pass scatter-adds into the table."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("embedding indices must be integers")
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"embedding index out of range for vocabulary of size {vocab}")
    tshape = table.shape

    def bw(g):
        gt = np.zeros(tshape, dtype=g.dtype)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, tshape[-1]))
        return (gt,)

    return _make(table.data[idx], (table,), bw, "embedding")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError(
            "concat: incompatible shapes " + ", ".join(str(d.shape) for d in datas)
        ) from None
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


def getitem(a, idx):
    shape = a.shape

    def bw(g):
        ga = np.zeros(shape, dtype=g.dtype)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.data[idx], (a,), bw, "slice")


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    shape = a.shape

    def bw(g):
        return (np.array(_expand_reduced(g, shape, axis, keepdims)),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    shape = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[ax] for ax in axes]))

    def bw(g):
        return (np.array(_expand_reduced(g, shape, axis, keepdims)) / count,)

    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw, "mean")


# layout helpers (no arithmetic; needed to split attention heads)

def reshape(a, shape):
    old = a.shape

    def bw(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def swapaxes(a, ax1, ax2):
    def bw(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _make(np.swapaxes(a.data, ax1, ax2), (a,), bw, "swapaxes")


def cross_entropy(logits, targets):
    """Mean token cross-entropy of ``logits[..., V]`` against integer ``targets``."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    n = targets.size
    loss = -picked.sum() / n

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``.grad``."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp


def finite_diff_check(f, store, eps=1e-4, n_coords=64, seed=0):
    """Compare analytic gradients of ``f(store)`` with central differences.

    Returns the max over sampled coordinates of
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    store.zero_grad()
    out = f(store)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("f is not finite at the base point")
    out.backward()
    names = list(store.names())
    sizes = np.array([store[n].data.size for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for k in flat:
        pi = int(np.searchsorted(offsets, k, side="right") - 1)
        p = store[names[pi]]
        local = np.unravel_index(int(k - offsets[pi]), p.shape)
        analytic = float(p.grad[local])
        orig = p.data[local].copy()
        with no_grad():
            p.data[local] = orig + eps
            fp = float(f(store).data)
            p.data[local] = orig - eps
            fm = float(f(store).data)
            p.data[local] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"f is not finite when perturbing {names[pi]}{local}")
        numeric = (fp - fm) / (2 * eps)
        err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst
