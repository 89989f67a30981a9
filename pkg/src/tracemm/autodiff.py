"""Reverse-mode automatic differentiation over dense numpy tensors.

Small on purpose: exactly the operations the encoder, the contrastive
losses, and the heads need, each with an analytic gradient that is checked
against central finite differences in the test suite. All math runs in
float64. Shapes must match exactly except for two sanctioned broadcasts:
a bias vector added over the last axis, and an additive attention mask.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class Tensor:
    """A dense float64 array plus the bookkeeping backward() needs.

    Nodes created by operations keep references to their parents and a
    gradient closure; leaves created directly from data have neither.
    Gradients accumulate additively into ``grad`` — callers reset between
    steps (see ``zero_grad``).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _grad_fn=None, _op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._op = _op

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

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        op = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{op})"

    # Light operator sugar; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*tensors) -> bool:
    return any(t.requires_grad for t in tensors)


def _make(data, parents, grad_fn, op) -> Tensor:
    if _needs_grad(*parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _grad_fn=grad_fn, _op=op)
    return Tensor(data)


def zero_grad(tensors) -> None:
    """Reset accumulated gradients on a collection of tensors."""
    for t in tensors:
        t.grad = None


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    The executed operations form a tape ordered so that every node appears
    after all of its inputs; we linearize it once (iterative post-order) and
    sweep it exactly once in reverse, accumulating adjoints.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    tape: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            tape.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = adjoint.get(id(parent))
            if acc is None:
                adjoint[id(parent)] = pg
            else:
                acc += pg


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def grad_fn(g):
            return g, g
    elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        reduce_axes = tuple(range(a.ndim - 1))

        def grad_fn(g):
            return g, g.sum(axis=reduce_axes) if reduce_axes else g
    else:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shapes must match exactly, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g * bd, g * ad

    return _make(ad * bd, (a, b), grad_fn, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def grad_fn(g):
        return (g * s,)

    return _make(a.data * s, (a,), grad_fn, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands or identically-batched 3-D stacks."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.ndim > 3:
        raise ValueError(f"matmul: unsupported ranks for shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: shape mismatch between {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _make(ad @ bd, (a, b), grad_fn, "matmul")


def gelu(x: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), grad_fn, "gelu")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def grad_fn(g):
        return (g * out,)

    return _make(out, (x,), grad_fn, "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def grad_fn(g):
        return (g / xd,)

    return _make(np.log(xd), (x,), grad_fn, "log")


def softmax_lastdim(x: Tensor, additive_mask=None) -> Tensor:
    """Row-stabilized softmax over the last axis.

    ``additive_mask`` holds entries in {0, -inf} and is broadcast onto ``x``;
    -inf entries come out exactly 0. A fully masked row is an error.
    """
    x = as_tensor(x)
    z = x.data
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask)
        z = z + m
    zmax = np.max(z, axis=-1, keepdims=True)
    if np.isneginf(zmax).any():
        raise ValueError("softmax_lastdim: a row is fully masked")
    e = np.exp(z - zmax)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ValueError(
            f"layer_norm: gain/bias shape {gain.shape}/{bias.shape} must match last extent of {x.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gain.data

    def grad_fn(g):
        reduce_axes = tuple(range(xd.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        dbias = g.sum(axis=reduce_axes) if reduce_axes else g
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _make(xhat * gd + bias.data, (x, gain, bias), grad_fn, "layer_norm")


def l2_normalize_lastdim(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis row to unit Euclidean norm."""
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt(np.sum(xd * xd, axis=-1, keepdims=True) + eps * eps)
    out = xd / norm

    def grad_fn(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return ((g - out * dot) / norm,)

    return _make(out, (x,), grad_fn, "l2norm")


def rope_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate (even, odd) feature pairs by constant per-position angles.

    ``cos``/``sin`` have half the last extent of ``x`` and broadcast over the
    leading axes. The rotation is orthogonal, so the backward pass is the
    transposed rotation.
    """
    x = as_tensor(x)
    if x.shape[-1] % 2 != 0:
        raise ValueError(f"rope_pairs: last extent must be even, got {x.shape}")
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def grad_fn(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        dx = np.empty_like(g)
        dx[..., 0::2] = ge * cos + go * sin
        dx[..., 1::2] = -ge * sin + go * cos
        return (dx,)

    return _make(out, (x,), grad_fn, "rope")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), grad_fn, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inverse),)

    return _make(x.data.transpose(axes), (x,), grad_fn, "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else t.ndim + 1 + axis, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def slice_(x: Tensor, key) -> Tensor:
    """Basic (non-advanced) slicing with scatter-back gradient."""
    x = as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        dx = np.zeros(shape, dtype=np.float64)
        dx[key] = g
        return (dx,)

    out = x.data[key]
    return _make(out.copy() if isinstance(out, np.ndarray) else out, (x,), grad_fn, "slice")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along one axis with a constant integer index vector."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("take: indices must be one-dimensional")
    shape = x.shape

    def grad_fn(g):
        dx = np.zeros(shape, dtype=np.float64)
        gm = np.moveaxis(g, axis, 0)
        dxm = np.moveaxis(dx, axis, 0)
        np.add.at(dxm, idx, gm)
        return (dx,)

    return _make(np.take(x.data, idx, axis=axis), (x,), grad_fn, "take")


def take_pairs(s: Tensor, rows, cols) -> Tensor:
    """Gather entries of a 2-D tensor at paired (row, col) index arrays."""
    s = as_tensor(s)
    if s.ndim != 2:
        raise ValueError(f"take_pairs: expected a 2-D tensor, got shape {s.shape}")
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    if r.shape != c.shape:
        raise ValueError(f"take_pairs: index shapes differ: {r.shape} vs {c.shape}")
    shape = s.shape

    def grad_fn(g):
        ds = np.zeros(shape, dtype=np.float64)
        np.add.at(ds, (r, c), g)
        return (ds,)

    return _make(s.data[r, c], (s,), grad_fn, "take_pairs")


# ---------------------------------------------------------------------------
# reductions and losses


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        return (_expand_reduced(g, shape, axis, keepdims),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))

    def grad_fn(g):
        return (_expand_reduced(g, shape, axis, keepdims) / count,)

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), grad_fn, "mean")


def mse(pred: Tensor, target: Tensor, element_mask=None) -> Tensor:
    """Mean squared error over the entries selected by ``element_mask``.

    The mask is a constant 0/1 array of the operand shape; omitting it
    selects everything. Zero selected entries is an error.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shape mismatch between {pred.shape} and {target.shape}")
    if element_mask is None:
        m = np.ones(pred.shape, dtype=np.float64)
    else:
        m = np.asarray(
            element_mask.data if isinstance(element_mask, Tensor) else element_mask,
            dtype=np.float64,
        )
        if m.shape != pred.shape:
            raise ValueError(f"mse: mask shape {m.shape} must match operands {pred.shape}")
    count = m.sum()
    if count == 0:
        raise ValueError("mse: element mask selects zero entries")
    diff = pred.data - target.data

    def grad_fn(g):
        base = g * 2.0 * m * diff / count
        return base, -base

    return _make(np.sum(m * diff * diff) / count, (pred, target), grad_fn, "mse")


def logsumexp_lastdim(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis, stabilized by a detached row max."""
    x = as_tensor(x)
    m = np.max(x.data, axis=-1, keepdims=True)
    shifted = sub(x, Tensor(np.broadcast_to(m, x.shape).copy()))
    lse = log(sum_(exp(shifted), axis=-1))
    return add(lse, Tensor(m.reshape(lse.shape)))
