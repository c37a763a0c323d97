"""Dense float32 tensors with a reverse-mode autodiff tape.

Values live in contiguous numpy arrays; each differentiable op wires a
backward closure to its parents, micrograd-style. Node ids grow in creation
order, so walking the nodes reachable from a root in descending id order is
a valid reverse topological sweep and visits each node exactly once.

A tensor is "recorded" when it carries a node id. Leaves are recorded with
``leaf``; an op output is recorded iff at least one input is. Everything is
float32 and reductions run in a fixed order, so a given op sequence is
bit-reproducible on a single thread.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class TapeError(ValueError):
    """backward() called on an unrecorded or non-scalar root."""


_ids = itertools.count(1)


def _f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


class Tensor:
    __slots__ = ("data", "node_id", "_parents", "_vjp")

    def __init__(self, data):
        a = _f32(data)
        if not np.isfinite(a).all():
            raise NonFiniteError("tensor constructed with non-finite values")
        self.data = a
        self.node_id = None
        self._parents = ()
        self._vjp = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def recorded(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        if self.node_id is None:
            return self
        return Tensor(self.data)

    def __repr__(self):
        tag = f" node={self.node_id}" if self.recorded else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def leaf(data) -> Tensor:
    """A recorded tensor; backward() reports gradients w.r.t. it."""
    t = Tensor(data)
    t.node_id = next(_ids)
    return t


def detach(t: Tensor) -> Tensor:
    return t.detach()


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _make(op: str, data: np.ndarray, parents: tuple, vjp) -> Tensor:
    """Assemble an op result; record it iff any parent is recorded."""
    a = _f32(data)
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = a
    if any(p.node_id is not None for p in parents):
        out.node_id = next(_ids)
        out._parents = parents
        out._vjp = vjp
    else:
        out.node_id = None
        out._parents = ()
        out._vjp = None
    return out


class GradientMap:
    """Adjoints keyed by node id. Unreached recorded tensors read as zero."""

    def __init__(self, grads: dict):
        self._grads = grads

    def wrt(self, t: Tensor) -> Tensor:
        if t.node_id is None:
            raise TapeError("gradient requested for an unrecorded tensor")
        g = self._grads.get(t.node_id)
        if g is None:
            return Tensor(np.zeros_like(t.data))
        return Tensor(g)

    def __contains__(self, t: Tensor) -> bool:
        return t.node_id in self._grads


def backward(root: Tensor) -> GradientMap:
    """Reverse-mode sweep from a recorded scalar root.

    Returns adjoints for every recorded tensor reachable from the root;
    query them through :meth:`GradientMap.wrt`.
    """
    if root.node_id is None:
        raise TapeError("backward root is not recorded on a tape")
    if root.data.size != 1:
        raise TapeError(f"backward root must be scalar, got shape {root.shape}")

    nodes = {root.node_id: root}
    stack = [root]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if p.node_id is not None and p.node_id not in nodes:
                nodes[p.node_id] = p
                stack.append(p)

    grads = {root.node_id: np.ones_like(root.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.get(nid)
        if g is None or t._vjp is None:
            continue
        for p, pg in zip(t._parents, t._vjp(g)):
            if p.node_id is None or pg is None:
                continue
            acc = grads.get(p.node_id)
            grads[p.node_id] = pg if acc is None else acc + pg
    for nid, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError("backward produced non-finite gradients")
    return GradientMap(grads)


# ---------------------------------------------------------------------------
# elementwise ops


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return _f32(g)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def relu(t: Tensor) -> Tensor:
    t = _coerce(t)
    mask = t.data > 0
    return _make("relu", np.where(mask, t.data, 0.0), (t,),
                 lambda g: (g * mask,))


def tanh(t: Tensor) -> Tensor:
    t = _coerce(t)
    y = np.tanh(t.data)
    return _make("tanh", y, (t,), lambda g: (g * (1.0 - y * y),))


def sigmoid(t: Tensor) -> Tensor:
    t = _coerce(t)
    # tanh form avoids exp overflow for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * t.data))
    return _make("sigmoid", y, (t,), lambda g: (g * y * (1.0 - y),))


def absolute(t: Tensor) -> Tensor:
    """|t| with subgradient 0 at 0."""
    t = _coerce(t)
    s = np.sign(t.data)
    return _make("abs", np.abs(t.data), (t,), lambda g: (g * s,))


def clamp(t: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only strictly inside the box."""
    t = _coerce(t)
    mask = (t.data > lo) & (t.data < hi)
    return _make("clamp", np.clip(t.data, lo, hi), (t,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def conv2d(x, k, padding: int = 0) -> Tensor:
    """2-d convolution, stride 1, optional symmetric zero padding.

    x: (B, C, H, W), k: (F, C, kh, kw) -> (B, F, H', W').
    """
    x, k = _coerce(x), _coerce(k)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeMismatchError(f"conv2d needs 4-d operands, got {x.shape} and {k.shape}")
    B, C, H, W = x.shape
    F, Ck, kh, kw = k.shape
    if C != Ck:
        raise ShapeMismatchError(f"conv2d: input channels {x.shape} vs kernel {k.shape}")
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeMismatchError(f"conv2d: kernel {k.shape} too large for input {x.shape} pad {p}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))      # (B,C,Ho,Wo,kh,kw)
    cols = _f32(win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw))
    kmat = k.data.reshape(F, C * kh * kw)
    out = (cols @ kmat.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    def vjp(g):
        gm = _f32(g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F))
        dk = (gm.T @ cols).reshape(F, C, kh, kw)
        dcols = (gm @ kmat).reshape(B, Ho, Wo, C, kh, kw)
        dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + Ho, j:j + Wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + H, p:p + W] if p else dxp
        return dx, dk

    return _make("conv2d", out, (x, k), vjp)


def maxpool2x2(x) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first max."""
    x = _coerce(x)
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"maxpool2x2 needs a 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeMismatchError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    Ho, Wo = H // 2, W // 2
    win = x.data.reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        dwin = np.zeros((B, C, Ho, Wo, 4), dtype=np.float32)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        return (dwin.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return _make("maxpool2x2", out, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum_(t, axis=None) -> Tensor:
    t = _coerce(t)
    out = t.data.sum(axis=axis, dtype=np.float32)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(_f32(g), t.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), t.shape).copy(),)

    return _make("sum", out, (t,), vjp)


def mean_(t, axis=None) -> Tensor:
    t = _coerce(t)
    n = t.data.size if axis is None else t.shape[axis]
    out = t.data.mean(axis=axis, dtype=np.float32)

    def vjp(g):
        scale = np.float32(1.0 / n)
        if axis is None:
            return (np.broadcast_to(_f32(g) * scale, t.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g * scale, axis), t.shape).copy(),)

    return _make("mean", out, (t,), vjp)


def max_(t, axis: int) -> Tensor:
    """Max over one axis; ties route the gradient to the first argmax."""
    t = _coerce(t)
    idx = t.data.argmax(axis=axis)
    out = np.take_along_axis(t.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def vjp(g):
        dx = np.zeros_like(t.data)
        np.put_along_axis(dx, np.expand_dims(idx, axis), np.expand_dims(_f32(g), axis), axis=axis)
        return (dx,)

    return _make("max", out, (t,), vjp)


def reshape(t, shape) -> Tensor:
    t = _coerce(t)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != t.size and -1 not in shape:
        raise ShapeMismatchError(f"reshape: cannot view {t.shape} as {shape}")
    old = t.shape
    return _make("reshape", t.data.reshape(shape), (t,),
                 lambda g: (g.reshape(old),))


def take(t, idx) -> Tensor:
    """Basic indexing/slicing; the backward scatters into a zero tensor."""
    t = _coerce(t)
    out = t.data[idx]

    def vjp(g):
        dx = np.zeros_like(t.data)
        dx[idx] = g
        return (dx,)

    return _make("slice", out, (t,), vjp)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    ndims = {p.data.ndim for p in parts}
    if len(ndims) != 1:
        raise ShapeMismatchError(f"concat: mixed ranks {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(_f32(g[tuple(sl)]))
        return tuple(outs)

    return _make("concat", out, tuple(parts), vjp)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-example cross entropy of softmax(logits) against integer labels.

    logits: (B, n), labels: int array (B,) -> losses (B,).
    """
    logits = _coerce(logits)
    if logits.data.ndim != 2:
        raise ShapeMismatchError(f"softmax_cross_entropy needs (B, n) logits, got {logits.shape}")
    y = np.asarray(labels)
    B, n = logits.shape
    if y.shape != (B,):
        raise ShapeMismatchError(f"softmax_cross_entropy: {y.shape} labels for {logits.shape} logits")
    if y.min() < 0 or y.max() >= n:
        raise ValueError(f"label out of range [0, {n})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    loss = (np.log(s) + m - z[np.arange(B), y][:, None]).reshape(B)

    def vjp(g):
        d = p.copy()
        d[np.arange(B), y] -= 1.0
        return (d * g[:, None],)

    return _make("softmax_cross_entropy", loss, (logits,), vjp)
