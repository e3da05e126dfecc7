"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every differentiable op builds a :class:`Node` holding its inputs and a backward
rule. Nodes are optionally recorded on an active :class:`Tape`; without one,
:func:`backward` recovers the same topological order by walking the graph.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericError

_local = threading.local()


def _active_tapes() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation only)."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "index", "finite")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable, finite: bool):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.index = -1
        self.finite = finite

    def __repr__(self):
        return f"Node(#{self.index}, {self.op})"


class Tape:
    """Ordered record of operations; recording order is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes().pop()
        return False


class Tensor:
    """Dense float64 array that can take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def backward(self, tape: Tape | None = None) -> None:
        backward(self, tape)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _scalar(g) -> float:
    return float(np.asarray(g).reshape(-1)[0])


def _raise_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _make(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out``; attach a node when any input participates in autodiff."""
    t = Tensor._wrap(out)
    if grad_enabled() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        node = Node(op, tuple(inputs), backward_fn, bool(np.isfinite(t.data).all()))
        tapes = _active_tapes()
        if tapes:
            tapes[-1].record(node)
        t.node = node
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make("square", xd * xd, (x,), lambda g: (2.0 * xd * g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _make("mean", np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(shape, _scalar(g) / n),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def take_rows(x: Tensor, idx) -> Tensor:
    """Select rows along the batch axis."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make("take_rows", x.data[idx], (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """``x @ w.T + b`` with weight stored as (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is None:
        return _make("linear", out, (x, w), lambda g: (g @ wd, g.T @ xd))
    b = as_tensor(b)
    out = out + b.data
    return _make("linear", out, (x, w, b), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW layout, weight (F, C, kH, kW)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    n, c, h, wd_ = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    if kh > h + 2 * padding or kw > wd_ + 2 * padding:
        raise DimensionError(
            f"conv2d kernel {(kh, kw)} larger than padded input {(h + 2 * padding, wd_ + 2 * padding)}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd_ + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    xp_shape = xp.shape

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (gm.T @ cols).reshape(w.shape)
        dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(xp_shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + wd_] if padding else dxp
        if bias is None:
            return dx, gw
        return dx, gw, gm.sum(axis=0)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make("conv2d", np.ascontiguousarray(out), inputs, bw)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise DimensionError(f"maxpool2d window {size} larger than input {x.shape}")
    crop = x.data[:, :, :ho * size, :wo * size]
    win = crop.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros((n, c, ho, wo, size * size))
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gcrop = gwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        if gcrop.shape == x.shape:
            return (gcrop,)
        full = np.zeros(x.shape)
        full[:, :, :ho * size, :wo * size] = gcrop
        return (full,)

    return _make("maxpool2d", out, (x,), bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    ls = _log_softmax(x.data)
    sm = np.exp(ls)
    return _make("log_softmax", ls, (x,),
                 lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(np.asarray(z, dtype=np.float64)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if n < 1 or labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label out of range [0, {c}): {labels.min()}..{labels.max()}")
    ls = _log_softmax(logits.data)
    rows = np.arange(n)
    loss = -ls[rows, labels].mean()

    def bw(g):
        grad = np.exp(ls)
        grad[rows, labels] -= 1.0
        return (grad * (_scalar(g) / n),)

    return _make("cross_entropy", np.asarray(loss), (logits,), bw)


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean of ``-sum(targets * log_softmax(logits))`` over the batch."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    n = logits.shape[0]
    ls = _log_softmax(logits.data)
    loss = -(targets * ls).sum() / n

    def bw(g):
        sm = np.exp(ls)
        return ((sm * targets.sum(axis=1, keepdims=True) - targets) * (_scalar(g) / n),)

    return _make("soft_cross_entropy", np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# custom-gradient hooks
# ---------------------------------------------------------------------------


def straight_through(x: Tensor, value: np.ndarray, mask: np.ndarray) -> Tensor:
    """Forward ``value``; backward passes the incoming gradient where ``mask`` is set."""
    mask = np.asarray(mask, dtype=bool)
    return _make("straight_through", value, (x,), lambda g: (np.where(mask, g, 0.0),))


def with_gradient(value: float, inputs: Sequence[Tensor], grads: Sequence[np.ndarray]) -> Tensor:
    """Scalar whose gradient w.r.t. ``inputs`` is the supplied ``grads``.

    Used where a loss term is differentiated outside the tape.
    """
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    return _make("with_gradient", np.asarray(float(value)), tuple(inputs),
                 lambda g: tuple(_scalar(g) * gi for gi in grads))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topological(loss: Tensor) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(loss.node, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if inp.node is not None and id(inp.node) not in seen:
                stack.append((inp.node, False))
    return order


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Gradients accumulate across calls; callers zero them between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if not np.isfinite(loss.data).all():
            raise NumericError(f"loss is not finite: {loss.data}")
        return
    if tape is not None:
        nodes = tape.nodes
        if loss.node.index < 0 or loss.node.index >= len(nodes) or nodes[loss.node.index] is not loss.node:
            raise ContractError("loss was not recorded on the given tape")
        nodes = nodes[: loss.node.index + 1]
    else:
        nodes = _topological(loss)
    for pos, node in enumerate(nodes):
        if not node.finite:
            where = node.index if node.index >= 0 else pos
            raise NumericError(f"non-finite value produced by node #{where} ({node.op})")
    if not np.isfinite(loss.data).all():
        raise NumericError(f"loss is not finite: {loss.data}")

    grads: dict[int, np.ndarray] = {id(loss.node): np.ones(loss.shape)}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if not np.isfinite(ig).all():
                raise NumericError(f"non-finite gradient flowing out of node #{node.index} ({node.op})")
            if inp.node is not None:
                key = id(inp.node)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
            else:
                ig = np.asarray(ig, dtype=np.float64).reshape(inp.shape)
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig


# ---------------------------------------------------------------------------
# flat-parameter helpers and Hessian-vector products
# ---------------------------------------------------------------------------


def _default_loss(model, batch) -> Tensor:
    x, y = batch
    return cross_entropy(model.forward(x), y)


def flat_gradient(model, batch, loss_fn: Callable | None = None) -> np.ndarray:
    """Gradient of ``loss_fn(model, batch)`` w.r.t. all parameters, flattened.

    Existing ``.grad`` fields are preserved.
    """
    loss_fn = loss_fn or _default_loss
    params = list(model.parameters())
    saved = [(p.grad, p.requires_grad) for p in params]
    for p in params:
        p.grad = None
        p.requires_grad = True
    try:
        loss = loss_fn(model, batch)
        backward(loss)
        flat = np.concatenate([
            (p.grad if p.grad is not None else np.zeros(p.shape)).reshape(-1) for p in params])
    finally:
        for p, (g, rg) in zip(params, saved):
            p.grad = g
            p.requires_grad = rg
    return flat


def get_flat(params: Iterable[Tensor]) -> np.ndarray:
    return np.concatenate([p.data.reshape(-1) for p in params])


def set_flat(params: Iterable[Tensor], flat: np.ndarray) -> None:
    off = 0
    for p in params:
        k = p.size
        p.data = np.array(flat[off:off + k], dtype=np.float64).reshape(p.shape)
        off += k


def hvp_finite_difference(model, batch, v, eps: float = 1e-4,
                          loss_fn: Callable | None = None) -> np.ndarray:
    """Central-difference Hessian-vector product ``(g(θ+εv) - g(θ-εv)) / 2ε``.

    Parameters are restored bit-exactly afterwards.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if not np.linalg.norm(v) > 0:
        raise ValueError("direction vector must be non-zero")
    params = list(model.parameters())
    originals = [p.data for p in params]
    theta = get_flat(params)
    if v.shape != theta.shape:
        raise DimensionError(f"direction has {v.size} entries, model has {theta.size} parameters")
    try:
        set_flat(params, theta + eps * v)
        g_plus = flat_gradient(model, batch, loss_fn)
        set_flat(params, theta - eps * v)
        g_minus = flat_gradient(model, batch, loss_fn)
    finally:
        for p, d in zip(params, originals):
            p.data = d
    return (g_plus - g_minus) / (2.0 * eps)
