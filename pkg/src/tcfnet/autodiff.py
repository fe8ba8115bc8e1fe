"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array. Every operation on tensors that need
gradients records its parents and a backward closure, so the graph is a tape
rebuilt on each forward pass. :func:`backward` walks the tape in reverse
topological order.

Convolution and pooling are primitives with hand-written backward rules
rather than compositions of elementwise ops; that keeps training fast enough
on a CPU.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an operation."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


@dataclass
class Parameter:
    """A named tensor owned by a model.

    Non-trainable parameters (batch-norm running statistics, fuzzy centroids,
    standardization statistics) are carried for checkpointing only.
    """

    name: str
    tensor: Tensor
    trainable: bool = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def fn(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _node(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def fn(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _node(a.data - b.data, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def fn(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _node(a.data * b.data, (a, b), fn, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def fn(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), fn, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data**p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def maximum(a, b) -> Tensor:
    """Elementwise max; at ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("max", a, b)
    take_a = a.data >= b.data

    def fn(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _node(np.maximum(a.data, b.data), (a, b), fn, "max")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    pos = a.data >= 0
    out = np.where(pos, a.data, alpha * np.expm1(np.minimum(a.data, 0.0)))
    return _node(out, (a,), lambda g: (g * np.where(pos, 1.0, out + alpha),), "elu")


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _node(out, (a,), fn, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return reduce_sum(a, axes, keepdims) * (1.0 / count)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), fn, "matmul")


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)
    out = a.data[idx]

    def fn(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[idx] += g
        return (full,)

    return _node(out, (a,), fn, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}"
            )
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(np.concatenate([t.data for t in ts], axis=ax), ts, fn, "concat")


def pad(a, widths) -> Tensor:
    """Zero padding; ``widths`` as for :func:`numpy.pad`."""
    a = as_tensor(a)
    widths = [tuple(w) for w in widths]
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _node(np.pad(a.data, widths), (a,), lambda g: (g[sl],), "pad")


# ---------------------------------------------------------------- softmax family


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ShapeError("log_softmax: empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    sm = np.exp(out)

    def fn(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), fn, "log_softmax")


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


# ---------------------------------------------------------------- convolution


def _same_pads(k: int) -> tuple[int, int]:
    total = k - 1
    return total // 2, total - total // 2


def _pad_input(x: np.ndarray, kh: int, kw: int, padding: str):
    if padding == "valid":
        return x, ((0, 0), (0, 0))
    if padding == "same":
        ph, pw = _same_pads(kh), _same_pads(kw)
        return np.pad(x, ((0, 0), ph, pw, (0, 0))), (ph, pw)
    raise ValueError(f"unknown padding {padding!r}")


def conv2d(x, w, b=None, padding: str = "valid") -> Tensor:
    """Cross-correlation of ``x`` (B, H, W, C) with ``w`` (kh, kw, C, O)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    kh, kw = w.shape[:2]
    xp, (ph, pw) = _pad_input(x.data, kh, kw, padding)
    if kh > xp.shape[1] or kw > xp.shape[2]:
        raise ShapeError(f"conv2d: kernel {w.shape[:2]} larger than padded input {xp.shape[1:3]}")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B,Ho,Wo,C,kh,kw
    B, Ho, Wo = win.shape[:3]
    O = w.shape[3]
    # im2col once; reused by the kernel gradient
    cols = win.reshape(B * Ho * Wo, -1)
    wmat = w.data.transpose(2, 0, 1, 3).reshape(-1, O)  # (C*kh*kw, O)
    out = (cols @ wmat).reshape(B, Ho, Wo, O)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents.append(b)

    def fn(g):
        g2 = g.reshape(-1, O)
        gw = (cols.T @ g2).reshape(x.shape[3], kh, kw, O).transpose(1, 2, 0, 3)
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + Ho, j : j + Wo, :] += g @ w.data[i, j].T
            gx = gxp[:, ph[0] : ph[0] + x.shape[1], pw[0] : pw[0] + x.shape[2], :]
        grads = [gx, gw]
        if b is not None:
            grads.append(np.ones(g2.shape[0]) @ g2)
        return tuple(grads)

    return _node(out, parents, fn, "conv2d")


def depthwise_conv2d(x, w, padding: str = "valid") -> Tensor:
    """Per-channel cross-correlation; ``w`` is (kh, kw, C, D).

    Output channel ``c * D + d`` is input channel ``c`` filtered by ``w[..., c, d]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} incompatible with kernel {w.shape}")
    kh, kw, C, D = w.shape
    xp, (ph, pw) = _pad_input(x.data, kh, kw, padding)
    if kh > xp.shape[1] or kw > xp.shape[2]:
        raise ShapeError(f"depthwise_conv2d: kernel {(kh, kw)} larger than padded input {xp.shape[1:3]}")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B,Ho,Wo,C,kh,kw
    B, Ho, Wo = win.shape[:3]
    taps = kh * kw
    # per-channel im2col: (C, B*Ho*Wo, taps) @ (C, taps, D)
    cols = win.transpose(3, 0, 1, 2, 4, 5).reshape(C, B * Ho * Wo, taps)
    wk = w.data.reshape(taps, C, D).transpose(1, 0, 2)
    out5 = np.ascontiguousarray((cols @ wk).reshape(C, B, Ho, Wo, D).transpose(1, 2, 3, 0, 4))

    def fn(g):
        gc = g.reshape(B, Ho, Wo, C, D).transpose(3, 0, 1, 2, 4).reshape(C, B * Ho * Wo, D)
        gw = (np.swapaxes(cols, 1, 2) @ gc).transpose(1, 0, 2).reshape(kh, kw, C, D)
        gx = None
        if x.requires_grad:
            gcols = (gc @ np.swapaxes(wk, 1, 2)).reshape(C, B, Ho, Wo, kh, kw)
            if Ho == 1 and kw == 1 and kh == xp.shape[1]:
                # full-height column kernel: taps never overlap
                gxp = gcols[:, :, 0, :, :, 0].transpose(1, 3, 2, 0)
            else:
                gxp = np.zeros(xp.shape, dtype=DTYPE)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i : i + Ho, j : j + Wo, :] += gcols[..., i, j].transpose(1, 2, 3, 0)
            gx = gxp[:, ph[0] : ph[0] + x.shape[1], pw[0] : pw[0] + x.shape[2], :]
        return gx, gw

    return _node(out5.reshape(B, Ho, Wo, C * D), (x, w), fn, "depthwise_conv2d")


def avg_pool2d(x, window: tuple[int, int]) -> Tensor:
    """Non-overlapping mean pooling over (H, W); trailing remainders are dropped."""
    x = as_tensor(x)
    ph, pw = window
    B, H, W, C = x.shape
    Ho, Wo = H // ph, W // pw
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"avg_pool2d: window {window} larger than input {x.shape[1:3]}")
    core = x.data[:, : Ho * ph, : Wo * pw, :].reshape(B, Ho, ph, Wo, pw, C)
    out = core.mean(axis=(2, 4))
    scale = 1.0 / (ph * pw)

    def fn(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        up = np.broadcast_to(g[:, :, None, :, None, :] * scale, (B, Ho, ph, Wo, pw, C))
        gx[:, : Ho * ph, : Wo * pw, :] = up.reshape(B, Ho * ph, Wo * pw, C)
        return (gx,)

    return _node(out, (x,), fn, "avg_pool2d")


def batch_norm_train(x, gamma, beta, eps: float):
    """Normalize with batch statistics over every axis but the last.

    Returns the output tensor plus the batch mean and biased variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    x2 = x.data.reshape(-1, C)
    n = x2.shape[0]
    ones = np.full(n, 1.0 / n)
    mu = ones @ x2
    # two-pass variance keeps precision when |mean| >> std
    centered = x2 - mu
    var = np.einsum("ij,ij->j", centered, centered) / n
    inv = 1.0 / np.sqrt(var + eps)
    scale = gamma.data * inv
    out = centered * scale
    out += beta.data
    out = out.reshape(x.shape)

    def fn(g):
        g2 = g.reshape(-1, C)
        dbeta = ones @ g2 * n
        gc = np.einsum("ij,ij->j", g2, centered)
        dgamma = gc * inv
        gx = None
        if x.requires_grad:
            # scale * (g - mean(g) - xhat * mean(g * xhat))
            gx = g2 * scale
            gx -= centered * (scale * inv * inv * gc / n)
            gx -= scale * dbeta / n
            gx = gx.reshape(x.shape)
        return gx, dgamma, dbeta

    return _node(out, (x, gamma, beta), fn, "batch_norm"), mu, var


# ---------------------------------------------------------------- dispatch

PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "max": maximum,
    "pow": power,
    "sqrt": sqrt,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "elu": elu,
    "matmul": matmul,
    "reshape": reshape,
    "transpose": transpose,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "sum": reduce_sum,
    "mean": reduce_mean,
    "pad": pad,
    "log_softmax": log_softmax,
    "softmax": softmax,
    "conv2d": conv2d,
    "depthwise_conv2d": depthwise_conv2d,
    "avg_pool2d": avg_pool2d,
    "batch_norm": lambda x, gamma, beta, eps=1e-3: batch_norm_train(x, gamma, beta, eps)[0],
}


def forward_primitive(op_kind: str, *inputs, **attrs) -> Tensor:
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls; clear them with
    ``Tensor.zero_grad`` before each optimisation step.

    Returns a name -> gradient map for ``params`` (trainable ones only). A
    trainable parameter that did not take part in the forward pass gets a
    zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=DTYPE, copy=True)
    out: dict[str, np.ndarray] = {}
    for p in params or ():
        if not p.trainable:
            continue
        g = p.tensor.grad
        out[p.name] = np.zeros(p.shape, dtype=DTYPE) if g is None else g
    return out


def finite_diff_gradient(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(np.asarray(_value(f(Tensor(base.copy())))).reshape(()))
        flat[i] = orig - eps
        fm = float(np.asarray(_value(f(Tensor(base.copy())))).reshape(()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def _value(v):
    return v.data if isinstance(v, Tensor) else v


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), the metric used for gradient checks."""
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)
