"""Reverse-mode differentiation over a recorded tape of numpy operations.

Every differentiable primitive records one node on the active :class:`Tape`
holding its inputs and a closure mapping the output gradient to input
gradients. Tensors are float64 throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractViolation, TapeError

Array = np.ndarray

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "name", "_tape")
    # make ndarray <op> Tensor dispatch to the Tensor reflected operators
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label} requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    backward: Callable[[Array], Sequence[Array | None]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations on tensors that require gradients are
    recorded while the tape is active.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        if _ACTIVE and _ACTIVE[-1] is self:
            _ACTIVE.pop()
        elif self in _ACTIVE:
            _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def _owns(self, t: Tensor) -> bool:
        return t._tape is self and t.node_id is not None

    def backward(self, loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, Array]:
        """Gradients of a scalar ``loss`` with respect to every tensor in ``wrt``.

        Tensors the loss does not depend on receive zero gradients.
        """
        if loss.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
        wanted = {t.node_id for t in wrt.values() if self._owns(t)}
        node_grads: dict[int, Array] = {}
        leaf_grads: dict[int, Array] = {}
        kept: dict[int, Array] = {}

        if self._owns(loss):
            node_grads[loss.node_id] = np.ones_like(loss.data)
            for idx in range(loss.node_id, -1, -1):
                g = node_grads.pop(idx, None)
                if g is None:
                    continue
                if idx in wanted:
                    kept[idx] = g
                node = self.nodes[idx]
                input_grads = node.backward(g)
                for inp, ig in zip(node.inputs, input_grads):
                    if ig is None or not inp.requires_grad:
                        continue
                    if ig.shape != inp.shape:
                        raise TapeError(
                            f"{node.kind} produced gradient {ig.shape} for input {inp.shape}"
                        )
                    if self._owns(inp):
                        if inp.node_id >= idx:
                            raise TapeError(f"tape order violated at node {idx} ({node.kind})")
                        _accumulate(node_grads, inp.node_id, ig)
                    else:
                        _accumulate(leaf_grads, id(inp), ig)
        elif loss.requires_grad:
            leaf_grads[id(loss)] = np.ones_like(loss.data)

        out: dict[str, Array] = {}
        for name, t in wrt.items():
            if self._owns(t):
                g = kept.get(t.node_id)
            else:
                g = leaf_grads.get(id(t))
            out[name] = g if g is not None else np.zeros_like(t.data)
        return out


def backward(loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, Array]:
    tape = loss._tape
    if tape is None:
        tape = Tape()
    return tape.backward(loss, wrt)


def _accumulate(store: dict[int, Array], key: int, g: Array) -> None:
    prev = store.get(key)
    store[key] = g if prev is None else prev + g


def _active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, data: Array, inputs: tuple[Tensor, ...], bw) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = len(tape.nodes)
        out._tape = tape
        tape.nodes.append(_Node(kind, inputs, bw))
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "div", a.data / b.data, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return _make(
        "pow", a.data ** p, (a,),
        lambda g: (g * p * a.data ** (p - 1.0),),
    )


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _make("sqrt", y, (a,), lambda g: (0.5 * g / y,))


def absolute(a: Tensor) -> Tensor:
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# -- activations ------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def _sigmoid(x: Array) -> Array:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(
        "softmax", y, (a,),
        lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),),
    )


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(
        "log_softmax", y, (a,),
        lambda g: (g - p * g.sum(axis=axis, keepdims=True),),
    )


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


# -- reductions ---------------------------------------------------------------

def _expand_like(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        axes = tuple(sorted(ax % len(shape) for ax in axes))
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    return _make(
        "sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,),
        lambda g: (_expand_like(g, shape, axis, keepdims),),
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))
    return _make(
        "mean", np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,),
        lambda g: (_expand_like(g, shape, axis, keepdims) / count,),
    )


# -- structure ------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a[..., k] @ b[k, m]``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ContractViolation(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga.reshape(a.shape), gb

    return _make("matmul", out, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        "concat", np.concatenate([t.data for t in tensors], axis=ax), tensors,
        lambda g: tuple(np.split(g, cuts, axis=ax)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    return _make(
        "stack", out, tensors,
        lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))),
    )


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("slice", np.array(a.data[index]), (a,), bw)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather entries of ``a`` along ``axis`` (repeated indices allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape
    ax = axis % a.ndim

    def bw(g):
        full = np.zeros(shape)
        np.add.at(np.moveaxis(full, ax, 0), idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _make("gather", np.take(a.data, idx, axis=ax), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def segment_sum(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    ids = np.asarray(segment_ids, dtype=np.int64)
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, ids, a.data)
    return _make("segment_sum", out, (a,), lambda g: (g[ids],))


def segment_counts(segment_ids, num_segments: int) -> Array:
    return np.bincount(np.asarray(segment_ids, dtype=np.int64), minlength=num_segments)


def segment_mean(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    counts = segment_counts(segment_ids, num_segments)
    if np.any(counts == 0):
        raise ContractViolation(f"empty segment in segment_mean: counts={counts.tolist()}")
    scale = (1.0 / counts).reshape((num_segments,) + (1,) * (a.ndim - 1))
    return segment_sum(a, segment_ids, num_segments) * scale


# -- losses -----------------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    diff = pred - target
    return mean(diff * diff)


def l1_loss(pred: Tensor, target) -> Tensor:
    return mean(absolute(pred - target))


def cross_entropy(logits: Tensor, target, axis: int = -1) -> Tensor:
    """Mean over rows of ``-sum(target * log_softmax(logits))``."""
    per_row = tsum(log_softmax(logits, axis=axis) * target, axis=axis)
    return neg(mean(per_row))


# -- convolution stack ----------------------------------------------------------------

def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1. x: [B,C,H,W], w: [O,C,3,3]."""
    if x.ndim != 4 or w.shape[1:] != (x.shape[1], 3, 3):
        raise ContractViolation(f"conv2d shape mismatch x={x.shape} w={w.shape}")
    B, C, H, W = x.shape
    O = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * 9)
    wm = w.data.reshape(O, C * 9)
    out = (cols @ wm.T + b.data).reshape(B, H, W, O).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * H * W, O)
        gw = (gm.T @ cols).reshape(O, C, 3, 3)
        gb = gm.sum(axis=0)
        gcols = (gm @ wm).reshape(B, H, W, C, 3, 3)
        gxp = np.zeros((B, C, H + 2, W + 2))
        for di in range(3):
            for dj in range(3):
                gxp[:, :, di:di + H, dj:dj + W] += gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return gxp[:, :, 1:-1, 1:-1], gw, gb

    return _make("conv3x3", out, (as_tensor(x), w, b), bw)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Array,
    running_var: Array,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of ``x[B,C,H,W]``.

    Training mode normalizes with batch statistics and updates the running
    buffers in place; a batch of one falls back to the running statistics.
    """
    axes = (0, 2, 3)
    use_batch = training and x.shape[0] > 1
    n = x.size // x.shape[1]
    if use_batch:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / max(n - 1, 1)
    else:
        mu = running_mean.copy()
        var = running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    bshape = (1, -1, 1, 1)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if use_batch:
            dx = (inv.reshape(bshape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, ggamma, gbeta

    return _make("batchnorm", out, (x, gamma, beta), bw)


def avg_pool2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ContractViolation(f"avg_pool2 needs even spatial dims, got {H}x{W}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
    return _make(
        "avgpool2", out, (x,),
        lambda g: (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,),
    )
