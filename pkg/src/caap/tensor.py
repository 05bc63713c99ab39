"""Small dense-tensor library with reverse-mode automatic differentiation.

Values live in float64 numpy arrays. Every differentiable operation is a
:class:`Function` subclass; calling ``Function.apply`` runs the forward pass
and, when any input requires a gradient, records a node stamped with a
monotonically increasing sequence number. ``backward`` replays the recorded
nodes in exactly the reverse of their execution order.

Broadcasting is deliberately narrow: equal shapes, scalar with tensor, and a
per-channel bias (``(C,)`` against ``(N, C)`` or ``(C, 1)`` against
``(N, C, L)``).
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float64

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


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


@contextlib.contextmanager
def frozen(params: Iterable["Tensor"]):
    """Temporarily mark ``params`` as constants (no gradient is computed)."""
    params = list(params)
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


class _Node:
    __slots__ = ("fn", "parents", "seq", "out_id", "consumed")

    def __init__(self, fn: "Function", parents: tuple, out_id: int):
        self.fn = fn
        self.parents = parents
        self.seq = next(_seq)
        self.out_id = out_id
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.size == 0:
            raise ShapeError("tensor dimensions must be >= 1")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    # -- basic properties -------------------------------------------------
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
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other):
        return Add.apply(as_tensor(other), self)

    def __sub__(self, other):
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other):
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other):
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other):
        return Mul.apply(as_tensor(other), self)

    def __truediv__(self, other):
        return Div.apply(self, as_tensor(other))

    def __rtruediv__(self, other):
        return Div.apply(as_tensor(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, as_tensor(other))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else self.shape[axis]
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    @property
    def T(self):
        return Transpose.apply(self)

    def relu(self):
        return Relu.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def abs(self):
        return Abs.apply(self)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def clamp_min(self, c: float):
        return ClampMin.apply(self, c=c)

    def backward(self) -> None:
        backward(self)


def _not_scalar():
    raise ValueError("only single-element tensors convert to Python scalars")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Function machinery
# ---------------------------------------------------------------------------


class Function:
    """Differentiable operation.

    ``forward`` receives raw arrays and returns an array. ``backward`` receives
    the output gradient and returns one gradient (or None) per tensor input.
    """

    def forward(self, *arrays, **kwargs) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, grad: np.ndarray):  # pragma: no cover - abstract
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls()
        fn.needs = tuple(t.requires_grad for t in inputs)
        out = Tensor(fn.forward(*(t.data for t in inputs), **kwargs))
        if _grad_enabled and any(fn.needs):
            out.requires_grad = True
            out._node = _Node(fn, inputs, id(out))
        return out


def _collect(loss: Tensor) -> list[_Node]:
    nodes: dict[int, _Node] = {}
    stack = [loss]
    seen: set[int] = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._node is not None:
            nodes[id(t._node)] = t._node
            stack.extend(t._node.parents)
    # reverse execution order
    return sorted(nodes.values(), key=lambda n: n.seq, reverse=True)


def _run_backward(loss: Tensor) -> tuple[dict[int, np.ndarray], dict[int, Tensor]]:
    """Propagate from ``loss``; returns leaf gradients keyed by tensor id."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = _collect(loss)
    if any(n.consumed for n in nodes):
        raise RuntimeError("graph already consumed by a previous backward; re-run the forward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    owner: dict[int, Tensor] = {}
    for node in nodes:
        node.consumed = True
        g = grads.pop(node.out_id, None)
        fn, node.fn = node.fn, None  # release saved arrays
        if g is None:
            continue
        in_grads = fn.backward(g)
        if not isinstance(in_grads, tuple):
            in_grads = (in_grads,)
        for parent, pg, need in zip(node.parents, in_grads, fn.needs):
            if pg is None or not need:
                continue
            key = id(parent)
            if parent._node is None:
                owner[key] = parent
                target = leaves
            else:
                target = grads
            target[key] = target[key] + pg if key in target else pg
    return leaves, owner


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss._node is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        return
    leaf_grads, owner = _run_backward(loss)
    for key, g in leaf_grads.items():
        t = owner[key]
        if not t.requires_grad:
            continue
        g = np.broadcast_to(g, t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` wrt ``inputs``; zeros for unreachable inputs.

    Does not touch ``.grad`` fields.
    """
    if loss._node is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        return [np.zeros_like(t.data) for t in inputs]
    leaf_grads, _ = _run_backward(loss)
    out = []
    for t in inputs:
        g = leaf_grads.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else np.broadcast_to(g, t.shape).copy())
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------


def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b or math.prod(a) == 1 or math.prod(b) == 1:
        return
    for big, small in ((a, b), (b, a)):
        if len(big) == 2 and small == (big[1],):
            return
        if len(big) == 3 and small == (big[1], 1):
            return
    raise ShapeError(f"incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        ga = _unbroadcast(g * self.b, self.a.shape) if self.needs[0] else None
        gb = _unbroadcast(g * self.a, self.b.shape) if self.needs[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape)
        if np.any(b == 0):
            raise ZeroDivisionError("division by a tensor containing zeros")
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = _unbroadcast(g / self.b, self.a.shape) if self.needs[0] else None
        gb = _unbroadcast(-g * self.a / (self.b * self.b), self.b.shape) if self.needs[1] else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return -g


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, g):
        return g * self.mask


class Sigmoid(Function):
    def forward(self, a):
        self.out = _sigmoid(a)
        return self.out

    def backward(self, g):
        return g * self.out * (1.0 - self.out)


class Sqrt(Function):
    def forward(self, a):
        if np.any(a < 0):
            raise ValueError("sqrt of negative value")
        self.out = np.sqrt(a)
        return self.out

    def backward(self, g):
        # derivative at exactly 0 is defined as 0
        safe = np.where(self.out > 0, self.out, 1.0)
        return np.where(self.out > 0, g * 0.5 / safe, 0.0)


class ClampMin(Function):
    def forward(self, a, c):
        self.mask = a > c
        return np.where(self.mask, a, c)

    def backward(self, g):
        return g * self.mask


class Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, g):
        return g * self.sign


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return g * self.out


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise ValueError("log of non-positive value")
        self.a = a
        return np.log(a)

    def backward(self, g):
        return g / self.a


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def sqrt(x: Tensor) -> Tensor:
    return Sqrt.apply(x)


def clamp_min(x: Tensor, c: float) -> Tensor:
    return ClampMin.apply(x, c=c)


def tabs(x: Tensor) -> Tensor:
    return Abs.apply(x)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


# ---------------------------------------------------------------------------
# shape / reduction
# ---------------------------------------------------------------------------


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return np.broadcast_to(g, self.shape).copy()


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return g.reshape(self.shape)


class Transpose(Function):
    def forward(self, a):
        if a.ndim != 2:
            raise ShapeError("transpose expects a 2-D tensor")
        return a.T.copy()

    def backward(self, g):
        return g.T


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.index = a.shape, index
        return np.array(a[index], dtype=DTYPE)

    def backward(self, g):
        out = np.zeros(self.shape, dtype=DTYPE)
        np.add.at(out, self.index, g)
        return out


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.moveaxis(g, self.axis, 0))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        ga = g @ self.b.T if self.needs[0] else None
        gb = self.a.T @ g if self.needs[1] else None
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


class Einsum(Function):
    """Two-operand einsum; each index appears at most once per operand."""

    def forward(self, a, b, equation):
        lhs, out = equation.replace(" ", "").split("->")
        sa, sb = lhs.split(",")
        for s in (sa, sb, out):
            if len(set(s)) != len(s):
                raise ValueError(f"repeated index in {equation!r}")
        self.sa, self.sb, self.so = sa, sb, out
        self.a, self.b = a, b
        return np.einsum(equation, a, b)

    def backward(self, g):
        ga = gb = None
        if self.needs[0]:
            ga = _einsum_grad(g, self.so, self.b, self.sb, self.sa, self.a.shape)
        if self.needs[1]:
            gb = _einsum_grad(g, self.so, self.a, self.sa, self.sb, self.b.shape)
        return ga, gb


def _einsum_grad(g, so, other, s_other, s_target, shape):
    # indices of the target that appear nowhere else were summed out: broadcast back
    present = [c for c in s_target if c in so or c in s_other]
    partial = np.einsum(f"{so},{s_other}->{''.join(present)}", g, other)
    if len(present) == len(s_target):
        return partial
    expand = [i for i, c in enumerate(s_target) if c not in present]
    partial = np.expand_dims(partial, expand)
    return np.broadcast_to(partial, shape).copy()


def einsum(equation: str, a: Tensor, b: Tensor) -> Tensor:
    return Einsum.apply(a, b, equation=equation)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


class Conv1d(Function):
    """Cross-correlation over the last axis; x is (C_in, L) or (N, C_in, L)."""

    def forward(self, x, w, stride=1, padding=0):
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv1d shape mismatch x{x.shape} w{w.shape}")
        n, c, length = x.shape
        c_out, _, k = w.shape
        if k > length + 2 * padding:
            raise ShapeError(f"kernel {k} larger than padded input {length + 2 * padding}")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
        l_out = (length + 2 * padding - k) // stride + 1
        win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :l_out]
        cols = win.transpose(0, 2, 1, 3).reshape(n * l_out, c * k)
        out = (cols @ w.reshape(c_out, c * k).T).reshape(n, l_out, c_out).transpose(0, 2, 1)
        self.cols, self.w, self.xp_shape = cols, w, xp.shape
        self.stride, self.padding, self.squeeze, self.l_out = stride, padding, squeeze, l_out
        out = np.ascontiguousarray(out)
        return out[0] if squeeze else out

    def backward(self, g):
        if self.squeeze:
            g = g[None]
        n, c_out, l_out = g.shape
        c_out, c, k = self.w.shape
        g2 = g.transpose(0, 2, 1).reshape(n * l_out, c_out)
        gw = (g2.T @ self.cols).reshape(self.w.shape) if self.needs[1] else None
        gx = None
        if self.needs[0]:
            dcols = (g2 @ self.w.reshape(c_out, c * k)).reshape(n, l_out, c, k)
            dxp = np.zeros(self.xp_shape, dtype=DTYPE)
            s = self.stride
            for j in range(k):
                dxp[:, :, j : j + s * (l_out - 1) + 1 : s] += dcols[:, :, :, j].transpose(0, 2, 1)
            p = self.padding
            gx = dxp[:, :, p : self.xp_shape[2] - p] if p else dxp
            if self.squeeze:
                gx = gx[0]
        return gx, gw


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv1d.apply(x, w, stride=stride, padding=padding)


def _windows(a: np.ndarray, window: int, stride: int) -> np.ndarray:
    if window > a.shape[-1] or window < 1:
        raise ShapeError(f"window {window} does not fit length {a.shape[-1]}")
    return np.lib.stride_tricks.sliding_window_view(a, window, axis=-1)[..., ::stride, :]


class AvgPool1d(Function):
    def forward(self, a, window, stride):
        self.shape, self.window, self.stride = a.shape, window, stride
        return _windows(a, window, stride).mean(axis=-1)

    def backward(self, g):
        out = np.zeros(self.shape, dtype=DTYPE)
        s, w = self.stride, self.window
        n_out = g.shape[-1]
        for j in range(w):
            out[..., j : j + s * (n_out - 1) + 1 : s] += g / w
        return out


class MaxPool1d(Function):
    def forward(self, a, window, stride):
        win = _windows(a, window, stride)
        self.shape, self.stride = a.shape, stride
        self.arg = win.argmax(axis=-1)
        return win.max(axis=-1)

    def backward(self, g):
        out = np.zeros(self.shape, dtype=DTYPE)
        n_out = g.shape[-1]
        pos = self.arg + np.arange(n_out) * self.stride
        lead = np.indices(pos.shape)[:-1]
        np.add.at(out, (*lead, pos), g)
        return out


def avg_pool1d(x: Tensor, window: int, stride: int = 1) -> Tensor:
    return AvgPool1d.apply(x, window=window, stride=stride)


def max_pool1d(x: Tensor, window: int, stride: int = 1) -> Tensor:
    return MaxPool1d.apply(x, window=window, stride=stride)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the last (time) axis."""
    return x.mean(axis=-1)


# ---------------------------------------------------------------------------
# softmax / losses
# ---------------------------------------------------------------------------


def _softmax_np(a: np.ndarray, axis: int) -> np.ndarray:
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        self.out = _softmax_np(a, axis)
        return self.out

    def backward(self, g):
        s = self.out
        return s * (g - (g * s).sum(axis=self.axis, keepdims=True))


class LogSoftmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        z = a - a.max(axis=axis, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
        self.soft = np.exp(out)
        return out

    def backward(self, g):
        return g - self.soft * g.sum(axis=self.axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


class CrossEntropy(Function):
    def forward(self, logits, labels, reduction="mean"):
        if logits.ndim != 2:
            raise ShapeError("cross_entropy expects (N, C) logits")
        n, c = logits.shape
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
        if np.any(labels < 0) or np.any(labels >= c):
            raise IndexError(f"label out of range [0, {c})")
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        self.soft = np.exp(logp)
        self.labels, self.reduction = labels, reduction
        per = -logp[np.arange(n), labels]
        if reduction == "none":
            return per
        if reduction == "sum":
            return np.asarray(per.sum())
        return np.asarray(per.mean())

    def backward(self, g):
        n = self.soft.shape[0]
        d = self.soft.copy()
        d[np.arange(n), self.labels] -= 1.0
        if self.reduction == "none":
            return d * g[:, None]
        if self.reduction == "mean":
            return d * (g / n)
        return d * g


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Mean (or per-sample / summed) negative log-softmax of the true class."""
    return CrossEntropy.apply(logits, labels=labels, reduction=reduction)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    lr: float,
    weight_decay: float,
    state: dict,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> list[np.ndarray]:
    """One AdamW update; returns new parameter arrays and advances ``state``."""
    b1, b2 = betas
    t = state.get("t", 0) + 1
    state["t"] = t
    ms = state.setdefault("m", [np.zeros_like(p) for p in params])
    vs = state.setdefault("v", [np.zeros_like(p) for p in params])
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        ms[i] = b1 * ms[i] + (1 - b1) * g
        vs[i] = b2 * vs[i] + (1 - b2) * g * g
        m_hat = ms[i] / (1 - b1**t)
        v_hat = vs[i] / (1 - b2**t)
        out.append(p * (1 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, weight_decay: float = 1e-2):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        new = adamw_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.lr if lr is None else lr,
            self.weight_decay,
            self.state,
        )
        for p, d in zip(self.params, new):
            p.data = d


def warmup_cosine(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.1) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, cosine decay after."""
    warm = max(1, int(round(warmup_frac * total_steps)))
    if step < warm:
        return base_lr * (step + 1) / warm
    span = max(1, total_steps - warm)
    progress = min(1.0, (step - warm) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
