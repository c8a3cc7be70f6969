"""Minimal define-by-run reverse-mode autodiff over float64 numpy buffers.

Operations record themselves on the active :class:`Tape` (a thread-local
stack managed with ``with Tape():``). Outside any tape, operations run in
inference mode: results carry no graph and never receive gradient.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape():
    ...     loss = (w * w).sum()
    >>> backward(loss)
    >>> w.grad
    array([2., 4.])
"""

from __future__ import annotations

import threading
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError, DomainError, ParameterError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_local = threading.local()


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations; the position in ``records`` is the node id.

    Because an operation can only consume tensors that already exist, input
    nodes always precede their outputs and reversed replay is a valid
    topological order.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, fn: "Function", out: "Tensor") -> None:
        out.node = len(self.records)
        out.tape = self
        self.records.append((fn, out))


class Tensor:
    """Dense float64 tensor with a same-shaped gradient buffer.

    Only leaves (``requires_grad=True`` tensors not produced by a recorded
    operation) accumulate into ``grad`` during :func:`backward`.
    """

    __array_ufunc__ = None  # make ndarray <op> Tensor defer to the Tensor operators

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self.node: Optional[int] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.shape:
            raise DimensionError(f"grad shape {value.shape} != tensor shape {self.shape}")
        self._grad = value.copy()

    def zero_grad(self) -> None:
        self._grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def relu(self):
        return Relu.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return Max.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Function:
    """One differentiable operation. Subclasses implement forward/backward on arrays.

    ``backward`` receives dL/d(output) and returns one array (or None) per
    input; broadcasting is undone by the tape afterwards.
    """

    name = "function"

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(*tensors)
        out = Tensor(fn.forward(*(t.data for t in tensors), **kwargs))
        tape = active_tape()
        if tape is not None and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            tape.record(fn, out)
        return out


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def _first_bad(mask: np.ndarray):
    return tuple(int(i) for i in np.argwhere(mask)[0])


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(a, b, self.name)
        return a + b

    def backward(self, g):
        return g, g


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _broadcast_shape(a, b, self.name)
        return a - b

    def backward(self, g):
        return g, -g


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(a, b, self.name)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


class Div(Function):
    name = "div"

    def forward(self, a, b):
        _broadcast_shape(a, b, self.name)
        if np.any(b == 0):
            raise DomainError(f"div: zero denominator at index {_first_bad(b == 0)}")
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        return g / self.b, -g * self.a / (self.b * self.b)


class Neg(Function):
    name = "negate"

    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise DomainError(f"log: non-positive input at index {_first_bad(a <= 0)}")
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Relu(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, g):
        return (g * self.mask,)


class Sqrt(Function):
    name = "sqrt"

    def forward(self, a):
        if np.any(a <= 0):
            raise DomainError(f"sqrt: non-positive input at index {_first_bad(a <= 0)}")
        self.out = np.sqrt(a)
        return self.out

    def backward(self, g):
        return (g / (2.0 * self.out),)


_ELEMENTWISE = {
    "add": Add,
    "sub": Sub,
    "mul": Mul,
    "div": Div,
    "exp": Exp,
    "log": Log,
    "relu": Relu,
    "negate": Neg,
    "sqrt": Sqrt,
}
_UNARY = {"exp", "log", "relu", "negate", "sqrt"}


def elementwise(kind: str, a: ArrayLike, b: ArrayLike = None) -> Tensor:
    """Dispatch an elementwise op by name; unary kinds ignore ``b``."""
    if kind not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {kind!r}; expected one of {sorted(_ELEMENTWISE)}")
    if kind in _UNARY:
        return _ELEMENTWISE[kind].apply(a)
    if b is None:
        raise ContractError(f"{kind} needs two operands")
    return _ELEMENTWISE[kind].apply(a, b)


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        return g @ self.b.T, self.a.T @ g


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return MatMul.apply(a, b)


class Conv2d(Function):
    """Direct cross-correlation, one kernel offset at a time."""

    name = "conv2d"

    def forward(self, x, k, stride=1, padding=0):
        if x.ndim != 4 or k.ndim != 4:
            raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {k.shape}")
        b, c, h, w = x.shape
        o, kc, kh, kw = k.shape
        if kc != c:
            raise DimensionError(f"conv2d: kernel has {kc} channels, input has {c}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError(f"conv2d: kernel spatial dims must be odd, got {kh}x{kw}")
        if stride < 1 or padding < 0:
            raise ParameterError(f"conv2d: stride must be >= 1 and padding >= 0")
        oh = (h + 2 * padding - kh) // stride + 1
        ow = (w + 2 * padding - kw) // stride + 1
        if oh <= 0 or ow <= 0:
            raise DimensionError(f"conv2d: non-positive output size {oh}x{ow}")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        out = np.zeros((b, o, oh, ow))
        for di in range(kh):
            for dj in range(kw):
                patch = xp[:, :, di : di + stride * (oh - 1) + 1 : stride, dj : dj + stride * (ow - 1) + 1 : stride]
                # (b,c,oh,ow) x (o,c) -> (b,oh,ow,o)
                out += np.tensordot(patch, k[:, :, di, dj], axes=([1], [1])).transpose(0, 3, 1, 2)
        self.xp, self.k = xp, k
        self.stride, self.padding = stride, padding
        self.out_hw = (oh, ow)
        return out

    def backward(self, g):
        xp, k, s, p = self.xp, self.k, self.stride, self.padding
        oh, ow = self.out_hw
        _, _, kh, kw = k.shape
        gx = np.zeros_like(xp)
        gk = np.zeros_like(k)
        for di in range(kh):
            for dj in range(kw):
                rows = slice(di, di + s * (oh - 1) + 1, s)
                cols = slice(dj, dj + s * (ow - 1) + 1, s)
                patch = xp[:, :, rows, cols]
                gk[:, :, di, dj] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
                gx[:, :, rows, cols] += np.tensordot(g, k[:, :, di, dj], axes=([1], [0])).transpose(0, 3, 1, 2)
        if p:
            gx = gx[:, :, p:-p, p:-p]
        return gx, gk


def conv2d(x: ArrayLike, kernel: ArrayLike, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, kernel, stride=stride, padding=padding)


def _check_axis(a: np.ndarray, axis, op: str):
    if axis is None:
        return None
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise DimensionError(f"{op}: axis {ax} out of range for shape {a.shape}")
    return tuple(ax % a.ndim for ax in axes)


def _expand_reduced(g, shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


class Sum(Function):
    name = "sum"

    def forward(self, a, axis=None, keepdims=False):
        self.axes = _check_axis(a, axis, self.name)
        self.shape, self.keepdims = a.shape, keepdims
        return np.sum(a, axis=self.axes, keepdims=keepdims)

    def backward(self, g):
        return (_expand_reduced(g, self.shape, self.axes, self.keepdims).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, a, axis=None, keepdims=False):
        self.axes = _check_axis(a, axis, self.name)
        self.shape, self.keepdims = a.shape, keepdims
        self.count = a.size if self.axes is None else int(np.prod([a.shape[i] for i in self.axes]))
        return np.mean(a, axis=self.axes, keepdims=keepdims)

    def backward(self, g):
        return (_expand_reduced(g, self.shape, self.axes, self.keepdims) / self.count,)


class Max(Function):
    """Max reduction; the gradient goes to the first maximal entry only."""

    name = "max"

    def forward(self, a, axis=None, keepdims=False):
        axes = _check_axis(a, axis, self.name)
        if axes is not None and len(axes) > 1:
            raise DimensionError("max reduces over a single axis or all axes")
        self.shape, self.keepdims = a.shape, keepdims
        if axes is None:
            flat = np.argmax(a)
            self.mask = np.zeros(a.size)
            self.mask[flat] = 1.0
            self.mask = self.mask.reshape(a.shape)
            self.axis = None
            return np.max(a, keepdims=keepdims) if keepdims else np.asarray(a.reshape(-1)[flat])
        ax = axes[0]
        idx = np.expand_dims(np.argmax(a, axis=ax), ax)
        self.mask = np.zeros_like(a)
        np.put_along_axis(self.mask, idx, 1.0, axis=ax)
        self.axis = ax
        return np.max(a, axis=ax, keepdims=keepdims)

    def backward(self, g):
        axes = None if self.axis is None else (self.axis,)
        return (_expand_reduced(g, self.shape, axes, self.keepdims) * self.mask,)


class MaxPool2x2(Function):
    """Non-overlapping 2x2 max pooling over the last two axes; odd edges are dropped."""

    name = "maxpool2x2"

    def forward(self, x):
        if x.ndim != 4:
            raise DimensionError(f"maxpool2x2 expects b x c x h x w, got {x.shape}")
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        if h2 == 0 or w2 == 0:
            raise DimensionError(f"maxpool2x2: spatial size {h}x{w} too small")
        win = x[:, :, : 2 * h2, : 2 * w2].reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(b, c, h2, w2, 4)
        self.arg = np.argmax(win, axis=-1)
        self.shape = x.shape
        return np.take_along_axis(win, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        b, c, h, w = self.shape
        h2, w2 = h // 2, w // 2
        win = np.zeros((b, c, h2, w2, 4))
        np.put_along_axis(win, self.arg[..., None], g[..., None], axis=-1)
        win = win.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
        gx = np.zeros(self.shape)
        gx[:, :, : 2 * h2, : 2 * w2] = win
        return (gx,)


def maxpool2x2(x: ArrayLike) -> Tensor:
    return MaxPool2x2.apply(x)


_REDUCTIONS = {"sum": Sum, "mean": Mean, "max": Max}


def reductions(kind: str, a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    """Dispatch a reduction by name. ``maxpool2x2`` ignores ``axis``."""
    if kind == "maxpool2x2":
        return MaxPool2x2.apply(a)
    if kind not in _REDUCTIONS:
        raise ContractError(f"unknown reduction {kind!r}")
    return _REDUCTIONS[kind].apply(a, axis=axis, keepdims=keepdims)


class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape=None):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise DimensionError(f"cannot reshape {a.shape} into {shape}") from None

    def backward(self, g):
        return (g.reshape(self.shape),)


def _check_rows(z: np.ndarray, T: float, op: str):
    if not T > 0:
        raise ParameterError(f"{op}: temperature must be > 0, got {T}")
    if z.ndim != 2:
        raise DimensionError(f"{op} expects a batch x classes matrix, got shape {z.shape}")


def _stable_softmax(z: np.ndarray, T: float) -> np.ndarray:
    s = z / T
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


class SoftmaxRows(Function):
    name = "softmax_rows"

    def forward(self, z, T=1.0):
        _check_rows(z, T, self.name)
        self.T = T
        self.p = _stable_softmax(z, T)
        return self.p

    def backward(self, g):
        p = self.p
        return (p * (g - (g * p).sum(axis=1, keepdims=True)) / self.T,)


class LogSoftmaxRows(Function):
    name = "log_softmax_rows"

    def forward(self, z, T=1.0):
        _check_rows(z, T, self.name)
        self.T = T
        s = z / T
        s = s - s.max(axis=1, keepdims=True)
        lse = np.log(np.exp(s).sum(axis=1, keepdims=True))
        out = s - lse
        self.p = np.exp(out)
        return out

    def backward(self, g):
        return ((g - self.p * g.sum(axis=1, keepdims=True)) / self.T,)


def softmax_rows(z: ArrayLike, T: float = 1.0) -> Tensor:
    return SoftmaxRows.apply(z, T=T)


def log_softmax_rows(z: ArrayLike, T: float = 1.0) -> Tensor:
    return LogSoftmaxRows.apply(z, T=T)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    A loss that never touched a tape (a constant) leaves all grads untouched.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        if loss.requires_grad:
            loss.grad = loss.grad + 1.0
        return
    tape = loss.tape
    pending = {loss.node: np.ones_like(loss.data)}
    for fn, out in reversed(tape.records[: loss.node + 1]):
        g = pending.pop(out.node, None)
        if g is None:
            continue
        in_grads = fn.backward(g)
        for t, gi in zip(fn.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = _unbroadcast(np.asarray(gi, dtype=np.float64), t.shape)
            if t.tape is tape and t.node is not None:
                prev = pending.get(t.node)
                pending[t.node] = gi if prev is None else prev + gi
            else:
                t._grad = gi.copy() if t._grad is None else t._grad + gi
