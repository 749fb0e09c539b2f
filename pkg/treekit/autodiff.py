"""Reverse-mode automatic differentiation over numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to one gradient per parent. :class:`Tape` orders
the reachable graph topologically; :func:`backward` walks it in reverse,
exactly once per node.

Gradients accumulate into ``Tensor.grad`` of leaf tensors created with
``requires_grad=True`` until :meth:`Tensor.zero_grad`. :func:`gradients`
returns them instead of accumulating, which lets independent tapes run on
worker threads against shared parameters.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import ContractViolation, NumericAbort

ArrayLike = Union[np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_sequence = itertools.count()
_state = threading.local()
_debug_numerics = False


def set_debug_numerics(enabled: bool) -> None:
    """Check every op output for NaN/Inf (slow; for validated runs)."""
    global _debug_numerics
    _debug_numerics = bool(enabled)


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """Dense array plus the op record needed to differentiate through it."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        if self.data.dtype.kind not in "fc":
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self.parents: Tuple["Tensor", ...] = ()
        self.backward_fn: Optional[BackwardFn] = None
        self.seq = next(_sequence)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # Operator sugar over the functional ops below.
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(value: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    array = np.asarray(value)
    if like is not None and array.dtype != like.dtype:
        array = array.astype(like.dtype)
    return Tensor(array)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Record a differentiable op.

    ``backward_fn(grad_out)`` returns one gradient (or ``None``) per parent,
    each shaped like that parent.
    """
    out = Tensor(data)
    if _debug_numerics and not np.all(np.isfinite(out.data)):
        raise NumericAbort(f"Non-finite values produced by op {op!r}", parameter=op)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# Tape and backward pass


class Tape:
    """Nodes reachable from ``root`` in topological order (inputs first)."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)

    def reversed(self) -> Iterator[Tensor]:
        return reversed(self.nodes)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def _propagate(loss: Tensor) -> Dict[int, Tuple[Tensor, np.ndarray]]:
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: Dict[int, Tuple[Tensor, np.ndarray]] = {}
    for node in tape.reversed():
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                leaf_grads[id(node)] = (node, g)
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ContractViolation(
                    f"Op {node.op!r} produced gradient shape {pg.shape} for input {parent.shape}"
                )
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return leaf_grads


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable tracked leaf's ``grad``."""
    for node, g in _propagate(loss).values():
        node.grad = g.copy() if node.grad is None else node.grad + g


def gradients(loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients for ``params`` without touching ``.grad``; unreached params get zeros."""
    found = _propagate(loss)
    return [found[id(p)][1] if id(p) in found else np.zeros_like(p.data) for p in params]


# ---------------------------------------------------------------------------
# Primitives


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape("add", a, b)
    return custom_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape("sub", a, b)
    return custom_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape("mul", a, b)
    return custom_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    return custom_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """Batched ``a @ b`` over the last two axes with broadcast batch axes."""
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return custom_op(a.data @ b.data, (a, b), backward_fn, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return custom_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ContractViolation(f"transpose: axes {axes} do not permute shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a: Tensor, first: int, second: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[first], axes[second] = axes[second], axes[first]
    return transpose(a, axes)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return custom_op(np.asarray(out), (a,), backward_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def gather(a: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """``np.take`` along ``axis`` with a 1-D integer index (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ContractViolation(f"gather expects a 1-D index, got shape {index.shape}")
    if index.size and (index.min() < -a.shape[axis] or index.max() >= a.shape[axis]):
        raise ContractViolation(f"gather: index out of range for axis {axis} of {a.shape}")

    def backward_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(np.moveaxis(out, axis, 0), index, np.moveaxis(g, axis, 0))
        return (out,)

    return custom_op(np.take(a.data, index, axis=axis), (a,), backward_fn, "gather")


def scatter(a: Tensor, index: np.ndarray, size: int, axis: int = 0) -> Tensor:
    """Add slices of ``a`` into a zero tensor of length ``size`` along ``axis``."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or index.size != a.shape[axis]:
        raise ContractViolation(f"scatter: index shape {index.shape} does not match axis {axis} of {a.shape}")
    shape = list(a.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=a.dtype)
    np.add.at(np.moveaxis(out, axis, 0), index, np.moveaxis(a.data, axis, 0))
    return custom_op(out, (a,), lambda g: (np.take(g, index, axis=axis),), "scatter")


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return custom_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = expit(a.data)
    return custom_op(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / rms(x) * gain`` over the last axis."""
    if gain.shape != x.shape[-1:]:
        raise ContractViolation(f"rms_norm: gain shape {gain.shape} does not match {x.shape}")
    d = x.shape[-1]
    r = np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    normed = x.data / r

    def backward_fn(g):
        gn = g * gain.data
        gx = gn / r - x.data * np.sum(gn * x.data, axis=-1, keepdims=True) / (d * r ** 3)
        ggain = (g * normed).reshape(-1, d).sum(axis=0)
        return gx, ggain

    return custom_op(normed * gain.data, (x, gain), backward_fn, "rms_norm")


def masked_softmax(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` where ``mask`` is False gets probability (and gradient) 0.

    Slices with no unmasked entry come out all zeros.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    logits = np.where(mask, a.data, -np.inf)
    peak = np.max(logits, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.where(mask, np.exp(np.where(mask, a.data - peak, 0.0)), 0.0)
    total = e.sum(axis=axis, keepdims=True)
    y = e / np.where(total > 0, total, 1.0)

    def backward_fn(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return custom_op(y, (a,), backward_fn, "masked_softmax")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return masked_softmax(a, np.ones(a.shape, dtype=bool), axis)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
