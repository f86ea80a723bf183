"""Dense float64 tensors with reverse-mode gradient propagation.

Every layer in the package is composed from the primitives in this module. A
primitive computes its value with numpy and records a closure that maps the
gradient of its output to gradients of its parents. ``backward`` walks the
recorded graph once in reverse topological order.

Broadcasting is limited to leading dimensions: two operands conform when their
shapes are equal or when one shape is a suffix of the other.
"""

import logging
import threading
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from hyperpoint.exceptions import GradientError, ShapeError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
ArrayLike = Union[np.ndarray, Sequence, float, int]


class OpCounter:
    """Thread-safe accumulator of scalar multiplications performed by primitives."""

    def __init__(self):
        self._lock = threading.Lock()
        self._multiplies = 0

    @property
    def multiplies(self) -> int:
        """Total multiplications recorded so far."""
        with self._lock:
            return self._multiplies

    def add(self, count: int) -> None:
        """Record ``count`` multiplications."""
        with self._lock:
            self._multiplies += int(count)

    def reset(self) -> None:
        """Reset the accumulator to zero."""
        with self._lock:
            self._multiplies = 0


_active_counter: ContextVar[Optional[OpCounter]] = ContextVar("hyperpoint_op_counter", default=None)


@contextmanager
def counting(counter: Optional[OpCounter]) -> Iterator[Optional[OpCounter]]:
    """Route multiply counts of primitives executed in this context to ``counter``."""
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def _record_multiplies(count: int) -> None:
    counter = _active_counter.get()
    if counter is not None:
        counter.add(count)


class Tensor:
    """Shape-carrying float64 array that may take part in a gradient graph.

    Values are stored read-only. The optimizer is the only caller that rebinds
    ``data`` of a leaf, between graphs.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "op", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64)
        array.flags.writeable = False
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.parents: Tuple["Tensor", ...] = ()
        self.op = name or "leaf"
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str,
                 backward: BackwardFn) -> "Tensor":
        """Wrap a freshly computed array as the output of primitive ``op``."""
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.parents = tuple(parents)
            out._backward = backward
        else:
            out.parents = ()
            out._backward = None
        return out

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
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        """Return the (read-only) value array."""
        return self.data

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    """Return ``value`` unchanged if it is a Tensor, else wrap it as a constant."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _leading_broadcast(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    """Result shape of an elementwise op, broadcasting over leading dims only."""
    if a == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the leading axes that broadcasting added."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


# Elementwise primitives

def add(a, b) -> Tensor:
    """Elementwise sum."""
    a, b = as_tensor(a), as_tensor(b)
    _leading_broadcast("add", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    """Elementwise difference ``a - b``."""
    a, b = as_tensor(a), as_tensor(b)
    _leading_broadcast("sub", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), "sub", backward)


def hadamard(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    shape = _leading_broadcast("hadamard", a.shape, b.shape)
    _record_multiplies(int(np.prod(shape)))

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), "hadamard", backward)


def scale(a, factor: float) -> Tensor:
    """Multiply every element by a constant."""
    a = as_tensor(a)
    factor = float(factor)
    _record_multiplies(a.size)

    def backward(g):
        return (g * factor,)

    return Tensor._from_op(a.data * factor, (a,), "scale", backward)


def maximum(a, b) -> Tensor:
    """Elementwise maximum; gradient is split evenly on ties."""
    a, b = as_tensor(a), as_tensor(b)
    _leading_broadcast("maximum", a.shape, b.shape)
    out = np.maximum(a.data, b.data)

    def backward(g):
        a_wins = (a.data > b.data).astype(np.float64)
        tie = (a.data == b.data).astype(np.float64)
        ga = g * (a_wins + 0.5 * tie)
        gb = g * (1.0 - a_wins - tie + 0.5 * tie)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, (a, b), "maximum", backward)


def relu(a) -> Tensor:
    """Rectified linear unit."""
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), "relu", backward)


# Linear algebra and layout

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting over leading batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, got {a.shape} and {b.shape}")
    _leading_broadcast("matmul", a.shape[:-2], b.shape[:-2])
    out = np.matmul(a.data, b.data)
    _record_multiplies(out.size * a.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, (a, b), "matmul", backward)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: need at least 2-D, got {a.shape}")

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return Tensor._from_op(np.swapaxes(a.data, -1, -2), (a,), "transpose", backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    """Reshape without changing the element order."""
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from e

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor._from_op(out, (a,), "reshape", backward)


def concat_channels(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the channel (last) axis; other extents must match."""
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat_channels: no operands")
    lead = parts[0].shape[:-1]
    for t in parts[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_channels: incompatible shapes {parts[0].shape} and {t.shape}")
    widths = [t.shape[-1] for t in parts]
    splits = np.cumsum(widths)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=-1))

    return Tensor._from_op(np.concatenate([t.data for t in parts], axis=-1), parts,
                           "concat_channels", backward)


def gather_rows(a, index: np.ndarray) -> Tensor:
    """Select rows of ``a`` by an integer index array of any shape.

    The result has shape ``index.shape + a.shape[1:]``.
    """
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim < 1:
        raise ShapeError("gather_rows: operand must have at least one axis")
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def backward(g):
        ga = np.zeros(a.shape, dtype=np.float64)
        np.add.at(ga, index, g)
        return (ga,)

    return Tensor._from_op(a.data[index], (a,), "gather_rows", backward)


# Reductions

def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over ``axis`` (all axes when None)."""
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(out, (a,), "reduce_sum", backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    """Mean over ``axis`` (all axes when None)."""
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"reduce_mean: empty reduction over shape {a.shape}")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor._from_op(out, (a,), "reduce_mean", backward)


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum over ``axis``; gradient is shared evenly between tied maxima."""
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ShapeError(f"reduce_max: empty reduction over shape {a.shape}")
    kept = a.data.max(axis=axes, keepdims=True)
    out = kept if keepdims else kept.reshape([s for i, s in enumerate(a.shape) if i not in axes])

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        mask = (a.data == kept).astype(np.float64)
        mask /= mask.sum(axis=axes, keepdims=True)
        return (mask * g,)

    return Tensor._from_op(out, (a,), "reduce_max", backward)


# Normalizations

def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} in shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(s, (a,), "softmax", backward)


def softmax_lastdim(a) -> Tensor:
    """Softmax over the last axis."""
    return softmax(a, axis=-1)


def log_softmax_lastdim(a) -> Tensor:
    """Log of the softmax over the last axis."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError(f"log_softmax: empty last axis in shape {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_z
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(out, (a,), "log_softmax", backward)


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine terms)."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError(f"layer_norm: empty last axis in shape {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv_sigma = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_sigma

    def backward(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_sigma * (g - g_mean - xhat * gx_mean),)

    return Tensor._from_op(xhat, (a,), "layer_norm", backward)


# Gradient graph

class GradGraph:
    """Topologically ordered record of the primitives that produced a tensor."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: List[Tensor] = self._topological_order(output)

    @staticmethod
    def _topological_order(output: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.parents):
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    @property
    def leaves(self) -> List[Tensor]:
        """Leaves of the graph that require gradients."""
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def backward(self) -> Dict[Tensor, np.ndarray]:
        """Propagate d(output)/d(node) to every node, visiting each once."""
        grads: Dict[int, np.ndarray] = {id(self.output): np.ones(self.output.shape)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)
        result = {}
        for leaf in self.leaves:
            result[leaf] = grads.get(id(leaf), np.zeros(leaf.shape))
        return result


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Compute gradients of a scalar ``loss`` for every requires-grad leaf.

    The gradients are stored on each leaf's ``grad`` (replacing earlier values)
    and returned as a mapping.
    """
    if loss.size != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward called on a constant; no leaves to update")
        return {}
    grads = GradGraph(loss).backward()
    for leaf, g in grads.items():
        leaf.grad = g
    return grads


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    ``fn`` is evaluated with no arguments and must read the ``inputs`` leaves it
    closes over. Each checked coordinate is perturbed by ``±eps``. When
    ``max_coords`` is set, that many coordinates per input are checked at random.

    Returns the maximum over checked coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 0.0 < eps <= 1e-3:
        raise GradientError(f"eps must lie in (0, 1e-3], got {eps}")
    for t in inputs:
        if not t.requires_grad:
            raise GradientError(f"grad_check input {t!r} does not require gradients")

    loss = fn()
    if loss.size != 1:
        raise GradientError(f"grad_check requires a scalar function, got shape {loss.shape}")
    analytic = GradGraph(loss).backward() if loss.requires_grad else {}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for input_idx, tensor in enumerate(inputs):
        expected = analytic.get(tensor, np.zeros(tensor.shape))
        original = tensor.data
        coords = range(original.size)
        if max_coords is not None and original.size > max_coords:
            coords = np.sort(rng.choice(original.size, size=max_coords, replace=False))
        for flat in coords:
            values = []
            for sign in (1.0, -1.0):
                shifted = original.copy().reshape(-1)
                shifted[flat] += sign * eps
                shifted = shifted.reshape(original.shape)
                shifted.flags.writeable = False
                tensor.data = shifted
                try:
                    values.append(fn().item())
                finally:
                    tensor.data = original
            numeric = (values[0] - values[1]) / (2.0 * eps)
            exact = float(expected.reshape(-1)[flat])
            if not (np.isfinite(numeric) and np.isfinite(exact)):
                coordinate = (input_idx, int(flat))
                raise GradientError(f"non-finite value at input {input_idx}, coordinate {int(flat)}",
                                    coordinate=coordinate)
            worst = max(worst, abs(exact - numeric) / max(1.0, abs(numeric)))
    logger.debug(f"grad_check max relative error {worst:.3e}")
    return worst
