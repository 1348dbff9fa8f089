"""
Minimal dense-tensor engine with reverse-mode automatic differentiation.

Values are float64 numpy arrays. Operations record themselves on the active
``Tape`` (if any); ``backward`` walks the tape in reverse and accumulates
gradients into every leaf tensor that requires them. Without an active tape
nothing is recorded, which is how evaluation runs.
"""

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ContractError, NonFiniteValueError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12

_state = threading.local()


def _active_tapes() -> List["Tape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def current_tape() -> Optional["Tape"]:
    """Innermost tape active on this thread, or None"""
    tapes = _active_tapes()
    return tapes[-1] if tapes else None


class Tensor:
    """Dense real array that can take part in reverse-mode differentiation"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = np.asarray(array, dtype=np.float64)
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        return tensor

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
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a constant")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap constants; tensors pass through unchanged"""
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64))


@dataclass
class Node:
    """One recorded operation: its backward rule, inputs and output"""
    function: "Function"
    inputs: Tuple[Tensor, ...]
    output: Tensor


class Tape:
    """Ordered record of differentiable operations

    Use as a context manager; operations executed inside the block are
    recorded in execution order, which is a topological order.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def record(self, node: Node):
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        tapes = _active_tapes()
        if tapes and tapes[-1] is self:
            tapes.pop()
        elif self in tapes:
            tapes.remove(self)
        return False


class Function:
    """Differentiable operation defined on raw arrays

    Subclasses implement ``forward`` (arrays in, array out) and ``backward``
    (output gradient in, one gradient or None per input out). Gradients may
    carry broadcast batch axes; ``backward()`` reduces them to input shapes.
    """

    name = "function"

    def __init__(self, **params):
        self.params = params
        self.saved: Tuple = ()

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: TensorLike, **params) -> Tensor:
        function = cls(**params)
        tensors = tuple(as_tensor(value) for value in inputs)
        out = function.forward(*(tensor.data for tensor in tensors))
        if not np.all(np.isfinite(out)):
            raise NonFiniteValueError(f"{cls.name} produced non-finite values")
        tape = current_tape()
        tracked = tape is not None and any(tensor.requires_grad for tensor in tensors)
        result = Tensor._wrap(out, requires_grad=tracked)
        if tracked:
            tape.record(Node(function, tensors, result))
        return result


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axes, keepdims: bool) -> np.ndarray:
    if axes is not None and not keepdims:
        grad = np.expand_dims(grad, axes)
    return np.broadcast_to(grad, shape)


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(a, b, self.name)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _broadcast_shape(a, b, self.name)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(a, b, self.name)
        self.saved = (a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        return grad * b, grad * a


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        self.saved = (a, b)
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.saved
        return np.matmul(grad, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), grad)


class Transpose(Function):
    name = "transpose"

    def forward(self, a):
        if a.ndim < 2:
            raise ShapeError(f"transpose: needs at least 2 axes, got shape {a.shape}")
        return np.swapaxes(a, -1, -2)

    def backward(self, grad):
        return (np.swapaxes(grad, -1, -2),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a):
        self.saved = (a.shape,)
        try:
            return a.reshape(self.params["shape"])
        except ValueError:
            raise ShapeError(f"reshape: cannot view {a.shape} as {self.params['shape']}") from None

    def backward(self, grad):
        (shape,) = self.saved
        return (grad.reshape(shape),)


class SoftmaxRows(Function):
    name = "softmax_rows"

    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)
        self.saved = (out,)
        return out

    def backward(self, grad):
        (y,) = self.saved
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class ReLU(Function):
    name = "relu"

    def forward(self, a):
        mask = a > 0
        self.saved = (mask,)
        return np.where(mask, a, 0.0)

    def backward(self, grad):
        (mask,) = self.saved
        return (grad * mask,)


class SoftThreshold(Function):
    name = "soft_threshold"

    def forward(self, a):
        gamma = self.params["gamma"]
        magnitude = np.abs(a) - gamma
        mask = magnitude > 0
        self.saved = (mask,)
        return np.where(mask, np.sign(a) * magnitude, 0.0)

    def backward(self, grad):
        (mask,) = self.saved
        return (grad * mask,)


class Sum(Function):
    name = "reduce_sum"

    def forward(self, a):
        axes = _normalize_axes(self.params.get("axis"), a.ndim)
        keepdims = self.params.get("keepdims", False)
        self.saved = (a.shape, axes, keepdims)
        return np.sum(a, axis=axes, keepdims=keepdims)

    def backward(self, grad):
        shape, axes, keepdims = self.saved
        return (_expand_reduced(grad, shape, axes, keepdims),)


class Mean(Function):
    name = "mean"

    def forward(self, a):
        axes = _normalize_axes(self.params.get("axis"), a.ndim)
        keepdims = self.params.get("keepdims", False)
        count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
        self.saved = (a.shape, axes, keepdims, count)
        return np.mean(a, axis=axes, keepdims=keepdims)

    def backward(self, grad):
        shape, axes, keepdims, count = self.saved
        return (_expand_reduced(grad, shape, axes, keepdims) / count,)


class FrobeniusSq(Function):
    name = "frobenius_sq"

    def forward(self, a):
        axes = _normalize_axes(self.params.get("axis"), a.ndim)
        self.saved = (a, axes)
        return np.sum(a * a, axis=axes)

    def backward(self, grad):
        a, axes = self.saved
        return (2.0 * a * _expand_reduced(grad, a.shape, axes, False),)


class CrossEntropy(Function):
    name = "cross_entropy"

    def forward(self, probs):
        labels = self.params["labels"]
        rows = np.arange(probs.shape[0]) if probs.ndim == 2 else None
        picked = probs[rows, labels] if rows is not None else probs[labels]
        self.saved = (probs.shape, rows, labels, picked)
        return -np.log(np.maximum(picked, LOG_CLAMP))

    def backward(self, grad):
        shape, rows, labels, picked = self.saved
        local = np.where(picked > LOG_CLAMP, -1.0 / np.maximum(picked, LOG_CLAMP), 0.0) * grad
        out = np.zeros(shape)
        if rows is not None:
            out[rows, labels] = local
        else:
            out[labels] = local
        return (out,)


def add(a: TensorLike, b: TensorLike) -> Tensor:
    return Add.apply(a, b)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    return Sub.apply(a, b)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    return Mul.apply(a, b)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast as a batch"""
    return MatMul.apply(a, b)


def transpose(a: TensorLike) -> Tensor:
    return Transpose.apply(a)


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def softmax_rows(a: TensorLike) -> Tensor:
    """Softmax along the last axis with row-max subtraction"""
    return SoftmaxRows.apply(a)


def relu(a: TensorLike) -> Tensor:
    return ReLU.apply(a)


def soft_threshold(a: TensorLike, gamma: float) -> Tensor:
    """sign(u) * max(0, |u| - gamma); subgradient 0 at |u| = gamma"""
    if gamma < 0 or not np.isfinite(gamma):
        raise ParameterError(f"soft_threshold: gamma must be a finite nonnegative number, got {gamma}")
    return SoftThreshold.apply(a, gamma=float(gamma))


def reduce_sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def frobenius_sq(a: TensorLike, axis=None) -> Tensor:
    """Sum of squared entries; ``axis`` keeps leading batch axes"""
    return FrobeniusSq.apply(a, axis=axis)


def cross_entropy(probs: TensorLike, label) -> Tensor:
    """-log(p[label]) with p clamped at 1e-12

    ``probs`` is a length-C vector with an integer label, or an M x C batch
    with M labels (one loss per row).
    """
    probs = as_tensor(probs)
    if probs.ndim not in (1, 2):
        raise ShapeError(f"cross_entropy: expected (C,) or (M, C) probabilities, got {probs.shape}")
    n_classes = probs.shape[-1]
    if n_classes < 2:
        raise ParameterError(f"cross_entropy: need at least 2 classes, got {n_classes}")
    labels = np.asarray(label, dtype=np.int64)
    expected = () if probs.ndim == 1 else (probs.shape[0],)
    if labels.shape != expected:
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match probabilities {probs.shape}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ParameterError(f"cross_entropy: label out of range [0, {n_classes})")
    if np.any(np.abs(probs.data.sum(axis=-1) - 1.0) > 1e-6):
        raise ContractError("cross_entropy: probabilities must sum to 1 within 1e-6")
    return CrossEntropy.apply(probs, labels=labels if labels.ndim else int(labels))


def backward(loss: Tensor, tape: Tape, leaves: Optional[Iterable[Tensor]] = None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf

    Leaves listed in ``leaves`` that the loss does not depend on get a zero
    gradient so optimizers always see a complete set.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.output) for node in tape.nodes}
    if id(loss) not in produced and not loss.requires_grad:
        raise ContractError("backward: loss was not recorded on this tape")

    seed = np.ones_like(loss.data)
    grads = {id(loss): seed}
    leaf_grads = {}
    if id(loss) not in produced:
        leaf_grads[id(loss)] = (loss, seed)

    for node in reversed(tape.nodes):
        grad = grads.pop(id(node.output), None)
        if grad is None:
            continue
        for tensor, g in zip(node.inputs, node.function.backward(grad)):
            if g is None or not tensor.requires_grad:
                continue
            g = _unbroadcast(np.asarray(g, dtype=np.float64), tensor.data.shape)
            key = id(tensor)
            if key in produced:
                grads[key] = grads[key] + g if key in grads else g
            elif key in leaf_grads:
                leaf_grads[key] = (tensor, leaf_grads[key][1] + g)
            else:
                leaf_grads[key] = (tensor, g)

    for tensor, g in leaf_grads.values():
        tensor.grad = np.array(g) if tensor.grad is None else tensor.grad + g
    for leaf in leaves or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def finite_diff_grad(f: Callable[[Tensor], TensorLike], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference estimate of df/dx, one coordinate at a time"""
    if h <= 0:
        raise ParameterError(f"finite_diff_grad: step must be positive, got {h}")
    work = x.data.copy()
    flat = work.reshape(-1)
    grad = np.zeros(work.size)
    for i in range(work.size):
        original = flat[i]
        flat[i] = original + h
        forward_value = _scalar(f(Tensor(work)))
        flat[i] = original - h
        backward_value = _scalar(f(Tensor(work)))
        flat[i] = original
        grad[i] = (forward_value - backward_value) / (2.0 * h)
    return Tensor(grad.reshape(x.shape))


def _scalar(value: TensorLike) -> float:
    array = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    if array.size != 1:
        raise ContractError(f"expected a scalar function value, got shape {array.shape}")
    return float(array.reshape(-1)[0])
