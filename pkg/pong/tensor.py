"""
Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive is a :class:`Function` subclass. Applying one records
a :class:`TapeNode` on its output when gradient recording is enabled and any input
requires a gradient; :meth:`Tensor.backward` walks those nodes in reverse creation
order.
"""

import contextlib
import dataclasses
import enum
import itertools
import threading
from typing import Any, ClassVar, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ShapeError
from .utils import build_enum_repr

_sequence = itertools.count()
_local = threading.local()


class Precision(enum.Enum):
    STANDARD = "float32"
    WIDE = "float64"

    def __repr__(self):
        return build_enum_repr(self)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.value)


def get_precision() -> Precision:
    return getattr(_local, "precision", Precision.STANDARD)


@contextlib.contextmanager
def precision(value: Union[Precision, str]):
    if isinstance(value, str):
        value = Precision[value.upper()]
    previous = get_precision()
    _local.precision = value
    try:
        yield value
    finally:
        _local.precision = previous


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class OpKind(enum.Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    NEG = "neg"
    RELU = "relu"
    SIGMOID = "sigmoid"
    EXP = "exp"
    LOG = "log"
    SQRT = "sqrt"
    MATMUL = "matmul"
    SUM = "sum"
    MEAN = "mean"
    RESHAPE = "reshape"
    TRANSPOSE = "transpose"
    EXPAND = "expand"
    CONCAT = "concat"
    INDEX = "index"
    CONV1D = "conv1d"
    CONV2D = "conv2d"
    MAXPOOL2D = "maxpool2d"
    AVGPOOL1D = "avgpool1d"
    ADAPTIVE_AVGPOOL1D = "adaptive_avgpool1d"
    LOG_SOFTMAX = "log_softmax"
    BCE_WITH_LOGITS = "bce_with_logits"

    def __repr__(self):
        return build_enum_repr(self)


@dataclasses.dataclass(eq=False)
class TapeNode:
    function: "Function"
    inputs: Tuple["Tensor", ...]

    @property
    def op(self) -> OpKind:
        return self.function.op


class Tensor:
    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        node: Optional[TapeNode] = None,
        name: Optional[str] = None,
    ):
        array = np.asarray(data)
        if array.dtype.kind != "f":
            array = array.astype(get_precision().dtype)
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.node = node
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.sequence = next(_sequence)

    def __repr__(self):
        name = f", name={self.name!r}" if self.name else ""
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype}{name})"

    ### PROPERTIES ###

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    ### CONVERSION ###

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    ### AUTODIFF ###

    def backward(self, gradient: Optional[np.ndarray] = None):
        """
        Accumulate d(self)/d(leaf) into the ``grad`` buffer of every leaf tensor that
        requires a gradient. Repeated calls accumulate.
        """
        if gradient is None:
            if self.size != 1:
                raise ShapeError(
                    f"backward needs a scalar loss, got shape {self.shape}"
                )
            gradient = np.ones(self.shape, dtype=self.dtype)
        gradient = np.asarray(gradient, dtype=self.dtype)
        if gradient.shape != self.shape:
            raise ShapeError(
                f"Gradient shape {gradient.shape} != tensor shape {self.shape}"
            )
        if not self.requires_grad:
            return
        ordered = self._reachable()
        grads = {id(self): gradient}
        for tensor in ordered:
            grad = grads.pop(id(tensor), None)
            if grad is None:
                continue
            if tensor.node is None:
                tensor._accumulate(grad)
                continue
            input_grads = tensor.node.function.backward(grad)
            for input_, input_grad in zip(tensor.node.inputs, input_grads):
                if input_grad is None or not input_.requires_grad:
                    continue
                key = id(input_)
                if key in grads:
                    grads[key] = grads[key] + input_grad
                else:
                    grads[key] = input_grad

    def _accumulate(self, grad: np.ndarray):
        grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def _reachable(self):
        seen, stack, found = set(), [self], []
        while stack:
            tensor = stack.pop()
            if id(tensor) in seen or not tensor.requires_grad:
                continue
            seen.add(id(tensor))
            found.append(tensor)
            if tensor.node is not None:
                stack.extend(tensor.node.inputs)
        # creation order is a valid topological order of the tape
        return sorted(found, key=lambda tensor: tensor.sequence, reverse=True)

    ### OPERATORS ###

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
        return matmul(self, other)

    def __getitem__(self, index):
        return Index.apply(self, index=index)

    ### METHODS ###

    def relu(self) -> "Tensor":
        return ReLU.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def expand(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Expand.apply(self, shape=shape)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else get_precision().dtype
    return Tensor(np.asarray(value, dtype=dtype))


class Function:
    """
    A differentiable primitive. ``forward`` receives arrays and keeps whatever context
    its ``backward`` needs on ``self``; ``backward`` returns one gradient (or None) per
    input.
    """

    op: ClassVar[OpKind]

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        like = next((x for x in inputs if isinstance(x, Tensor)), None)
        tensors = tuple(as_tensor(x, like=like) for x in inputs)
        function = cls()
        data = function.forward(*(tensor.data for tensor in tensors), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        node = TapeNode(function, tensors) if requires_grad else None
        return Tensor(data, requires_grad=requires_grad, node=node)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Sum ``grad`` down to ``shape``, undoing trailing-dimension broadcasting.
    """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: OpKind) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"Cannot {op.value} shapes {a.shape} and {b.shape}")


### ELEMENTWISE ###


class Add(Function):
    op = OpKind.ADD

    def forward(self, a, b):
        _broadcast_shape(a, b, self.op)
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    op = OpKind.SUB

    def forward(self, a, b):
        _broadcast_shape(a, b, self.op)
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    op = OpKind.MUL

    def forward(self, a, b):
        _broadcast_shape(a, b, self.op)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            unbroadcast(grad * self.b, self.a.shape),
            unbroadcast(grad * self.a, self.b.shape),
        )


class Div(Function):
    op = OpKind.DIV

    def forward(self, a, b):
        _broadcast_shape(a, b, self.op)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return (
            unbroadcast(grad / self.b, self.a.shape),
            unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape),
        )


class Neg(Function):
    op = OpKind.NEG

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class ReLU(Function):
    op = OpKind.RELU

    def forward(self, a):
        # subgradient 0 at the kink
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    op = OpKind.SIGMOID

    def forward(self, a):
        self.out = (0.5 * (1.0 + np.tanh(0.5 * a))).astype(a.dtype)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Exp(Function):
    op = OpKind.EXP

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    op = OpKind.LOG

    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Sqrt(Function):
    op = OpKind.SQRT

    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


_ELEMENTWISE = {
    OpKind.ADD: Add,
    OpKind.SUB: Sub,
    OpKind.MUL: Mul,
    OpKind.RELU: ReLU,
    OpKind.SIGMOID: Sigmoid,
    OpKind.EXP: Exp,
    OpKind.LOG: Log,
}

_BINARY = {OpKind.ADD, OpKind.SUB, OpKind.MUL}


def elementwise(kind: Union[OpKind, str], a, b=None) -> Tensor:
    if isinstance(kind, str):
        kind = OpKind(kind.lower())
    if kind not in _ELEMENTWISE:
        raise ValueError(f"Not an elementwise op: {kind!r}")
    if kind in _BINARY:
        if b is None:
            raise ShapeError(f"{kind.value} needs two operands")
        return _ELEMENTWISE[kind].apply(a, b)
    if b is not None:
        raise ShapeError(f"{kind.value} takes one operand")
    return _ELEMENTWISE[kind].apply(a)


def relu(a) -> Tensor:
    return ReLU.apply(a)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


### LINEAR ALGEBRA AND REDUCTIONS ###


class MatMul(Function):
    op = OpKind.MATMUL

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"Cannot matmul shapes {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Sum(Function):
    op = OpKind.SUM

    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Sum):
    op = OpKind.MEAN

    def forward(self, a, axis=None, keepdims=False):
        out = super().forward(a, axis=axis, keepdims=keepdims)
        self.count = int(np.prod([a.shape[axis] for axis in self.axes]))
        return np.asarray(out / self.count, dtype=a.dtype)

    def backward(self, grad):
        (full,) = super().backward(grad)
        return (full / self.count,)


### SHAPE ###


class Reshape(Function):
    op = OpKind.RESHAPE

    def forward(self, a, shape=()):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"Cannot reshape {a.shape} to {tuple(shape)}")

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    op = OpKind.TRANSPOSE

    def forward(self, a, axes=None):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
        return np.ascontiguousarray(a.transpose(self.axes))

    def backward(self, grad):
        return (grad.transpose(np.argsort(self.axes)),)


class Expand(Function):
    op = OpKind.EXPAND

    def forward(self, a, shape=()):
        self.shape = a.shape
        try:
            return np.broadcast_to(a, shape).copy()
        except ValueError:
            raise ShapeError(f"Cannot expand {a.shape} to {tuple(shape)}")

    def backward(self, grad):
        return (unbroadcast(grad, self.shape),)


class Concat(Function):
    op = OpKind.CONCAT

    def forward(self, *arrays, axis=0):
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError:
            shapes = [array.shape for array in arrays]
            raise ShapeError(f"Cannot concatenate shapes {shapes} along axis {axis}")
        self.axis = axis
        self.bounds = np.cumsum([array.shape[axis] for array in arrays])[:-1]
        return out

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for tensor in tensors:
        shape = list(tensor.shape)
        shape.insert(axis % (len(shape) + 1), 1)
        expanded.append(tensor.reshape(shape))
    return concat(expanded, axis=axis)


class Index(Function):
    op = OpKind.INDEX

    def forward(self, a, index=None):
        self.shape = a.shape
        self.index = index
        return np.asarray(a[index])

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(full, self.index, grad)
        return (full,)
