"""
Layer vocabulary of the panel encoder and reasoner.

Layers are :class:`Module` objects holding :class:`Parameter` tensors (and, for
BatchNorm, running-statistic buffers). Parameters are discovered by walking attributes
in assignment order, which fixes the order used by checkpoints and optimizers.
"""

import enum
import math
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import functional
from .config import TcnMode
from .exceptions import ConfigurationError, ShapeError
from .tensor import Precision, Tensor, concat, get_precision
from .utils import build_enum_repr

BATCHNORM_MOMENTUM = 0.1
NORM_EPSILON = 1e-5
POSITION_STD = 0.02


class Parameter(Tensor):
    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


def uniform_parameter(rng: np.random.Generator, shape, fan_in: int) -> Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(get_precision().dtype)
    return Parameter(data)


def constant_parameter(shape, value: float) -> Parameter:
    return Parameter(np.full(shape, value, dtype=get_precision().dtype))


class Module:
    #: attribute names holding numpy running statistics
    buffer_names: Tuple[str, ...] = ()

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    ### TRAVERSAL ###

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{index}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [parameter for _, parameter in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(prefix=f"{prefix}{name}.")

    def state(self) -> Dict[str, Tuple[str, np.ndarray]]:
        """
        Ordered ``name -> (kind, array)`` table of parameters then buffers.
        """
        table = {name: ("param", p.data) for name, p in self.named_parameters()}
        table.update({name: ("buffer", array) for name, array in self.named_buffers()})
        return table

    def load_state(self, table: Dict[str, np.ndarray]):
        for name, parameter in self.named_parameters():
            parameter.data = self._checked(name, table, parameter.data)
        for module_prefix, module in self._named_modules():
            for name in module.buffer_names:
                key = module_prefix + name
                setattr(module, name, self._checked(key, table, getattr(module, name)))

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self.named_children():
            yield from child._named_modules(prefix=f"{prefix}{name}.")

    @staticmethod
    def _checked(name, table, current):
        if name not in table:
            raise ShapeError(f"Missing tensor {name!r}")
        value = np.asarray(table[name])
        if value.shape != current.shape:
            raise ShapeError(f"Tensor {name!r}: shape {value.shape} != {current.shape}")
        return value.astype(current.dtype)

    ### MODES ###

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, value: Union[Precision, str]) -> "Module":
        if isinstance(value, str):
            value = Precision[value.upper()]
        for parameter in self.parameters():
            parameter.data = parameter.data.astype(value.dtype)
            parameter.grad = None
        for module in self.modules():
            for name in module.buffer_names:
                setattr(module, name, getattr(module, name).astype(value.dtype))
        return self

    def zero_grad(self):
        for parameter in self.parameters():
            parameter.grad = None


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def __len__(self):
        return len(self.layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ReLU(Module):
    def forward(self, x):
        return x.relu()


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = uniform_parameter(rng, (in_features, out_features), in_features)
        self.bias = None
        if bias:
            self.bias = uniform_parameter(rng, (out_features,), in_features)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(
                f"Linear expects {self.in_features} features, got {x.shape}"
            )
        leading = x.shape[:-1]
        out = x.reshape(-1, self.in_features) @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(leading + (self.out_features,))


class Conv1d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size
        shape = (out_channels, in_channels, kernel_size)
        self.weight = uniform_parameter(rng, shape, fan_in)
        self.bias = uniform_parameter(rng, (out_channels,), fan_in) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"Conv1d expects {self.in_channels} channels, got {x.shape}"
            )
        return functional.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = uniform_parameter(rng, shape, fan_in)
        self.bias = uniform_parameter(rng, (out_channels,), fan_in) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"Conv2d expects {self.in_channels} channels, got {x.shape}"
            )
        return functional.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class MaxPool2d(Module):
    def __init__(self, kernel_size: int, stride: int, padding: int = 0):
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding

    def forward(self, x):
        return functional.maxpool2d(x, self.kernel_size, self.stride, self.padding)


class AvgPool1d(Module):
    def __init__(self, kernel_size: int, stride: int, padding: int = 0):
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding

    def forward(self, x):
        return functional.avgpool1d(x, self.kernel_size, self.stride, self.padding)


class AdaptiveAvgPool1d(Module):
    def __init__(self, target: int):
        if target <= 0:
            raise ShapeError(f"Adaptive pooling target must be positive, got {target}")
        self.target = target

    def forward(self, x):
        return functional.adaptive_avgpool1d(x, self.target)


class NormAxis(enum.Enum):
    ONE_D = 1
    TWO_D = 2

    def __repr__(self):
        return build_enum_repr(self)


class BatchNorm(Module):
    """
    Per-channel batch normalization over ``(B, C)``, ``(B, C, D)`` or ``(B, C, H, W)``.
    """

    buffer_names = ("running_mean", "running_var")

    def __init__(
        self,
        num_features: int,
        axis: NormAxis = NormAxis.ONE_D,
        eps: float = NORM_EPSILON,
        momentum: float = BATCHNORM_MOMENTUM,
    ):
        if not 0.0 < momentum < 1.0:
            raise ConfigurationError(f"momentum must be in (0, 1), got {momentum}")
        self.num_features = num_features
        self.axis = axis
        self.eps = eps
        self.momentum = momentum
        self.gain = constant_parameter((num_features,), 1.0)
        self.shift = constant_parameter((num_features,), 0.0)
        dtype = get_precision().dtype
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        expected = (2, 3) if self.axis is NormAxis.ONE_D else (4,)
        if x.ndim not in expected or x.shape[1] != self.num_features:
            raise ShapeError(
                f"BatchNorm({self.num_features}, {self.axis}) got {x.shape}"
            )
        axes = (0,) + tuple(range(2, x.ndim))
        view = (1, -1) + (1,) * (x.ndim - 2)
        gain, shift = self.gain.reshape(view), self.shift.reshape(view)
        if not self.training:
            mean = self.running_mean.reshape(view).astype(x.dtype)
            variance = self.running_var.reshape(view).astype(x.dtype)
            scale = 1.0 / np.sqrt(variance + self.eps)
            return (x - mean) * scale * gain + shift
        if x.shape[0] < 2:
            raise ShapeError("BatchNorm in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        out = centered / (var + self.eps).sqrt() * gain + shift
        count = x.size // self.num_features
        batch_mean = mean.data.reshape(-1)
        batch_var = var.data.reshape(-1) * count / (count - 1)
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * batch_mean).astype(
            self.running_mean.dtype
        )
        self.running_var = ((1 - m) * self.running_var + m * batch_var).astype(
            self.running_var.dtype
        )
        return out


def BatchNorm1d(num_features: int, **kwargs) -> BatchNorm:
    return BatchNorm(num_features, axis=NormAxis.ONE_D, **kwargs)


def BatchNorm2d(num_features: int, **kwargs) -> BatchNorm:
    return BatchNorm(num_features, axis=NormAxis.TWO_D, **kwargs)


class LayerNorm(Module):
    def __init__(self, num_features: int, eps: float = NORM_EPSILON):
        if num_features < 2:
            raise ShapeError(f"LayerNorm needs at least 2 features, got {num_features}")
        self.num_features = num_features
        self.eps = eps
        self.gain = constant_parameter((num_features,), 1.0)
        self.shift = constant_parameter((num_features,), 0.0)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.num_features:
            raise ShapeError(f"LayerNorm({self.num_features}) got {x.shape}")
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / (var + self.eps).sqrt() * self.gain + self.shift


class TaskContextNorm(Module):
    """
    Normalize a set of group outputs ``(B, G, C, D)`` against each other.

    Across groups, every ``(b, c, d)`` coordinate is z-scored over the G group values,
    keeping only relative differences between groups. Within a group, each group's
    channel row is z-scored over its own feature axis. The learned affine is per channel
    and shared by groups.
    """

    def __init__(
        self,
        channels: int,
        mode: TcnMode = TcnMode.ACROSS_GROUPS,
        eps: float = NORM_EPSILON,
    ):
        self.channels = channels
        self.mode = mode
        self.eps = eps
        self.gain = constant_parameter((channels,), 1.0)
        self.shift = constant_parameter((channels,), 0.0)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[2] != self.channels:
            raise ShapeError(f"TaskContextNorm({self.channels}) got {x.shape}")
        if self.mode is TcnMode.ACROSS_GROUPS:
            if x.shape[1] < 2:
                raise ShapeError(
                    "TaskContextNorm across groups needs at least 2 groups"
                )
            axis = 1
        else:
            axis = 3
        mean = x.mean(axis=axis, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axis, keepdims=True)
        view = (1, 1, self.channels, 1)
        normalized = centered / (var + self.eps).sqrt()
        return normalized * self.gain.reshape(view) + self.shift.reshape(view)


class GroupConv(Module):
    """
    Shared-weight convolution over contiguous channel groups, summed over groups.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        groups: int,
        kernel_size: int,
        rng,
        stride: int = 1,
        padding: int = 0,
        tcn: bool = True,
        tcn_mode: TcnMode = TcnMode.ACROSS_GROUPS,
    ):
        if groups < 1 or in_channels % groups:
            raise ConfigurationError(
                f"{in_channels} channels not divisible into {groups} groups"
            )
        self.in_channels = in_channels
        self.groups = groups
        self.group_width = in_channels // groups
        self.conv = Conv1d(
            self.conv_in_channels, out_channels, kernel_size, rng, stride, padding
        )
        self.tcn = TaskContextNorm(out_channels, tcn_mode) if tcn else None

    @property
    def conv_in_channels(self) -> int:
        return self.in_channels // self.groups

    @property
    def members(self) -> int:
        return self.groups

    def gather(self, grouped: Tensor) -> Tensor:
        return grouped

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"{type(self).__name__} expects {self.in_channels} channels, "
                f"got {x.shape}"
            )
        batch, _, length = x.shape
        grouped = self.gather(x.reshape(batch, self.groups, self.group_width, length))
        members, width = self.members, grouped.shape[2]
        out = self.conv(grouped.reshape(batch * members, width, length))
        out = out.reshape(batch, members, out.shape[1], out.shape[2])
        if self.tcn is not None:
            out = self.tcn(out)
        return out.sum(axis=1)


def cyclic_pairs(groups: int) -> List[Tuple[int, int]]:
    if groups == 2:
        return [(0, 1)]
    return [(i, (i + 1) % groups) for i in range(groups)]


class GroupPairConv(GroupConv):
    """
    Shared-weight convolution over cyclic pairs of channel groups, summed over pairs.
    """

    def __init__(
        self, in_channels: int, out_channels: int, groups: int, *args, **kwargs
    ):
        if groups < 2:
            raise ConfigurationError(
                f"Group pairs need at least 2 groups, got {groups}"
            )
        self.pairs = cyclic_pairs(groups)
        if len(self.pairs) < 2 and kwargs.get("tcn", True):
            # a single pair has no context to normalize against
            kwargs["tcn"] = kwargs.get("tcn_mode") is TcnMode.WITHIN_GROUP
        super().__init__(in_channels, out_channels, groups, *args, **kwargs)

    @property
    def conv_in_channels(self) -> int:
        return 2 * (self.in_channels // self.groups)

    @property
    def members(self) -> int:
        return len(self.pairs)

    def gather(self, grouped: Tensor) -> Tensor:
        firsts = [first for first, _ in self.pairs]
        seconds = [second for _, second in self.pairs]
        return concat(
            [grouped[:, firsts], grouped[:, seconds]],
            axis=2,
        )


def group_conv(x: Tensor, layer: GroupConv) -> Tensor:
    return layer(x)


def group_pair_conv(x: Tensor, layer: GroupPairConv) -> Tensor:
    return layer(x)


def tcn(group_outputs: Tensor, layer: TaskContextNorm) -> Tensor:
    return layer(group_outputs)
