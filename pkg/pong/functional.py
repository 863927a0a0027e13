"""
Convolution, pooling and loss primitives.

Convolutions gather strided windows with ``sliding_window_view`` and contract them with
``tensordot``. Work is split along the batch axis into fixed-size chunks that are always
visited in order, so results do not depend on how large the batch is.
"""

import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ShapeError
from .tensor import Function, OpKind, Tensor

#: upper bound on window-buffer elements materialized per chunk
CHUNK_ELEMENTS = 1 << 24


def output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def _chunks(batch: int, per_sample: int):
    size = max(1, CHUNK_ELEMENTS // max(1, per_sample))
    for start in range(0, batch, size):
        yield slice(start, min(batch, start + size))


def _check_geometry(length: int, kernel: int, stride: int, padding: int, name: str):
    if kernel < 1 or stride < 1 or padding < 0:
        raise ShapeError(
            f"{name}: invalid kernel={kernel} stride={stride} pad={padding}"
        )
    if output_length(length, kernel, stride, padding) < 1:
        raise ShapeError(f"{name}: input length {length} too short for kernel {kernel}")


class Conv1d(Function):
    op = OpKind.CONV1D

    def forward(self, x, weight, stride=1, padding=0):
        if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
            raise ShapeError(
                f"conv1d: input {x.shape} does not match weight {weight.shape}"
            )
        batch, _, length = x.shape
        kernel = weight.shape[2]
        _check_geometry(length, kernel, stride, padding, "conv1d")
        self.stride, self.padding, self.length = stride, padding, length
        self.xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
        self.weight = weight
        out_length = output_length(length, kernel, stride, padding)
        out = np.empty((batch, weight.shape[0], out_length), dtype=x.dtype)
        for chunk in _chunks(batch, x.shape[1] * out_length * kernel):
            windows = self._windows(chunk)
            out[chunk] = np.tensordot(windows, weight, axes=([1, 3], [1, 2])).transpose(
                0, 2, 1
            )
        return out

    def _windows(self, chunk):
        kernel = self.weight.shape[2]
        # (B, C, D', K)
        return sliding_window_view(self.xp[chunk], kernel, axis=2)[:, :, :: self.stride]

    def backward(self, grad):
        kernel = self.weight.shape[2]
        out_length = grad.shape[2]
        span = self.stride * (out_length - 1) + 1
        grad_weight = np.zeros_like(self.weight)
        grad_xp = np.zeros_like(self.xp)
        for chunk in _chunks(grad.shape[0], self.xp.shape[1] * out_length * kernel):
            windows = self._windows(chunk)
            grad_weight += np.tensordot(grad[chunk], windows, axes=([0, 2], [0, 2]))
            grad_windows = np.tensordot(grad[chunk], self.weight, axes=([1], [0]))
            grad_windows = grad_windows.transpose(0, 2, 1, 3)
            for k in range(kernel):
                grad_xp[chunk, :, k : k + span : self.stride] += grad_windows[..., k]
        grad_x = grad_xp[:, :, self.padding : self.padding + self.length]
        return grad_x, grad_weight


class Conv2d(Function):
    op = OpKind.CONV2D

    def forward(self, x, weight, stride=1, padding=0):
        if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
            raise ShapeError(
                f"conv2d: input {x.shape} does not match weight {weight.shape}"
            )
        batch, _, height, width = x.shape
        kernel_h, kernel_w = weight.shape[2:]
        _check_geometry(height, kernel_h, stride, padding, "conv2d")
        _check_geometry(width, kernel_w, stride, padding, "conv2d")
        self.stride, self.padding, self.size = stride, padding, (height, width)
        pad = (padding, padding)
        self.xp = np.pad(x, ((0, 0), (0, 0), pad, pad))
        self.weight = weight
        out_h = output_length(height, kernel_h, stride, padding)
        out_w = output_length(width, kernel_w, stride, padding)
        out = np.empty((batch, weight.shape[0], out_h, out_w), dtype=x.dtype)
        per_sample = x.shape[1] * out_h * out_w * kernel_h * kernel_w
        for chunk in _chunks(batch, per_sample):
            windows = self._windows(chunk)
            out[chunk] = np.tensordot(
                windows, weight, axes=([1, 4, 5], [1, 2, 3])
            ).transpose(0, 3, 1, 2)
        return out

    def _windows(self, chunk):
        kernel = self.weight.shape[2:]
        # (B, C, H', W', KH, KW)
        windows = sliding_window_view(self.xp[chunk], kernel, axis=(2, 3))
        return windows[:, :, :: self.stride, :: self.stride]

    def backward(self, grad):
        kernel_h, kernel_w = self.weight.shape[2:]
        out_h, out_w = grad.shape[2:]
        span_h = self.stride * (out_h - 1) + 1
        span_w = self.stride * (out_w - 1) + 1
        grad_weight = np.zeros_like(self.weight)
        grad_xp = np.zeros_like(self.xp)
        per_sample = self.xp.shape[1] * out_h * out_w * kernel_h * kernel_w
        for chunk in _chunks(grad.shape[0], per_sample):
            windows = self._windows(chunk)
            grad_weight += np.tensordot(
                grad[chunk], windows, axes=([0, 2, 3], [0, 2, 3])
            )
            grad_windows = np.tensordot(grad[chunk], self.weight, axes=([1], [0]))
            grad_windows = grad_windows.transpose(0, 3, 1, 2, 4, 5)
            for i in range(kernel_h):
                for j in range(kernel_w):
                    rows = slice(i, i + span_h, self.stride)
                    columns = slice(j, j + span_w, self.stride)
                    grad_xp[chunk, :, rows, columns] += grad_windows[..., i, j]
        height, width = self.size
        p = self.padding
        return grad_xp[:, :, p : p + height, p : p + width], grad_weight


class MaxPool2d(Function):
    op = OpKind.MAXPOOL2D

    def forward(self, x, kernel=2, stride=2, padding=0):
        if x.ndim != 4:
            raise ShapeError(f"maxpool2d expects (B, C, H, W), got {x.shape}")
        if padding >= kernel:
            raise ShapeError(f"maxpool2d: padding {padding} must be < kernel {kernel}")
        _check_geometry(x.shape[2], kernel, stride, padding, "maxpool2d")
        _check_geometry(x.shape[3], kernel, stride, padding, "maxpool2d")
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.size = x.shape[2:]
        pad = (padding, padding)
        xp = np.pad(x, ((0, 0), (0, 0), pad, pad), constant_values=-np.inf)
        self.padded_shape = xp.shape
        windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride]
        flat = windows.reshape(windows.shape[:4] + (kernel * kernel,))
        # ties resolve to the first index in row-major window order
        self.winner = flat.argmax(axis=-1)
        return np.take_along_axis(flat, self.winner[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        out_h, out_w = grad.shape[2:]
        span_h = self.stride * (out_h - 1) + 1
        span_w = self.stride * (out_w - 1) + 1
        grad_xp = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(self.kernel):
            for j in range(self.kernel):
                mask = self.winner == i * self.kernel + j
                grad_xp[
                    :, :, i : i + span_h : self.stride, j : j + span_w : self.stride
                ] += grad * mask
        height, width = self.size
        p = self.padding
        return (grad_xp[:, :, p : p + height, p : p + width],)


class AvgPool1d(Function):
    op = OpKind.AVGPOOL1D

    def forward(self, x, kernel=2, stride=2, padding=0):
        if x.ndim != 3:
            raise ShapeError(f"avgpool1d expects (B, C, D), got {x.shape}")
        _check_geometry(x.shape[2], kernel, stride, padding, "avgpool1d")
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.length = x.shape[2]
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
        self.padded_shape = xp.shape
        windows = sliding_window_view(xp, kernel, axis=2)[:, :, ::stride]
        # zero padding counts toward the divisor
        return windows.sum(axis=-1) / kernel

    def backward(self, grad):
        span = self.stride * (grad.shape[2] - 1) + 1
        grad_xp = np.zeros(self.padded_shape, dtype=grad.dtype)
        share = grad / self.kernel
        for k in range(self.kernel):
            grad_xp[:, :, k : k + span : self.stride] += share
        p = self.padding
        return (grad_xp[:, :, p : p + self.length],)


def adaptive_windows(length: int, target: int):
    return [
        (math.floor(i * length / target), math.ceil((i + 1) * length / target))
        for i in range(target)
    ]


class AdaptiveAvgPool1d(Function):
    op = OpKind.ADAPTIVE_AVGPOOL1D

    def forward(self, x, target=1):
        if target <= 0:
            raise ShapeError(
                f"adaptive_avgpool1d: target length must be positive, got {target}"
            )
        if x.ndim != 3 or target > x.shape[2]:
            raise ShapeError(f"adaptive_avgpool1d: cannot pool {x.shape} to {target}")
        self.shape = x.shape
        self.windows = adaptive_windows(x.shape[2], target)
        return np.stack(
            [x[:, :, start:stop].mean(axis=2) for start, stop in self.windows], axis=2
        )

    def backward(self, grad):
        grad_x = np.zeros(self.shape, dtype=grad.dtype)
        for i, (start, stop) in enumerate(self.windows):
            grad_x[:, :, start:stop] += grad[:, :, i : i + 1] / (stop - start)
        return (grad_x,)


class LogSoftmax(Function):
    op = OpKind.LOG_SOFTMAX

    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.probabilities = np.exp(out)
        return out

    def backward(self, grad):
        total = grad.sum(axis=self.axis, keepdims=True)
        return (grad - self.probabilities * total,)


class BCEWithLogits(Function):
    """
    Elementwise binary cross-entropy of ``sigmoid(logits)`` against fixed targets.
    """

    op = OpKind.BCE_WITH_LOGITS

    def forward(self, logits, targets):
        if logits.shape != targets.shape:
            raise ShapeError(f"bce: logits {logits.shape} vs targets {targets.shape}")
        self.logits, self.targets = logits, targets
        return (
            np.maximum(logits, 0)
            - logits * targets
            + np.log1p(np.exp(-np.abs(logits)))
        )

    def backward(self, grad):
        probabilities = 0.5 * (1.0 + np.tanh(0.5 * self.logits))
        return grad * (probabilities - self.targets), None


def conv1d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0
) -> Tensor:
    out = Conv1d.apply(x, weight, stride=stride, padding=padding)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1)
    return out


def conv2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0
) -> Tensor:
    out = Conv2d.apply(x, weight, stride=stride, padding=padding)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    return MaxPool2d.apply(x, kernel=kernel, stride=stride, padding=padding)


def avgpool1d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    return AvgPool1d.apply(x, kernel=kernel, stride=stride, padding=padding)


def adaptive_avgpool1d(x: Tensor, target: int) -> Tensor:
    return AdaptiveAvgPool1d.apply(x, target=target)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(x, axis=axis).exp()


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    return BCEWithLogits.apply(logits, targets)
