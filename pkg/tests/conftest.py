import math

import numpy as np
import pytest

from pong.config import ModelConfig
from pong.tensor import Precision, precision

#: smallest encoder whose embedding still survives both reasoner bottlenecks
TINY_CONFIG = dict(
    image_size=16,
    channels=8,
    position_dim=520,
    latent_dim=16,
    group_conv_groups=4,
    group_pair_groups=4,
)


@pytest.fixture
def wide():
    with precision(Precision.WIDE):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.helpers.register
def tiny_config(**kwargs):
    return ModelConfig(**{**TINY_CONFIG, **kwargs})


@pytest.helpers.register
def random_panels(config, batch, seed=0):
    rng = np.random.default_rng(seed)
    size = config.image_size
    return rng.uniform(0.0, 1.0, size=(batch, config.panels, size, size))


@pytest.helpers.register
def matmul_reference(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


@pytest.helpers.register
def conv1d_reference(x, weight, bias=None, stride=1, padding=0):
    batch, channels, length = x.shape
    out_channels, _, kernel = weight.shape
    xp = np.zeros((batch, channels, length + 2 * padding))
    xp[:, :, padding : padding + length] = x
    out_length = (length + 2 * padding - kernel) // stride + 1
    out = np.zeros((batch, out_channels, out_length))
    for b in range(batch):
        for o in range(out_channels):
            for t in range(out_length):
                total = 0.0 if bias is None else bias[o]
                for c in range(channels):
                    for k in range(kernel):
                        total += xp[b, c, t * stride + k] * weight[o, c, k]
                out[b, o, t] = total
    return out


@pytest.helpers.register
def conv2d_reference(x, weight, bias=None, stride=1, padding=0):
    batch, channels, height, width = x.shape
    out_channels, _, kernel, _ = weight.shape
    xp = np.zeros((batch, channels, height + 2 * padding, width + 2 * padding))
    xp[:, :, padding : padding + height, padding : padding + width] = x
    out_h = (height + 2 * padding - kernel) // stride + 1
    out_w = (width + 2 * padding - kernel) // stride + 1
    out = np.zeros((batch, out_channels, out_h, out_w))
    for b in range(batch):
        for o in range(out_channels):
            for i in range(out_h):
                for j in range(out_w):
                    top, left = i * stride, j * stride
                    patch = xp[b, :, top : top + kernel, left : left + kernel]
                    offset = 0.0 if bias is None else bias[o]
                    out[b, o, i, j] = (patch * weight[o]).sum() + offset
    return out


@pytest.helpers.register
def maxpool2d_reference(x, kernel, stride, padding=0):
    batch, channels, height, width = x.shape
    out_h = (height + 2 * padding - kernel) // stride + 1
    out_w = (width + 2 * padding - kernel) // stride + 1
    out = np.zeros((batch, channels, out_h, out_w))
    for b in range(batch):
        for c in range(channels):
            for i in range(out_h):
                for j in range(out_w):
                    best = -math.inf
                    for di in range(kernel):
                        for dj in range(kernel):
                            y = i * stride + di - padding
                            z = j * stride + dj - padding
                            if 0 <= y < height and 0 <= z < width:
                                best = max(best, x[b, c, y, z])
                    out[b, c, i, j] = best
    return out


@pytest.helpers.register
def avgpool1d_reference(x, kernel, stride, padding=0):
    batch, channels, length = x.shape
    out_length = (length + 2 * padding - kernel) // stride + 1
    out = np.zeros((batch, channels, out_length))
    for t in range(out_length):
        total = np.zeros((batch, channels))
        for k in range(kernel):
            position = t * stride + k - padding
            if 0 <= position < length:
                total += x[:, :, position]
        out[:, :, t] = total / kernel
    return out


@pytest.helpers.register
def adaptive_avgpool1d_reference(x, target):
    length = x.shape[2]
    columns = []
    for i in range(target):
        start = (i * length) // target
        stop = -((-(i + 1) * length) // target)
        columns.append(x[:, :, start:stop].mean(axis=2))
    return np.stack(columns, axis=2)


@pytest.helpers.register
def batchnorm_reference(x, gain, shift, eps=1e-5):
    out = np.empty_like(x, dtype=np.float64)
    for c in range(x.shape[1]):
        values = x[:, c]
        mean = values.mean()
        var = ((values - mean) ** 2).mean()
        out[:, c] = (values - mean) / math.sqrt(var + eps) * gain[c] + shift[c]
    return out


@pytest.helpers.register
def layernorm_reference(x, gain, shift, eps=1e-5):
    flat = x.reshape(-1, x.shape[-1])
    out = np.empty_like(flat, dtype=np.float64)
    for row in range(len(flat)):
        mean = flat[row].mean()
        var = ((flat[row] - mean) ** 2).mean()
        out[row] = (flat[row] - mean) / math.sqrt(var + eps) * gain + shift
    return out.reshape(x.shape)


@pytest.helpers.register
def tcn_reference(x, gain, shift, eps=1e-5):
    "z-score each (b, c, d) coordinate across the group axis"
    batch, groups, channels, length = x.shape
    out = np.empty_like(x, dtype=np.float64)
    for b in range(batch):
        for c in range(channels):
            for d in range(length):
                values = x[b, :, c, d]
                mean = values.mean()
                std = math.sqrt(((values - mean) ** 2).mean() + eps)
                out[b, :, c, d] = (values - mean) / std * gain[c] + shift[c]
    return out


@pytest.helpers.register
def group_conv_reference(x, weight, bias, groups, stride=1, padding=0, tcn=None):
    """
    Shared convolution of each contiguous channel group, optionally normalized across
    groups, summed over groups.
    """
    width = x.shape[1] // groups
    outputs = [
        pytest.helpers.conv1d_reference(
            x[:, g * width : (g + 1) * width], weight, bias, stride, padding
        )
        for g in range(groups)
    ]
    stacked = np.stack(outputs, axis=1)
    if tcn is not None:
        stacked = pytest.helpers.tcn_reference(stacked, *tcn)
    return stacked.sum(axis=1)


@pytest.helpers.register
def group_pair_conv_reference(x, weight, bias, groups, stride=1, padding=0, tcn=None):
    width = x.shape[1] // groups
    pairs = [(0, 1)] if groups == 2 else [(i, (i + 1) % groups) for i in range(groups)]
    outputs = []
    for first, second in pairs:
        joined = np.concatenate(
            [
                x[:, first * width : (first + 1) * width],
                x[:, second * width : (second + 1) * width],
            ],
            axis=1,
        )
        outputs.append(
            pytest.helpers.conv1d_reference(joined, weight, bias, stride, padding)
        )
    stacked = np.stack(outputs, axis=1)
    if tcn is not None:
        stacked = pytest.helpers.tcn_reference(stacked, *tcn)
    return stacked.sum(axis=1)
