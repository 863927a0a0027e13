import numpy as np
import pytest

from pong.config import TcnMode
from pong.exceptions import ConfigurationError, ShapeError
from pong.gradcheck import grad_check
from pong.layers import (
    BatchNorm1d,
    BatchNorm2d,
    GroupConv,
    GroupPairConv,
    LayerNorm,
    Linear,
    Sequential,
    TaskContextNorm,
    cyclic_pairs,
    group_conv,
    group_pair_conv,
    tcn,
)
from pong.tensor import Tensor

#: random instances checked against each brute-force reference
INSTANCES = 200
#: random instances per symmetry property
SYMMETRY_INSTANCES = 100


def random_shape(rng, *extents):
    return tuple(int(rng.integers(low, high + 1)) for low, high in extents)


def randomize_affine(layer, rng):
    layer.gain.data = rng.normal(size=layer.gain.shape)
    layer.shift.data = rng.normal(size=layer.shift.shape)


def test_linear_matches_matmul(wide, rng):
    layer = Linear(5, 3, rng)
    x = rng.normal(size=(2, 4, 5))
    expected = x @ layer.weight.data + layer.bias.data
    np.testing.assert_allclose(layer(Tensor(x)).data, expected, atol=1e-12)
    with pytest.raises(ShapeError):
        layer(Tensor(np.ones((2, 4))))


@pytest.mark.parametrize("shape", [(6, 3), (4, 3, 7)])
def test_batchnorm1d_train_mode(wide, rng, shape):
    layer = BatchNorm1d(3)
    randomize_affine(layer, rng)
    x = rng.normal(loc=2.0, size=shape)
    expected = pytest.helpers.batchnorm_reference(
        x, layer.gain.data, layer.shift.data
    )
    np.testing.assert_allclose(layer(Tensor(x)).data, expected, atol=1e-6)


def test_batchnorm2d_train_mode(wide, rng):
    layer = BatchNorm2d(4)
    randomize_affine(layer, rng)
    x = rng.normal(size=(3, 4, 5, 5))
    expected = pytest.helpers.batchnorm_reference(
        x, layer.gain.data, layer.shift.data
    )
    np.testing.assert_allclose(layer(Tensor(x)).data, expected, atol=1e-6)


def test_batchnorm_running_statistics(wide, rng):
    layer = BatchNorm1d(2)
    x = rng.normal(loc=3.0, scale=2.0, size=(10, 2))
    layer(Tensor(x))
    np.testing.assert_allclose(layer.running_mean, 0.1 * x.mean(axis=0))
    unbiased = x.var(axis=0, ddof=1)
    np.testing.assert_allclose(layer.running_var, 0.9 + 0.1 * unbiased)
    layer.eval()
    probe = rng.normal(size=(1, 2))
    expected = (probe - layer.running_mean) / np.sqrt(layer.running_var + 1e-5)
    np.testing.assert_allclose(layer(Tensor(probe)).data, expected, atol=1e-12)


def test_batchnorm_train_mode_rejects_singleton_batch(wide):
    with pytest.raises(ShapeError):
        BatchNorm1d(3)(Tensor(np.ones((1, 3))))
    with pytest.raises(ConfigurationError):
        BatchNorm1d(3, momentum=1.5)


def test_layernorm(wide, rng):
    layer = LayerNorm(6)
    randomize_affine(layer, rng)
    x = rng.normal(size=(3, 2, 6))
    expected = pytest.helpers.layernorm_reference(x, layer.gain.data, layer.shift.data)
    np.testing.assert_allclose(layer(Tensor(x)).data, expected, atol=1e-6)
    with pytest.raises(ShapeError):
        LayerNorm(1)


def test_task_context_norm_across_groups(wide, rng):
    layer = TaskContextNorm(3)
    randomize_affine(layer, rng)
    x = rng.normal(size=(2, 4, 3, 5))
    expected = pytest.helpers.tcn_reference(x, layer.gain.data, layer.shift.data)
    np.testing.assert_allclose(tcn(Tensor(x), layer).data, expected, atol=1e-6)


def test_norms_match_references_on_random_instances(wide, rng):
    for _ in range(INSTANCES):
        batch, channels, length, height, groups = random_shape(
            rng, (2, 5), (1, 4), (1, 6), (1, 4), (2, 5)
        )
        cases = [
            (BatchNorm1d(channels), (batch, channels, length)),
            (BatchNorm2d(channels), (batch, channels, height, length)),
            (LayerNorm(length + 1), (batch, channels, length + 1)),
            (TaskContextNorm(channels), (batch, groups, channels, length)),
        ]
        references = [
            pytest.helpers.batchnorm_reference,
            pytest.helpers.batchnorm_reference,
            pytest.helpers.layernorm_reference,
            pytest.helpers.tcn_reference,
        ]
        for (layer, shape), reference in zip(cases, references):
            randomize_affine(layer, rng)
            x = rng.normal(loc=rng.normal(), size=shape)
            expected = reference(x, layer.gain.data, layer.shift.data)
            np.testing.assert_allclose(layer(Tensor(x)).data, expected, atol=1e-6)


def test_task_context_norm_within_group(wide, rng):
    layer = TaskContextNorm(3, mode=TcnMode.WITHIN_GROUP)
    x = rng.normal(size=(2, 4, 3, 5))
    out = layer(Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=3), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=3), 1.0, atol=1e-3)


def test_task_context_norm_ignores_uniform_affine(wide, rng):
    for _ in range(SYMMETRY_INSTANCES):
        shape = random_shape(rng, (1, 3), (2, 5), (1, 4), (1, 6))
        layer = TaskContextNorm(shape[2], eps=0.0)
        randomize_affine(layer, rng)
        x = rng.normal(size=shape)
        scale, offset = rng.uniform(0.5, 3.0), rng.uniform(-5.0, 5.0)
        base = layer(Tensor(x)).data
        moved = layer(Tensor(scale * x + offset)).data
        assert np.abs(moved - base).max() < 1e-5


def test_task_context_norm_needs_two_groups(wide):
    with pytest.raises(ShapeError):
        TaskContextNorm(3)(Tensor(np.ones((1, 1, 3, 2))))


def test_cyclic_pairs():
    assert cyclic_pairs(2) == [(0, 1)]
    assert cyclic_pairs(4) == [(0, 1), (1, 2), (2, 3), (3, 0)]


def affine_of(layer):
    if layer.tcn is None:
        return None
    return (layer.tcn.gain.data, layer.tcn.shift.data)


@pytest.mark.parametrize(
    "groups, kernel, stride, padding, use_tcn",
    [(3, 3, 1, 1, True), (4, 5, 2, 2, True), (2, 1, 1, 0, False), (1, 3, 1, 1, False)],
)
def test_group_conv_matches_reference(
    wide, rng, groups, kernel, stride, padding, use_tcn
):
    layer = GroupConv(2 * groups, 4, groups, kernel, rng, stride, padding, tcn=use_tcn)
    if use_tcn:
        randomize_affine(layer.tcn, rng)
    x = rng.normal(size=(2, 2 * groups, 11))
    expected = pytest.helpers.group_conv_reference(
        x,
        layer.conv.weight.data,
        layer.conv.bias.data,
        groups,
        stride,
        padding,
        tcn=affine_of(layer),
    )
    np.testing.assert_allclose(group_conv(Tensor(x), layer).data, expected, atol=1e-6)


@pytest.mark.parametrize("groups", [2, 3, 4])
def test_group_pair_conv_matches_reference(wide, rng, groups):
    layer = GroupPairConv(3 * groups, 5, groups, 3, rng, 1, 1)
    assert (layer.tcn is None) == (groups == 2)
    assert layer.members == len(cyclic_pairs(groups))
    x = rng.normal(size=(2, 3 * groups, 9))
    expected = pytest.helpers.group_pair_conv_reference(
        x,
        layer.conv.weight.data,
        layer.conv.bias.data,
        groups,
        1,
        1,
        tcn=affine_of(layer),
    )
    actual = group_pair_conv(Tensor(x), layer).data
    np.testing.assert_allclose(actual, expected, atol=1e-6)


def test_group_convs_match_references_on_random_instances(wide, rng):
    for _ in range(INSTANCES):
        batch, groups, pair_groups, width, out_channels = random_shape(
            rng, (1, 3), (1, 4), (2, 5), (1, 3), (1, 4)
        )
        kernel, stride = random_shape(rng, (1, 4), (1, 3))
        padding = int(rng.integers(0, kernel))
        length = int(rng.integers(kernel, kernel + 9))
        use_tcn = groups > 1 and bool(rng.integers(2))
        layers = [
            GroupConv(
                groups * width,
                out_channels,
                groups,
                kernel,
                rng,
                stride,
                padding,
                tcn=use_tcn,
            ),
            GroupPairConv(
                pair_groups * width,
                out_channels,
                pair_groups,
                kernel,
                rng,
                stride,
                padding,
            ),
        ]
        references = [
            pytest.helpers.group_conv_reference,
            pytest.helpers.group_pair_conv_reference,
        ]
        for layer, reference in zip(layers, references):
            if layer.tcn is not None:
                randomize_affine(layer.tcn, rng)
            x = rng.normal(size=(batch, layer.in_channels, length))
            expected = reference(
                x,
                layer.conv.weight.data,
                layer.conv.bias.data,
                layer.groups,
                stride,
                padding,
                tcn=affine_of(layer),
            )
            np.testing.assert_allclose(layer(Tensor(x)).data, expected, atol=1e-6)


def test_group_pair_conv_keeps_within_group_norm_for_two_groups(rng):
    layer = GroupPairConv(4, 2, 2, 3, rng, tcn_mode=TcnMode.WITHIN_GROUP)
    assert layer.tcn is not None


def permute_groups(x, order, groups):
    width = x.shape[1] // groups
    blocks = [x[:, g * width : (g + 1) * width] for g in order]
    return np.concatenate(blocks, axis=1)


def test_group_conv_is_invariant_to_group_order(wide, rng):
    for _ in range(SYMMETRY_INSTANCES):
        groups, width, length = random_shape(rng, (2, 5), (1, 3), (3, 9))
        layer = GroupConv(groups * width, 4, groups, 3, rng, padding=1)
        randomize_affine(layer.tcn, rng)
        x = rng.normal(size=(2, groups * width, length))
        shuffled = permute_groups(x, rng.permutation(groups), groups)
        base, moved = layer(Tensor(x)).data, layer(Tensor(shuffled)).data
        assert np.abs(moved - base).max() < 1e-5


def test_group_pair_conv_is_invariant_to_cyclic_rotation(wide, rng):
    for _ in range(SYMMETRY_INSTANCES):
        groups, width, length = random_shape(rng, (3, 6), (1, 3), (3, 9))
        layer = GroupPairConv(groups * width, 4, groups, 3, rng, padding=1)
        randomize_affine(layer.tcn, rng)
        x = rng.normal(size=(2, groups * width, length))
        shift = int(rng.integers(1, groups))
        order = [(g + shift) % groups for g in range(groups)]
        rotated = permute_groups(x, order, groups)
        base, moved = layer(Tensor(x)).data, layer(Tensor(rotated)).data
        assert np.abs(moved - base).max() < 1e-5


@pytest.mark.parametrize("groups", [1, 2, 3, 5])
def test_identical_groups_without_tcn_repeat_one_convolution(wide, rng, groups):
    layer = GroupConv(3 * groups, 4, groups, 3, rng, padding=1, tcn=False)
    one = rng.normal(size=(2, 3, 8))
    x = np.concatenate([one] * groups, axis=1)
    expected = groups * layer.conv(Tensor(one)).data
    np.testing.assert_allclose(group_conv(Tensor(x), layer).data, expected, atol=1e-10)


def test_identical_groups_with_tcn_collapse_to_the_shift(wide, rng):
    layer = GroupConv(9, 4, 3, 3, rng, padding=1)
    randomize_affine(layer.tcn, rng)
    x = np.concatenate([rng.normal(size=(2, 3, 8))] * 3, axis=1)
    out = group_conv(Tensor(x), layer).data
    expected = np.broadcast_to(3 * layer.tcn.shift.data[None, :, None], out.shape)
    np.testing.assert_allclose(out, expected, atol=1e-10)


def test_group_conv_rejects_bad_channels(rng):
    with pytest.raises(ConfigurationError):
        GroupConv(10, 4, 3, 3, rng)
    with pytest.raises(ConfigurationError):
        GroupPairConv(4, 4, 1, 3, rng)
    with pytest.raises(ShapeError):
        GroupConv(6, 4, 3, 3, rng, padding=1)(Tensor(np.ones((1, 4, 5))))


def test_group_conv_gradients(wide, rng):
    layer = GroupPairConv(6, 2, 3, 3, rng, padding=1)
    probe = rng.normal(size=(2, 2, 5))
    x = Tensor(rng.normal(size=(2, 6, 5)), requires_grad=True)
    assert grad_check(lambda x: (layer(x) * probe).sum(), x) < 1e-6


def test_state_round_trip(rng):
    first = Sequential(Linear(4, 3, rng), BatchNorm1d(3), LayerNorm(3))
    first(Tensor(rng.normal(size=(5, 4))))
    second = Sequential(Linear(4, 3, rng), BatchNorm1d(3), LayerNorm(3))
    table = {name: array for name, (_, array) in first.state().items()}
    second.load_state(table)
    for name, (kind, array) in second.state().items():
        assert kind == first.state()[name][0]
        np.testing.assert_array_equal(array, table[name])
    assert [name for name in first.state()] == [
        "layers.0.weight",
        "layers.0.bias",
        "layers.1.gain",
        "layers.1.shift",
        "layers.2.gain",
        "layers.2.shift",
        "layers.1.running_mean",
        "layers.1.running_var",
    ]


def test_load_state_rejects_missing_and_misshapen(rng):
    layer = Linear(4, 3, rng)
    with pytest.raises(ShapeError):
        layer.load_state({"weight": np.zeros((4, 3))})
    with pytest.raises(ShapeError):
        layer.load_state({"weight": np.zeros((3, 4)), "bias": np.zeros(3)})


def test_to_changes_precision(rng):
    layer = BatchNorm1d(3)
    assert layer.gain.dtype == np.float32
    layer.to("wide")
    assert layer.gain.dtype == np.float64
    assert layer.running_mean.dtype == np.float64
