import numpy as np
import pytest

from pong.checkpoint import (
    MANIFEST,
    PAYLOAD,
    format_shape,
    load_checkpoint,
    parse_shape,
    save_checkpoint,
)
from pong.exceptions import ArtifactError
from pong.model import PoNG
from pong.tensor import no_grad


@pytest.fixture
def trained_model():
    config = pytest.helpers.tiny_config(geometry="a2x2", tcn_mode="within_group")
    model = PoNG(config, seed=5)
    # move the running statistics off their initial values
    model(pytest.helpers.random_panels(config, batch=3))
    return model


@pytest.mark.parametrize("shape", [(), (3,), (2, 5, 7)])
def test_shape_text(shape):
    assert parse_shape(format_shape(shape)) == shape


def test_round_trip_is_exact(tmp_path, trained_model):
    save_checkpoint(trained_model, tmp_path / "best", extra={"epoch": 4})
    loaded = load_checkpoint(tmp_path / "best")
    assert loaded.config == trained_model.config
    assert loaded.seed == 5
    assert not loaded.training
    original = trained_model.state()
    for name, (kind, array) in loaded.state().items():
        assert original[name][0] == kind
        np.testing.assert_array_equal(array, original[name][1], err_msg=name)
    panels = pytest.helpers.random_panels(trained_model.config, batch=2, seed=3)
    trained_model.eval()
    with no_grad():
        expected = trained_model(panels).target.data
        actual = loaded(panels).target.data
    np.testing.assert_array_equal(actual, expected)


def test_manifest_is_readable_text(tmp_path, trained_model):
    save_checkpoint(trained_model, tmp_path, extra={"epoch": 4})
    text = (tmp_path / MANIFEST).read_text()
    assert text.startswith("format_version=1\n")
    assert "epoch=4" in text
    assert "config.geometry=a2x2" in text
    assert "config.tcn_mode=within_group" in text
    assert "tensor=encoder.position:param:4x520" in text


def test_payload_is_float32(tmp_path, trained_model):
    save_checkpoint(trained_model, tmp_path)
    values = sum(array.size for _, array in trained_model.state().values())
    assert (tmp_path / PAYLOAD).stat().st_size == 4 * values


def truncate(path):
    (path / PAYLOAD).write_bytes((path / PAYLOAD).read_bytes()[:-4])


def pad(path):
    (path / PAYLOAD).write_bytes((path / PAYLOAD).read_bytes() + b"\0" * 8)


def rewrite_manifest(old, new):
    def damage(path):
        text = (path / MANIFEST).read_text()
        (path / MANIFEST).write_text(text.replace(old, new))

    return damage


@pytest.mark.parametrize(
    "damage, message",
    [
        (lambda path: (path / MANIFEST).unlink(), "Missing checkpoint manifest"),
        (lambda path: (path / PAYLOAD).unlink(), "Missing checkpoint payload"),
        (truncate, "truncated"),
        (pad, "8 trailing bytes"),
        (rewrite_manifest("format_version=1", "format_version=2"), "format version"),
        (rewrite_manifest("config.channels=8", "config.channels=7"), "channels"),
        (rewrite_manifest("tensor=encoder.position:param:4x520\n", ""), "trailing"),
    ],
    ids=["manifest", "payload", "truncated", "trailing", "version", "config", "tensor"],
)
def test_damaged_checkpoints_are_rejected(tmp_path, trained_model, damage, message):
    save_checkpoint(trained_model, tmp_path)
    damage(tmp_path)
    with pytest.raises(ArtifactError) as info:
        load_checkpoint(tmp_path)
    assert message in str(info.value)
