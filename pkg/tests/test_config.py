import dataclasses

import pytest

from pong.config import Ablation, Geometry, ModelConfig, TcnMode
from pong.exceptions import ConfigurationError


@pytest.mark.parametrize(
    "geometry, rows, columns, context, answers, groups",
    [
        (Geometry.RPM3X3, 3, 3, 8, 8, 3),
        (Geometry.VAP2X3, 2, 3, 5, 4, 3),
        (Geometry.A2X2, 2, 2, 3, 4, 2),
    ],
)
def test_geometry(geometry, rows, columns, context, answers, groups):
    assert (geometry.rows, geometry.columns) == (rows, columns)
    assert geometry.context_panels == context
    assert geometry.answer_panels == answers
    assert geometry.panels == context + answers
    assert geometry.first_layer_groups == groups


def test_derived_dimensions():
    config = ModelConfig()
    assert config.spatial_dim == 25
    assert config.content_dim == 800
    assert config.embed_dim == 825
    assert config.reasoner_channels == 9
    assert ModelConfig(geometry="a2x2").reasoner_channels == 4


def test_strings_are_coerced():
    config = ModelConfig(
        geometry="VAP2X3",
        channels="16",
        beta="2.5",
        disable_tcn="yes",
        tcn_mode="within_group",
    )
    assert config.geometry is Geometry.VAP2X3
    assert config.channels == 16 and config.beta == 2.5
    assert config.disable_tcn is True
    assert config.tcn_mode is TcnMode.WITHIN_GROUP


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(geometry="hex"),
        dict(channels="many"),
        dict(disable_tcn="maybe"),
        dict(rule_dim=0),
        dict(beta=-1),
        dict(image_size=72),
        dict(disable_p1p2=True, disable_p3p4=True),
        dict(channels=30),
        dict(group_pair_groups=1, channels=32),
    ],
)
def test_invalid_configurations(kwargs):
    with pytest.raises(ConfigurationError):
        ModelConfig(**kwargs)


@pytest.mark.parametrize(
    "ablations, changes",
    [
        (["p1p2"], dict(disable_p1p2=True)),
        (["P3P4"], dict(disable_p3p4=True)),
        ([Ablation.TCN], dict(disable_tcn=True)),
        (["beta", "gamma"], dict(beta=0.0, gamma=0.0)),
        (
            ["union"],
            dict(disable_p3p4=True, disable_tcn=True, beta=0.0, gamma=0.0),
        ),
        ([], {}),
    ],
)
def test_ablate(ablations, changes):
    config = ModelConfig()
    assert config.ablate(ablations) == dataclasses.replace(config, **changes)


def test_unknown_ablation():
    with pytest.raises(ConfigurationError) as info:
        ModelConfig().ablate(["dropout"])
    assert "choose from p1p2, p3p4, tcn, beta, gamma, union" in str(info.value)


def test_file_round_trip(tmp_path):
    config = ModelConfig(geometry="a2x2", disable_tcn=True, beta=1.5)
    config.write(tmp_path / "model")
    text = (tmp_path / "model").read_text()
    assert "geometry=a2x2\n" in text and "disable_tcn=true\n" in text
    assert ModelConfig.read(tmp_path / "model") == config


def test_from_mapping_ignores_unrelated_keys():
    config = ModelConfig.from_mapping({"latent-dim": "64", "epochs": "3"})
    assert config.latent_dim == 64


def test_repr():
    assert repr(ModelConfig(geometry="a2x2")) == "ModelConfig(geometry=Geometry.A2X2)"
