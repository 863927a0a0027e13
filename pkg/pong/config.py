import dataclasses
import enum
import pathlib
from typing import Dict, Iterable, Union

from .exceptions import ConfigurationError
from .utils import (
    build_dataclass_repr,
    build_enum_repr,
    format_key_values,
    normalize_key,
    parse_key_values,
)


class Geometry(enum.Enum):
    RPM3X3 = "rpm3x3"
    VAP2X3 = "vap2x3"
    A2X2 = "a2x2"

    def __repr__(self):
        return build_enum_repr(self)

    @property
    def rows(self) -> int:
        return 3 if self is Geometry.RPM3X3 else 2

    @property
    def columns(self) -> int:
        return 2 if self is Geometry.A2X2 else 3

    @property
    def context_panels(self) -> int:
        return self.rows * self.columns - 1

    @property
    def answer_panels(self) -> int:
        return 8 if self is Geometry.RPM3X3 else 4

    @property
    def panels(self) -> int:
        return self.context_panels + self.answer_panels

    @property
    def first_layer_groups(self) -> int:
        return 2 if self is Geometry.A2X2 else 3


class TcnMode(enum.Enum):
    ACROSS_GROUPS = "across_groups"
    WITHIN_GROUP = "within_group"

    def __repr__(self):
        return build_enum_repr(self)


class Ablation(enum.Enum):
    P1P2 = "p1p2"
    P3P4 = "p3p4"
    TCN = "tcn"
    BETA = "beta"
    GAMMA = "gamma"
    UNION = "union"

    def __repr__(self):
        return build_enum_repr(self)

    @classmethod
    def parse(cls, token: str) -> "Ablation":
        try:
            return cls(token.strip().lower())
        except ValueError:
            choices = ", ".join(member.value for member in cls)
            raise ConfigurationError(
                f"Unknown ablation {token!r} (choose from {choices})"
            )


_ENUMERATIONS = {"geometry": Geometry, "tcn_mode": TcnMode}

_BOOLEANS = {
    "true": True,
    "yes": True,
    "1": True,
    "false": False,
    "no": False,
    "0": False,
}


def coerce_field(owner, field_name: str, value):
    """
    Coerce a string (or number) into the declared type of ``owner``'s field.
    """
    field_type = owner.__dataclass_fields__[field_name].type
    if field_name in _ENUMERATIONS and isinstance(value, str):
        enumeration = _ENUMERATIONS[field_name]
        try:
            return enumeration(value.strip().lower())
        except ValueError:
            raise ConfigurationError(f"Got {value!r} for {field_name}")
    if not isinstance(value, str):
        return value
    try:
        if field_type in (bool, "bool"):
            return _BOOLEANS[value.strip().lower()]
        if field_type in (int, "int"):
            return int(value)
        if field_type in (float, "float"):
            return float(value)
    except (KeyError, ValueError):
        raise ConfigurationError(f"Got {value!r} for {field_name}")
    return value


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    geometry: Geometry = Geometry.RPM3X3
    image_size: int = 80
    rule_dim: int = 16
    channels: int = 32
    position_dim: int = 25
    latent_dim: int = 128
    group_conv_groups: int = 8
    group_pair_groups: int = 4
    beta: float = 25.0
    gamma: float = 5.0
    disable_p1p2: bool = False
    disable_p3p4: bool = False
    disable_tcn: bool = False
    tcn_mode: TcnMode = TcnMode.ACROSS_GROUPS

    def __post_init__(self):
        for field_name in self.__dataclass_fields__:
            value = coerce_field(self, field_name, getattr(self, field_name))
            object.__setattr__(self, field_name, value)
        if self.rule_dim <= 0:
            raise ConfigurationError(f"rule_dim must be positive, got {self.rule_dim}")
        if self.beta < 0 or self.gamma < 0:
            raise ConfigurationError(
                f"beta/gamma must be >= 0, got {self.beta}/{self.gamma}"
            )
        if self.image_size % 16:
            raise ConfigurationError(
                f"image_size must be a multiple of 16, got {self.image_size}"
            )
        if self.disable_p1p2 and self.disable_p3p4:
            raise ConfigurationError("At least one pair of pathways must stay enabled")
        if self.reasoner_channels % self.first_layer_groups:
            raise ConfigurationError(
                f"{self.reasoner_channels} reasoner channels are not divisible "
                f"by {self.first_layer_groups} groups"
            )
        for name in ("group_conv_groups", "group_pair_groups"):
            if self.channels % getattr(self, name):
                raise ConfigurationError(
                    f"{self.channels} channels are not divisible by {name}="
                    f"{getattr(self, name)}"
                )
        if self.group_pair_groups < 2:
            raise ConfigurationError("group_pair_groups must be >= 2")

    def __repr__(self):
        return build_dataclass_repr(self)

    ### PROPERTIES ###

    @property
    def context_panels(self) -> int:
        return self.geometry.context_panels

    @property
    def answer_panels(self) -> int:
        return self.geometry.answer_panels

    @property
    def panels(self) -> int:
        return self.geometry.panels

    @property
    def first_layer_groups(self) -> int:
        return self.geometry.first_layer_groups

    @property
    def reasoner_channels(self) -> int:
        return self.context_panels + 1

    @property
    def spatial_dim(self) -> int:
        return (self.image_size // 16) ** 2

    @property
    def content_dim(self) -> int:
        return self.channels * self.spatial_dim

    @property
    def embed_dim(self) -> int:
        return self.content_dim + self.position_dim

    ### PUBLIC METHODS ###

    def ablate(self, ablations: Iterable[Union[Ablation, str]]) -> "ModelConfig":
        changes: Dict[str, object] = {}
        for ablation in ablations:
            if isinstance(ablation, str):
                ablation = Ablation.parse(ablation)
            if ablation is Ablation.UNION:
                changes.update(disable_p3p4=True, disable_tcn=True, beta=0.0, gamma=0.0)
            elif ablation is Ablation.P1P2:
                changes.update(disable_p1p2=True)
            elif ablation is Ablation.P3P4:
                changes.update(disable_p3p4=True)
            elif ablation is Ablation.TCN:
                changes.update(disable_tcn=True)
            elif ablation is Ablation.BETA:
                changes.update(beta=0.0)
            elif ablation is Ablation.GAMMA:
                changes.update(gamma=0.0)
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, mapping: Dict[str, object]) -> "ModelConfig":
        known = {}
        for key, value in mapping.items():
            key = normalize_key(key)
            if key in cls.__dataclass_fields__:
                known[key] = value
        return cls(**known)

    def to_mapping(self) -> Dict[str, str]:
        mapping = {}
        for field_name in self.__dataclass_fields__:
            value = getattr(self, field_name)
            if isinstance(value, enum.Enum):
                value = value.value
            elif isinstance(value, bool):
                value = str(value).lower()
            mapping[field_name] = str(value)
        return mapping

    @classmethod
    def read(cls, path: pathlib.Path) -> "ModelConfig":
        return cls.from_mapping(dict(parse_key_values(pathlib.Path(path).read_text())))

    def write(self, path: pathlib.Path):
        pathlib.Path(path).write_text(format_key_values(self.to_mapping()))
