"""
Procedural matrix generator.

A matrix is a grid of symbolic panels (one value per attribute) whose rows follow one
rule per attribute. The bottom-right panel is removed and offered among distractors,
each of which differs from it in exactly one attribute.
"""

import dataclasses
import enum
import itertools
import logging
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import renderer
from .config import Geometry
from .exceptions import ConfigurationError, RegimeError
from .utils import build_dataclass_repr, build_enum_repr, derive_seed

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 1000


class Attribute(enum.Enum):
    TYPE = "type"
    SIZE = "size"
    SHADE = "shade"
    COUNT = "count"

    def __repr__(self):
        return build_enum_repr(self)

    @property
    def domain(self) -> Tuple:
        return {
            Attribute.TYPE: renderer.SHAPES,
            Attribute.SIZE: renderer.SIZES,
            Attribute.SHADE: renderer.SHADES,
            Attribute.COUNT: renderer.COUNTS,
        }[self]

    @property
    def numeric(self) -> bool:
        return self is not Attribute.TYPE


class Rule(enum.Enum):
    CONSTANT = "constant"
    PROGRESSION = "progression"
    DISTRIBUTE_THREE = "distribute_three"
    ARITHMETIC = "arithmetic"

    def __repr__(self):
        return build_enum_repr(self)

    @property
    def variants(self) -> Tuple[int, ...]:
        "Progression steps or arithmetic signs; zero where the rule has none."
        if self in (Rule.PROGRESSION, Rule.ARITHMETIC):
            return (1, -1)
        return (0,)


ATTRIBUTES = tuple(Attribute)
RULES = tuple(Rule)
Pair = Tuple[Rule, Attribute]


@dataclasses.dataclass(frozen=True)
class AttributeSpec:
    attribute: Attribute

    @property
    def name(self) -> str:
        return self.attribute.value

    @property
    def domain(self) -> Tuple:
        return self.attribute.domain

    @property
    def cardinality(self) -> int:
        return len(self.domain)


ATTRIBUTE_SPECS = tuple(AttributeSpec(attribute) for attribute in ATTRIBUTES)


@dataclasses.dataclass(frozen=True)
class RuleSpec:
    rule: Rule
    attribute: Attribute
    variant: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rule", Rule(self.rule))
        object.__setattr__(self, "attribute", Attribute(self.attribute))
        if self.variant not in self.rule.variants:
            raise ConfigurationError(
                f"{self.rule.value} has no variant {self.variant} "
                f"(choose from {self.rule.variants})"
            )
        if self.rule is Rule.ARITHMETIC and not self.attribute.numeric:
            raise ConfigurationError(f"arithmetic cannot govern {self.attribute.value}")

    def __repr__(self):
        return build_dataclass_repr(self)

    @property
    def pair(self) -> Pair:
        return self.rule, self.attribute

    def __str__(self):
        return f"{self.rule.value}:{self.attribute.value}"


@dataclasses.dataclass(frozen=True)
class Panel:
    "Domain indices of every attribute."

    type: int = 0
    size: int = 0
    shade: int = 0
    count: int = 0

    def value(self, attribute: Attribute) -> int:
        return getattr(self, attribute.value)

    def replace(self, attribute: Attribute, value: int) -> "Panel":
        return dataclasses.replace(self, **{attribute.value: value})

    @classmethod
    def from_values(cls, values: Dict[Attribute, int]) -> "Panel":
        return cls(
            **{attribute.value: int(value) for attribute, value in values.items()}
        )


### RULE ARITHMETIC ###


def row_consistent(
    rule: Rule, variant: int, row: Sequence[int], cardinality: int
) -> bool:
    """
    Whether one row of domain indices obeys ``rule``. Arithmetic works on 1-based
    ordinals.
    """
    if any(not 0 <= value < cardinality for value in row):
        return False
    if rule is Rule.CONSTANT:
        return len(set(row)) == 1
    if rule is Rule.PROGRESSION:
        return all(b - a == variant for a, b in zip(row, row[1:]))
    if len(row) != 3:
        return False
    if rule is Rule.DISTRIBUTE_THREE:
        return len(set(row)) == 3
    first, second, third = (value + 1 for value in row)
    return third == first + variant * second


def rows_consistent(
    rule: Rule, variant: int, rows: Sequence[Sequence[int]], cardinality: int
) -> bool:
    if not all(row_consistent(rule, variant, row, cardinality) for row in rows):
        return False
    if rule is Rule.DISTRIBUTE_THREE:
        return len({frozenset(row) for row in rows}) == 1
    return True


def legal_in(rule: Rule, attribute: Attribute, geometry: Geometry) -> bool:
    if rule is Rule.ARITHMETIC and not attribute.numeric:
        return False
    if rule in (Rule.DISTRIBUTE_THREE, Rule.ARITHMETIC) and geometry.columns < 3:
        return False
    return True


def consistent_variants(
    attribute: Attribute, rows: Sequence[Sequence[int]], geometry: Geometry
) -> List[Tuple[Rule, int]]:
    cardinality = len(attribute.domain)
    return [
        (rule, variant)
        for rule in RULES
        if legal_in(rule, attribute, geometry)
        for variant in rule.variants
        if rows_consistent(rule, variant, rows, cardinality)
    ]


def completions(
    attribute: Attribute,
    rows: Sequence[Sequence[int]],
    partial: Sequence[int],
    geometry: Geometry,
) -> Dict[int, List[Tuple[Rule, int]]]:
    """
    Every value that can end the ``partial`` last row, with the rule variants that agree
    with the complete ``rows`` and that completion.
    """
    found: Dict[int, List[Tuple[Rule, int]]] = {}
    for value in range(len(attribute.domain)):
        candidate = list(rows) + [list(partial) + [value]]
        variants = consistent_variants(attribute, candidate, geometry)
        if variants:
            found[value] = variants
    return found


def _draw_row(
    rule: Rule, variant: int, columns: int, cardinality: int, rng, subset=None
) -> List[int]:
    if rule is Rule.CONSTANT:
        return [int(rng.integers(cardinality))] * columns
    if rule is Rule.PROGRESSION:
        span = variant * (columns - 1)
        low, high = max(0, -span), min(cardinality, cardinality - span)
        start = int(rng.integers(low, high))
        return [start + variant * column for column in range(columns)]
    if rule is Rule.DISTRIBUTE_THREE:
        return [int(value) for value in rng.permutation(subset)]
    while True:
        first, second = (int(value) for value in rng.integers(1, cardinality + 1, 2))
        third = first + variant * second
        if 1 <= third <= cardinality:
            return [first - 1, second - 1, third - 1]


def instantiate_rule(spec: RuleSpec, geometry: Geometry, rng) -> List[List[int]]:
    "Rows of domain indices realizing ``spec``."
    cardinality = len(spec.attribute.domain)
    subset = None
    if spec.rule is Rule.DISTRIBUTE_THREE:
        chosen = rng.choice(cardinality, 3, replace=False)
        subset = sorted(int(value) for value in chosen)
    return [
        _draw_row(spec.rule, spec.variant, geometry.columns, cardinality, rng, subset)
        for _ in range(geometry.rows)
    ]


### REGIMES ###


def parse_pair(text: str) -> Pair:
    rule, separator, attribute = text.strip().partition(":")
    if not separator:
        raise ConfigurationError(f"Expected rule:attribute, got {text!r}")
    try:
        return Rule(rule.strip().lower()), Attribute(attribute.strip().lower())
    except ValueError:
        raise ConfigurationError(f"Unknown rule or attribute in {text!r}")


def parse_pairs(text: str) -> FrozenSet[Pair]:
    return frozenset(parse_pair(token) for token in text.split(",") if token.strip())


def format_pairs(pairs: Iterable[Pair]) -> str:
    return ",".join(
        sorted(f"{rule.value}:{attribute.value}" for rule, attribute in pairs)
    )


def parse_rules(text: str) -> Tuple[Rule, ...]:
    try:
        tokens = [token.strip().lower() for token in text.split(",")]
        return tuple(Rule(token) for token in tokens if token)
    except ValueError:
        raise ConfigurationError(f"Unknown rule in {text!r}")


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"

    def __repr__(self):
        return build_enum_repr(self)


@dataclasses.dataclass(frozen=True)
class RegimeSpec:
    """
    Which (rule, attribute) pairs are withheld from training and validation and demanded
    by every test matrix.
    """

    held_out: FrozenSet[Pair] = frozenset()
    geometry: Geometry = Geometry.RPM3X3
    rules: Tuple[Rule, ...] = RULES
    n_train: int = 0
    n_val: int = 0
    n_test: int = 0
    name: str = "iid"

    def __post_init__(self):
        held_out = self.held_out
        if isinstance(held_out, str):
            held_out = parse_pairs(held_out)
        object.__setattr__(self, "held_out", frozenset(held_out))
        object.__setattr__(self, "geometry", Geometry(self.geometry))
        rules = self.rules
        if isinstance(rules, str):
            rules = parse_rules(rules)
        object.__setattr__(self, "rules", tuple(Rule(rule) for rule in rules))
        for field_name in ("n_train", "n_val", "n_test"):
            if int(getattr(self, field_name)) < 0:
                raise ConfigurationError(f"{field_name} must be >= 0")
            object.__setattr__(self, field_name, int(getattr(self, field_name)))
        self.check()

    def __repr__(self):
        return build_dataclass_repr(self)

    ### CONSTRUCTORS ###

    @classmethod
    def attributeless(cls, attribute: Union[Attribute, str], **kwargs) -> "RegimeSpec":
        """
        Hold out every non-constant rule on ``attribute``: training only ever shows it
        constant, testing never does.
        """
        attribute = Attribute(attribute)
        geometry = Geometry(kwargs.get("geometry", Geometry.RPM3X3))
        rules = kwargs.get("rules", RULES)
        if isinstance(rules, str):
            rules = parse_rules(rules)
        held_out = frozenset(
            (rule, attribute)
            for rule in rules
            if rule is not Rule.CONSTANT and legal_in(Rule(rule), attribute, geometry)
        )
        kwargs.setdefault("name", f"a/{attribute.value}")
        return cls(held_out=held_out | frozenset(kwargs.pop("held_out", ())), **kwargs)

    @classmethod
    def preset(cls, name: str, **kwargs) -> "RegimeSpec":
        if name in (None, "", "iid"):
            kwargs.setdefault("name", "holdout" if kwargs.get("held_out") else "iid")
            return cls(**kwargs)
        prefix, _, attribute = name.partition("/")
        if prefix == "a" and attribute in {member.value for member in Attribute}:
            return cls.attributeless(attribute, **kwargs)
        choices = ", ".join(["iid"] + [f"a/{member.value}" for member in Attribute])
        raise ConfigurationError(f"Unknown regime {name!r} (choose from {choices})")

    ### PUBLIC METHODS ###

    def size(self, split: Union[Split, str]) -> int:
        return getattr(self, f"n_{Split(split).value}")

    def legal_rules(self, attribute: Attribute, split: Union[Split, str]) -> List[Rule]:
        """
        Rules ``attribute`` may carry in ``split``; test matrices may use any legal rule
        because the held-out demand is met by one attribute.
        """
        legal = [
            rule for rule in self.rules if legal_in(rule, attribute, self.geometry)
        ]
        if Split(split) is Split.TEST:
            return legal
        return [rule for rule in legal if (rule, attribute) not in self.held_out]

    def check(self):
        ordered = sorted(self.held_out, key=lambda pair: format_pairs([pair]))
        for rule, attribute in ordered:
            if rule not in self.rules or not legal_in(rule, attribute, self.geometry):
                raise RegimeError(
                    f"Held-out pair {rule.value}:{attribute.value} cannot occur in "
                    f"{self.geometry.value} with rules {format_rules(self.rules)}"
                )
        for attribute in ATTRIBUTES:
            if not self.legal_rules(attribute, Split.TRAIN):
                raise RegimeError(
                    f"No rule left for attribute {attribute.value!r} in train/val"
                )

    def to_mapping(self) -> Dict[str, str]:
        return {
            "regime": self.name,
            "geometry": self.geometry.value,
            "rules": format_rules(self.rules),
            "held_out": format_pairs(self.held_out),
            "n_train": str(self.n_train),
            "n_val": str(self.n_val),
            "n_test": str(self.n_test),
        }

    @classmethod
    def from_mapping(cls, mapping: Dict[str, str]) -> "RegimeSpec":
        return cls(
            held_out=mapping.get("held_out", ""),
            geometry=mapping.get("geometry", Geometry.RPM3X3.value),
            rules=mapping.get("rules") or RULES,
            n_train=int(mapping.get("n_train", 0)),
            n_val=int(mapping.get("n_val", 0)),
            n_test=int(mapping.get("n_test", 0)),
            name=mapping.get("regime", "iid"),
        )


def format_rules(rules: Iterable[Rule]) -> str:
    return ",".join(rule.value for rule in rules)


### MATRICES ###


@dataclasses.dataclass(frozen=True)
class MatrixInstance:
    geometry: Geometry
    #: context panels, row-major, without the missing bottom-right panel
    context: Tuple[Panel, ...]
    answers: Tuple[Panel, ...]
    target: int
    rule_specs: Tuple[RuleSpec, ...]

    def __repr__(self):
        return build_dataclass_repr(self)

    @property
    def correct(self) -> Panel:
        return self.answers[self.target]

    @property
    def panels(self) -> Tuple[Panel, ...]:
        return self.context + self.answers

    @property
    def grid(self) -> List[List[Panel]]:
        "Complete grid with the correct answer in place."
        cells = list(self.context) + [self.correct]
        columns = self.geometry.columns
        return [
            cells[row * columns : (row + 1) * columns]
            for row in range(self.geometry.rows)
        ]

    @property
    def pairs(self) -> FrozenSet[Pair]:
        return frozenset(spec.pair for spec in self.rule_specs)

    @property
    def y(self) -> np.ndarray:
        encoded = np.zeros(len(self.answers), dtype=np.uint8)
        encoded[self.target] = 1
        return encoded

    @property
    def r(self) -> np.ndarray:
        return encode_rules(self.rule_specs)

    def images(self) -> np.ndarray:
        "All panels as ``(n, 80, 80)`` 8-bit images, context first."
        return np.stack([renderer.raster_panel(panel) for panel in self.panels])


def _draw_rule_specs(regime: RegimeSpec, split: Split, rng) -> List[RuleSpec]:
    forced: Optional[Pair] = None
    if split is Split.TEST and regime.held_out:
        pairs = sorted(regime.held_out, key=lambda pair: format_pairs([pair]))
        forced = pairs[int(rng.integers(len(pairs)))]
    specs = []
    for attribute in ATTRIBUTES:
        if forced is not None and forced[1] is attribute:
            rule = forced[0]
        else:
            legal = regime.legal_rules(attribute, split)
            rule = legal[int(rng.integers(len(legal)))]
        variant = rule.variants[int(rng.integers(len(rule.variants)))]
        specs.append(RuleSpec(rule, attribute, variant))
    return specs


def well_posed(
    attribute: Attribute, rows: Sequence[Sequence[int]], geometry: Geometry
) -> bool:
    """
    The last row has a single completion, and with three rows only one rule variant
    explains the complete grid.
    """
    found = completions(attribute, rows[:-1], rows[-1][:-1], geometry)
    if list(found) != [rows[-1][-1]]:
        return False
    if geometry.rows >= 3 and len(consistent_variants(attribute, rows, geometry)) != 1:
        return False
    return True


def generate_answer_set(
    correct: Panel, n_a: int, rng: Union[np.random.Generator, int]
) -> Tuple[List[Panel], int]:
    """
    ``n_a - 1`` distinct single-attribute perturbations of ``correct`` plus ``correct``
    itself at a uniformly random index.
    """
    if n_a < 2:
        raise ConfigurationError(f"n_a must be >= 2, got {n_a}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(derive_seed(rng, "answers"))
    neighbours = [
        correct.replace(attribute, value)
        for attribute in ATTRIBUTES
        for value in range(len(attribute.domain))
        if value != correct.value(attribute)
    ]
    if len(neighbours) < n_a - 1:
        raise ConfigurationError(
            f"Only {len(neighbours)} distractors available for {n_a} answers"
        )
    chosen = rng.choice(len(neighbours), n_a - 1, replace=False)
    answers = [neighbours[int(index)] for index in chosen]
    target = int(rng.integers(n_a))
    answers.insert(target, correct)
    return answers, target


def sample_matrix(
    regime: RegimeSpec, split: Union[Split, str], seed: int, index: int = 0
) -> MatrixInstance:
    """
    One matrix of ``split``; a pure function of ``(regime, split, seed, index)``.
    """
    split = Split(split)
    geometry = regime.geometry
    rng = np.random.default_rng(derive_seed(seed, "matrix", split.value, index))
    for attempt in range(1, MAX_ATTEMPTS + 1):
        specs = _draw_rule_specs(regime, split, rng)
        grids = {
            spec.attribute: instantiate_rule(spec, geometry, rng) for spec in specs
        }
        rejected = [
            attribute
            for attribute, rows in grids.items()
            if not well_posed(attribute, rows, geometry)
        ]
        if rejected:
            continue
        if attempt > 1:
            logger.debug("%s[%d] accepted after %d draws", split.value, index, attempt)
        cells = [
            Panel.from_values(
                {attribute: grids[attribute][row][column] for attribute in grids}
            )
            for row in range(geometry.rows)
            for column in range(geometry.columns)
        ]
        answers, target = generate_answer_set(cells[-1], geometry.answer_panels, rng)
        return MatrixInstance(
            geometry, tuple(cells[:-1]), tuple(answers), target, tuple(specs)
        )
    raise RegimeError(
        f"No well-posed {split.value} matrix after {MAX_ATTEMPTS} draws; last rejected "
        f"attribute {rejected[0].value!r}"
    )


### RULE ENCODING ###


def rule_dim() -> int:
    return len(ATTRIBUTES) * len(RULES)


def encode_rules(assignments: Iterable[RuleSpec]) -> np.ndarray:
    """
    Multi-hot vector with one block of ``len(RULES)`` bits per attribute.
    """
    encoded = np.zeros(rule_dim(), dtype=np.uint8)
    seen = set()
    for spec in assignments:
        if spec.attribute in seen:
            raise ConfigurationError(
                f"Attribute {spec.attribute.value!r} has two rules"
            )
        seen.add(spec.attribute)
        block = ATTRIBUTES.index(spec.attribute) * len(RULES)
        encoded[block + RULES.index(spec.rule)] = 1
    missing = [attribute.value for attribute in ATTRIBUTES if attribute not in seen]
    if missing:
        raise ConfigurationError(f"No rule for attributes {missing}")
    return encoded


def decode_rules(vector) -> List[Pair]:
    "Highest-scoring rule of each attribute block."
    vector = np.asarray(vector).reshape(len(ATTRIBUTES), len(RULES))
    return [
        (RULES[int(np.argmax(block))], attribute)
        for attribute, block in zip(ATTRIBUTES, vector)
    ]


### CHECKER ###


def complete_matrix(context: Sequence[Panel], geometry: Geometry) -> Optional[Panel]:
    """
    Re-derive the missing panel from the context alone; ``None`` when some attribute
    admits no completion or several.
    """
    columns = geometry.columns
    values = {}
    for attribute in ATTRIBUTES:
        cells = [panel.value(attribute) for panel in context]
        last = (geometry.rows - 1) * columns
        rows = [cells[start : start + columns] for start in range(0, last, columns)]
        found = completions(attribute, rows, cells[last:], geometry)
        if len(found) != 1:
            return None
        values[attribute] = next(iter(found))
    return Panel.from_values(values)


def solve(instance: MatrixInstance) -> List[int]:
    "Indices of every answer equal to the re-derived completion."
    completion = complete_matrix(instance.context, instance.geometry)
    return [
        index for index, panel in enumerate(instance.answers) if panel == completion
    ]


def all_pairs(geometry: Geometry) -> List[Pair]:
    return [
        (rule, attribute)
        for attribute, rule in itertools.product(ATTRIBUTES, RULES)
        if legal_in(rule, attribute, geometry)
    ]
