"""
On-disk datasets.

A dataset directory holds a text ``manifest`` (key=value) and three raw unsigned 8-bit
files: ``panels`` (N x n x H x W, row-major), ``targets`` (one answer index per
instance) and ``rules`` (N x d_r multi-hot).
"""

import dataclasses
import functools
import logging
import multiprocessing
import pathlib
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Union

import numpy as np
import tqdm

from .config import Geometry
from .exceptions import ArtifactError, ConfigurationError
from .generator import (
    ATTRIBUTES,
    RULES,
    MatrixInstance,
    Pair,
    RegimeSpec,
    Split,
    rule_dim,
    sample_matrix,
)
from .utils import (
    build_dataclass_repr,
    derive_seed,
    format_key_values,
    read_key_values,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest"
REGIME_MANIFEST = "regime"
FILES = ("panels", "targets", "rules")


@dataclasses.dataclass
class Batch:
    indices: np.ndarray
    panels: np.ndarray
    targets: np.ndarray
    rules: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclasses.dataclass
class Dataset:
    geometry: Geometry
    #: (N, n, H, W) uint8
    panels: np.ndarray
    #: (N,) uint8 answer indices
    targets: np.ndarray
    #: (N, d_r) uint8 multi-hot
    rules: np.ndarray
    metadata: Dict[str, str] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.geometry = Geometry(self.geometry)
        self.panels = np.asarray(self.panels, dtype=np.uint8)
        self.targets = np.asarray(self.targets, dtype=np.uint8).reshape(-1)
        self.rules = np.asarray(self.rules, dtype=np.uint8)
        count = len(self.targets)
        if self.panels.ndim != 4 or len(self.panels) != count:
            raise ConfigurationError(
                f"panels {self.panels.shape} do not match {count} targets"
            )
        if self.panels.shape[1] != self.geometry.panels:
            raise ConfigurationError(
                f"{self.geometry.value} needs {self.geometry.panels} panels per "
                f"instance, "
                f"got {self.panels.shape[1]}"
            )
        if self.rules.ndim != 2 or len(self.rules) != count:
            raise ConfigurationError(
                f"rules {self.rules.shape} do not match {count} targets"
            )

    def __repr__(self):
        return "{}({}, count={})".format(
            type(self).__name__, self.geometry.value, len(self)
        )

    def __len__(self):
        return len(self.targets)

    @property
    def answer_panels(self) -> int:
        return self.geometry.answer_panels

    @property
    def rule_dim(self) -> int:
        return self.rules.shape[1]

    @property
    def image_size(self) -> int:
        return self.panels.shape[-1]

    def one_hot(self, indices=None) -> np.ndarray:
        targets = self.targets if indices is None else self.targets[indices]
        return np.eye(self.answer_panels, dtype=np.uint8)[targets]

    def pairs(self, index: int) -> FrozenSet[Pair]:
        "(rule, attribute) pairs active in one instance."
        return frozenset(rule_pairs(self.rules[index]))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.geometry,
            self.panels[indices],
            self.targets[indices],
            self.rules[indices],
            dict(self.metadata),
        )

    def order(self, seed: Optional[int] = None, epoch: int = 0) -> np.ndarray:
        if seed is None:
            return np.arange(len(self))
        rng = np.random.default_rng(derive_seed(seed, "shuffle", epoch))
        return rng.permutation(len(self))

    def batches(
        self,
        batch_size: int,
        seed: Optional[int] = None,
        epoch: int = 0,
        drop_singleton: bool = True,
    ) -> Iterator[Batch]:
        """
        Minibatches in a per-epoch shuffled order (sequential when ``seed`` is None).
        The last partial batch is kept unless it holds a single instance, which
        BatchNorm cannot train on.
        """
        if batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
        order = self.order(seed, epoch)
        for start in range(0, len(order), batch_size):
            indices = order[start : start + batch_size]
            if len(indices) == 1 and drop_singleton and len(order) > 1:
                logger.warning(
                    "Dropping trailing singleton batch (instance %d)", indices[0]
                )
                continue
            yield Batch(
                indices=indices,
                panels=self.panels[indices],
                targets=self.one_hot(indices),
                rules=self.rules[indices],
            )

    @classmethod
    def from_instances(
        cls, instances: Sequence[MatrixInstance], metadata: Dict[str, str] = None
    ) -> "Dataset":
        if not instances:
            raise ConfigurationError("Cannot build an empty dataset")
        return cls(
            geometry=instances[0].geometry,
            panels=np.stack([instance.images() for instance in instances]),
            targets=np.array(
                [instance.target for instance in instances], dtype=np.uint8
            ),
            rules=np.stack([instance.r for instance in instances]),
            metadata=dict(metadata or {}),
        )


def rule_pairs(vector) -> List[Pair]:
    vector = np.asarray(vector).reshape(len(ATTRIBUTES), len(RULES))
    return [
        (RULES[rule], ATTRIBUTES[attribute])
        for attribute, rule in zip(*np.nonzero(vector))
    ]


### FILES ###


def write_dataset(
    data: Union[Dataset, Sequence[MatrixInstance]],
    path: pathlib.Path,
    metadata: Dict[str, str] = None,
):
    dataset = data if isinstance(data, Dataset) else Dataset.from_instances(data)
    if not len(dataset):
        raise ConfigurationError("Cannot write an empty dataset")
    path = pathlib.Path(path)
    path.mkdir(parents=True, exist_ok=True)
    pairs = [
        ("format_version", FORMAT_VERSION),
        ("count", len(dataset)),
        ("geometry", dataset.geometry.value),
        ("panels_per_instance", dataset.geometry.panels),
        ("answer_panels", dataset.answer_panels),
        ("image_size", dataset.image_size),
        ("rule_dim", dataset.rule_dim),
    ]
    extras = dict(dataset.metadata)
    extras.update(metadata or {})
    reserved = {key for key, _ in pairs}
    pairs.extend((key, value) for key, value in extras.items() if key not in reserved)
    for name in FILES:
        array = np.ascontiguousarray(getattr(dataset, name))
        (path / name).write_bytes(array.tobytes())
    (path / MANIFEST).write_text(format_key_values(pairs))
    logger.info("Wrote %d instances to %s", len(dataset), path)


def _read_int(values: Dict[str, str], key: str, manifest_path: pathlib.Path) -> int:
    try:
        return int(values[key])
    except (KeyError, ValueError):
        raise ArtifactError(f"{manifest_path}: missing or invalid {key!r}")


def _read_array(path: pathlib.Path, shape) -> np.ndarray:
    if not path.exists():
        raise ArtifactError(f"Missing dataset file {path}")
    payload = path.read_bytes()
    expected = int(np.prod(shape, dtype=np.int64))
    if len(payload) < expected:
        raise ArtifactError(
            f"{path}: truncated at byte {len(payload)} (expected {expected} bytes)"
        )
    if len(payload) > expected:
        raise ArtifactError(
            f"{path}: {len(payload) - expected} trailing bytes at {expected}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()


def read_dataset(path: pathlib.Path) -> Dataset:
    path = pathlib.Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.exists():
        raise ArtifactError(f"Missing dataset manifest {manifest_path}")
    try:
        values = read_key_values(manifest_path)
    except ValueError as exception:
        raise ArtifactError(f"{manifest_path}: {exception}")
    if values.get("format_version") != str(FORMAT_VERSION):
        raise ArtifactError(
            f"{manifest_path}: format version {values.get('format_version')!r}, "
            f"expected {FORMAT_VERSION}"
        )
    try:
        geometry = Geometry(values.get("geometry"))
    except ValueError:
        raise ArtifactError(
            f"{manifest_path}: unknown geometry {values.get('geometry')!r}"
        )
    count = _read_int(values, "count", manifest_path)
    size = _read_int(values, "image_size", manifest_path)
    dimension = _read_int(values, "rule_dim", manifest_path)
    panels = _read_array(path / "panels", (count, geometry.panels, size, size))
    targets = _read_array(path / "targets", (count,))
    rules = _read_array(path / "rules", (count, dimension))
    bad = np.flatnonzero(targets >= geometry.answer_panels)
    if bad.size:
        raise ArtifactError(
            f"{path / 'targets'}: index {targets[bad[0]]} >= {geometry.answer_panels} "
            f"at byte {bad[0]}"
        )
    bad = np.flatnonzero(rules.reshape(-1) > 1)
    if bad.size:
        raise ArtifactError(
            f"{path / 'rules'}: value {rules.reshape(-1)[bad[0]]} at byte {bad[0]}"
        )
    reserved = {"format_version", "count", "geometry", "image_size", "rule_dim"}
    metadata = {key: value for key, value in values.items() if key not in reserved}
    return Dataset(geometry, panels, targets, rules, metadata)


### GENERATION ###


def _render(regime: RegimeSpec, split: Split, seed: int, index: int):
    instance = sample_matrix(regime, split, seed, index)
    return instance.images(), instance.target, instance.r


def generate_split(
    regime: RegimeSpec,
    split: Union[Split, str],
    seed: int,
    count: Optional[int] = None,
    workers: int = 1,
    progress: bool = False,
) -> Dataset:
    """
    Render ``count`` instances of ``split`` (the regime's split size by default).
    Workers only change speed: instances are reassembled in index order.
    """
    split = Split(split)
    count = regime.size(split) if count is None else count
    if count < 1:
        raise ConfigurationError(f"{split.value} split must hold at least one instance")
    render = functools.partial(_render, regime, split, seed)
    pool = multiprocessing.Pool(workers) if workers > 1 else None
    try:
        if pool:
            iterator = pool.imap(render, range(count), chunksize=16)
        else:
            iterator = map(render, range(count))
        iterator = tqdm.tqdm(
            iterator, total=count, desc=split.value, disable=not progress, leave=False
        )
        results = list(iterator)
    finally:
        if pool:
            pool.close()
            pool.join()
    images, targets, rules = zip(*results)
    metadata = dict(regime.to_mapping(), split=split.value, seed=str(seed))
    return Dataset(
        regime.geometry,
        np.stack(images),
        np.array(targets),
        np.stack(rules),
        metadata,
    )


def generate_splits(
    regime: RegimeSpec,
    seed: int,
    out: pathlib.Path,
    workers: int = 1,
    progress: bool = False,
) -> Dict[Split, Dataset]:
    """
    Write ``train``, ``val`` and ``test`` directories plus a ``regime`` manifest under
    ``out``.
    """
    out = pathlib.Path(out)
    out.mkdir(parents=True, exist_ok=True)
    datasets = {}
    for split in Split:
        if not regime.size(split):
            logger.warning("Skipping empty %s split", split.value)
            continue
        datasets[split] = generate_split(
            regime, split, seed, workers=workers, progress=progress
        )
        write_dataset(datasets[split], out / split.value)
    (out / REGIME_MANIFEST).write_text(
        format_key_values(dict(regime.to_mapping(), seed=seed, rule_dim=rule_dim()))
    )
    return datasets


def read_regime(path: pathlib.Path) -> RegimeSpec:
    manifest_path = pathlib.Path(path) / REGIME_MANIFEST
    if not manifest_path.exists():
        raise ArtifactError(f"Missing regime manifest {manifest_path}")
    try:
        values = read_key_values(manifest_path)
    except ValueError as exception:
        raise ArtifactError(f"{manifest_path}: {exception}")
    return RegimeSpec.from_mapping(values)
