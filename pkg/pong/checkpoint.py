"""
Checkpoint directories: a text ``manifest`` and a raw ``tensors.bin`` payload.

The manifest echoes the model configuration (``config.<field>=value``), states the
format version and lists one ``tensor=<name>:<kind>:<shape>`` line per stored array,
in payload order. The payload is the concatenation of every array as little-endian
float32.
"""

import logging
import pathlib
from typing import Dict, List, Tuple

import numpy as np

from .config import ModelConfig
from .exceptions import ArtifactError, ConfigurationError, ShapeError
from .model import PoNG
from .utils import format_key_values, parse_key_values

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest"
PAYLOAD = "tensors.bin"
PAYLOAD_DTYPE = np.dtype("<f4")


def format_shape(shape: Tuple[int, ...]) -> str:
    return "x".join(str(extent) for extent in shape) or "scalar"


def parse_shape(text: str) -> Tuple[int, ...]:
    if text == "scalar":
        return ()
    return tuple(int(extent) for extent in text.split("x"))


def save_checkpoint(model: PoNG, path: pathlib.Path, extra: Dict[str, object] = None):
    path = pathlib.Path(path)
    path.mkdir(parents=True, exist_ok=True)
    pairs: List[Tuple[str, object]] = [("format_version", FORMAT_VERSION)]
    pairs.append(("seed", model.seed))
    for key, value in (extra or {}).items():
        pairs.append((key, value))
    for key, value in model.config.to_mapping().items():
        pairs.append((f"config.{key}", value))
    state = model.state()
    for name, (kind, array) in state.items():
        pairs.append(("tensor", f"{name}:{kind}:{format_shape(array.shape)}"))
    with (path / PAYLOAD).open("wb") as file_pointer:
        for _, array in state.values():
            payload = np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE)
            file_pointer.write(payload.tobytes())
    (path / MANIFEST).write_text(format_key_values(pairs))
    logger.info("Wrote checkpoint %s (%d tensors)", path, len(state))


def read_manifest(path: pathlib.Path):
    manifest_path = pathlib.Path(path) / MANIFEST
    if not manifest_path.exists():
        raise ArtifactError(f"Missing checkpoint manifest {manifest_path}")
    try:
        pairs = parse_key_values(manifest_path.read_text())
    except ValueError as exception:
        raise ArtifactError(f"{manifest_path}: {exception}")
    values = {key: value for key, value in pairs if key != "tensor"}
    tensors = []
    for key, value in pairs:
        if key != "tensor":
            continue
        try:
            name, kind, shape = value.split(":")
            tensors.append((name, kind, parse_shape(shape)))
        except ValueError:
            raise ArtifactError(f"{manifest_path}: malformed tensor entry {value!r}")
    if values.get("format_version") != str(FORMAT_VERSION):
        raise ArtifactError(
            f"{manifest_path}: format version {values.get('format_version')!r}, "
            f"expected {FORMAT_VERSION}"
        )
    return values, tensors


def load_checkpoint(path: pathlib.Path) -> PoNG:
    path = pathlib.Path(path)
    values, tensors = read_manifest(path)
    config_mapping = {
        key.partition(".")[2]: value
        for key, value in values.items()
        if key.startswith("config.")
    }
    try:
        config = ModelConfig.from_mapping(config_mapping)
    except ConfigurationError as exception:
        raise ArtifactError(f"{path / MANIFEST}: {exception}")
    payload_path = path / PAYLOAD
    if not payload_path.exists():
        raise ArtifactError(f"Missing checkpoint payload {payload_path}")
    payload = payload_path.read_bytes()
    table, offset = {}, 0
    for name, _, shape in tensors:
        count = int(np.prod(shape, dtype=np.int64))
        stop = offset + count * PAYLOAD_DTYPE.itemsize
        if stop > len(payload):
            raise ArtifactError(
                f"{payload_path}: truncated at byte {len(payload)} reading {name!r} "
                f"(needs bytes {offset}..{stop})"
            )
        array = np.frombuffer(payload, PAYLOAD_DTYPE, count, offset)
        table[name] = array.reshape(shape)
        offset = stop
    if offset != len(payload):
        raise ArtifactError(
            f"{payload_path}: {len(payload) - offset} trailing bytes at {offset}"
        )
    model = PoNG(config, seed=int(values.get("seed", 0)))
    try:
        model.load_state(table)
    except ShapeError as exception:
        raise ArtifactError(f"{path}: {exception}")
    logger.info("Loaded checkpoint %s", path)
    return model.eval()
