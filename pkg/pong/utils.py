import hashlib
import pathlib
from typing import Dict, Iterable, List, Tuple, Union

import black


def build_dataclass_repr(self, ignored_field_names=()):
    fragments = []
    for field_name, field_spec in self.__dataclass_fields__.items():
        value = getattr(self, field_name)
        if field_name in ignored_field_names:
            continue
        try:
            if value == field_spec.default:
                continue
        except ValueError:
            # arrays refuse truthiness
            pass
        fragments.append(f"{field_name}={value!r}")
    string = "{}({})".format(type(self).__qualname__, ", ".join(fragments))
    return black.format_file_contents(string, fast=True, mode=black.FileMode()).strip()


def build_enum_repr(self):
    return "{}.{}".format(type(self).__qualname__, self.name)


def derive_seed(seed: int, *labels) -> int:
    """
    Derive a stable 63-bit sub-seed from a root seed and purpose labels.
    """
    key = ":".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def parse_key_values(text: str) -> List[Tuple[str, str]]:
    """
    Parse ``key=value`` lines. Comments (``#``) and blank lines are skipped; repeated
    keys are kept in order.
    """
    pairs = []
    for line_number, line in enumerate(text.splitlines(), 1):
        line = line.partition("#")[0].strip()
        if not line:
            continue
        key, separator, value = line.partition("=")
        if not separator or not key.strip():
            raise ValueError(f"Line {line_number}: expected key=value, got {line!r}")
        pairs.append((normalize_key(key), value.strip()))
    return pairs


def format_key_values(
    pairs: Union[Dict[str, object], Iterable[Tuple[str, object]]]
) -> str:
    if isinstance(pairs, dict):
        pairs = pairs.items()
    return "".join(f"{key}={value}\n" for key, value in pairs)


def read_key_values(path: pathlib.Path) -> Dict[str, str]:
    return dict(parse_key_values(pathlib.Path(path).read_text()))
