"""Named-array JSON documents: the on-disk schema for models, priors, textures.

Arrays are stored row-major as nested lists; floats go through Python repr,
which round-trips float64 exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class SchemaError(ValueError):
    """A document is missing fields, malformed, or violates an invariant."""


def array_field(doc: dict, name: str, shape: tuple, dtype=np.float64) -> np.ndarray:
    if name not in doc:
        raise SchemaError(f"missing array field '{name}'")
    try:
        arr = np.asarray(doc[name], dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"field '{name}' is not a numeric array: {exc}") from exc
    if arr.shape != shape:
        raise SchemaError(f"field '{name}' has shape {arr.shape}, expected {shape}")
    return arr


def int_field(doc: dict, name: str) -> int:
    if name not in doc:
        raise SchemaError(f"missing header field '{name}'")
    value = doc[name]
    if not isinstance(value, int) or isinstance(value, bool):
        raise SchemaError(f"header field '{name}' must be an integer")
    return value


def dump_doc(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_doc(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be a JSON object")
    return doc


def arrays_to_lists(**arrays) -> dict:
    return {name: np.asarray(arr).tolist() for name, arr in arrays.items() if arr is not None}
