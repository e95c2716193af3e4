"""Versioned, self-describing checkpoint files.

A checkpoint is a UTF-8 JSON document written with sorted keys and a fixed
indent, so saving a loaded checkpoint reproduces the file byte for byte::

    {
      "format": "platedvi-checkpoint",
      "format_version": 1,
      "model_id": "vae",
      "model_hyperparams": {...},
      "parameters": {
        "q/encoder/0/W": {"dtype": "<f8", "shape": [4, 16], "data": "<base64>"},
        ...
      },
      "training_meta": {"seed": 0, "epochs": 300, "final_elbo": -3012.5}
    }

Parameter payloads are the raw little-endian float64 bytes in row-major
order, base64-encoded, which keeps reloads bit-exact.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

FORMAT = "platedvi-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype="<f8")
    return {"dtype": "<f8", "shape": list(a.shape), "data": base64.b64encode(a.tobytes(order="C")).decode("ascii")}


def _decode(name: str, entry: dict) -> np.ndarray:
    try:
        if entry["dtype"] != "<f8":
            raise CheckpointError(f"parameter {name!r}: unsupported dtype {entry['dtype']!r}")
        raw = base64.b64decode(entry["data"], validate=True)
        shape = tuple(int(n) for n in entry["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"parameter {name!r} is malformed: {exc}") from None
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(f"parameter {name!r}: payload does not match shape {list(shape)}")
    return arr.reshape(shape).astype(np.float64)


@dataclass
class Checkpoint:
    model_id: str
    model_hyperparams: dict
    parameters: dict
    training_meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def dumps(self) -> str:
        doc = {
            "format": FORMAT,
            "format_version": self.format_version,
            "model_id": self.model_id,
            "model_hyperparams": self.model_hyperparams,
            "parameters": {k: _encode(v) for k, v in self.parameters.items()},
            "training_meta": self.training_meta,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Checkpoint":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"not a checkpoint file: {exc}") from None
        if not isinstance(doc, dict) or doc.get("format") != FORMAT:
            raise CheckpointError("not a checkpoint file")
        if doc.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {doc.get('format_version')!r}")
        params = {k: _decode(k, v) for k, v in doc["parameters"].items()}
        return cls(doc["model_id"], doc["model_hyperparams"], params, doc.get("training_meta", {}), doc["format_version"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def export_parameters(named: dict) -> dict:
    return {k: np.array(p.data, dtype=np.float64) for k, p in named.items()}


def import_parameters(named: dict, values: dict) -> None:
    """Overwrite ``named`` parameters in place; names and shapes must match exactly."""
    missing = sorted(set(named) - set(values))
    extra = sorted(set(values) - set(named))
    if missing or extra:
        raise CheckpointError(f"parameter names do not match the model (missing {missing}, unexpected {extra})")
    for k, p in named.items():
        v = np.asarray(values[k], dtype=np.float64)
        if v.shape != p.shape:
            raise CheckpointError(f"parameter {k!r} has shape {list(v.shape)}, model expects {list(p.shape)}")
        p.data[...] = v
