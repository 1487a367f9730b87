"""Minimal tensor container: one JSON header line + raw float32 payload.

The container is a single tensor per file so that checkpoints, precomputed
embeddings, and synthetic scenarios stay readable from any language: first
line is a JSON object with ``shape``, ``dtype`` ("f32"), and ``byte_order``
("little-endian"); the rest of the file is the row-major float32 data.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    header = {"dtype": "f32", "shape": list(arr.shape), "byte_order": "little-endian"}
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode("ascii"))
        f.write(arr.astype("<f4", copy=False).tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("ascii"))
        if header.get("dtype") != "f32":
            raise ValueError(f"{path}: unsupported dtype {header.get('dtype')!r}")
        if header.get("byte_order") != "little-endian":
            raise ValueError(f"{path}: unsupported byte order {header.get('byte_order')!r}")
        payload = f.read()
    data = np.frombuffer(payload, dtype="<f4")
    shape = tuple(header["shape"])
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise ValueError(f"{path}: payload has {data.size} values, header says {expected}")
    return data.reshape(shape).copy()


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
