"""Flat float32 parameter files with a JSON index.

``<stem>.bin`` holds the little-endian float32 values of every array back to
back; ``<stem>.json`` maps each name to its byte offset and shape, plus any
extra metadata the caller wants to embed.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

DTYPE = "<f4"


def save_arrays(stem: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    stem = Path(stem)
    index = {}
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        flat = np.ascontiguousarray(arr, dtype=DTYPE).ravel()
        index[name] = {"offset": offset, "shape": list(np.shape(arr))}
        chunks.append(flat.tobytes())
        offset += flat.nbytes
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    doc = {"dtype": DTYPE, "index": index}
    if meta:
        doc["meta"] = meta
    stem.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_arrays(stem: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    doc = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".bin").read_bytes()
    arrays = {}
    for name, entry in doc["index"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype=doc["dtype"], count=count, offset=entry["offset"]).reshape(shape).copy()
    return arrays, doc.get("meta", {})
