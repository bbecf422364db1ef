"""Checkpoint serialization: a JSON manifest plus a raw little-endian blob.

The manifest lists {name, shape, dtype, offset} per parameter; the blob holds
the values back to back. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import UsageError
from .store import ParamStore


def save_checkpoint(store: ParamStore, stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.json`` and ``<stem>.bin``; returns both paths."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, t in store.items():
        raw = t.data.astype("<f8").tobytes()
        entries.append(
            {"name": name, "shape": list(t.shape), "dtype": "f64", "offset": offset}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = stem.with_suffix(".json")
    blob = stem.with_suffix(".bin")
    manifest.write_text(json.dumps({"params": entries}, indent=1, sort_keys=True) + "\n")
    blob.write_bytes(b"".join(chunks))
    return manifest, blob


def load_checkpoint(stem: str | Path) -> ParamStore:
    stem = Path(stem)
    manifest = stem.with_suffix(".json")
    blob = stem.with_suffix(".bin")
    if not manifest.exists() or not blob.exists():
        raise UsageError(f"checkpoint {stem} is missing its manifest or blob")
    meta = json.loads(manifest.read_text())
    raw = blob.read_bytes()
    store = ParamStore()
    for entry in meta["params"]:
        if entry["dtype"] != "f64":
            raise UsageError(f"unsupported dtype {entry['dtype']!r} for {entry['name']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape)
        store.add(entry["name"], arr.astype(np.float64))
    return store
