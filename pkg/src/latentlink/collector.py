"""Harvesting of per-layer hidden states from a decode record.

Three collection modes: every token and every layer, only the first token
(all layers), or every token at just the last layer. An empty record yields
an empty bundle; downstream attention stays well-defined thanks to the
translator's always-appended fallback embedding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import UsageError
from .gm import LatentRecord
from .numkit import Tensor


class CollectionMode(str, Enum):
    ALL_TOKENS_ALL_LAYERS = "c0"
    FIRST_TOKEN_ALL_LAYERS = "c1"
    ALL_TOKENS_LAST_LAYER = "c-1"


@dataclass(frozen=True)
class BundleEntry:
    vector: Tensor  # (dim,)
    layer_index: int
    token_index: int


@dataclass(frozen=True)
class LatentBundle:
    entries: tuple[BundleEntry, ...]
    num_layers: int
    dim: int

    def __len__(self) -> int:
        return len(self.entries)


def collect(record: LatentRecord, mode: CollectionMode, last_l: int | None = None) -> LatentBundle:
    """Select hidden vectors according to the mode, token-major/layer-minor.

    ``last_l`` keeps only the deepest ``last_l`` layers (default: all).
    Entries alias the record's tensors, so values are bit-identical.
    """
    layers = record.num_layers
    if last_l is None:
        first_layer = 0
    else:
        if not 1 <= last_l <= layers:
            raise UsageError(f"last_l {last_l} outside [1, {layers}]")
        first_layer = layers - last_l

    entries: list[BundleEntry] = []
    if mode is CollectionMode.ALL_TOKENS_ALL_LAYERS:
        for i, per_token in enumerate(record.hiddens):
            for layer in range(first_layer, layers):
                entries.append(BundleEntry(per_token[layer], layer, i))
    elif mode is CollectionMode.FIRST_TOKEN_ALL_LAYERS:
        if record.hiddens:
            for layer in range(first_layer, layers):
                entries.append(BundleEntry(record.hiddens[0][layer], layer, 0))
    elif mode is CollectionMode.ALL_TOKENS_LAST_LAYER:
        for i, per_token in enumerate(record.hiddens):
            entries.append(BundleEntry(per_token[layers - 1], layers - 1, i))
    else:
        raise UsageError(f"unknown collection mode {mode!r}")
    return LatentBundle(entries=tuple(entries), num_layers=layers, dim=record.dim)


def empty_bundle(num_layers: int, dim: int) -> LatentBundle:
    return LatentBundle(entries=(), num_layers=num_layers, dim=dim)


def detach_bundle(bundle: LatentBundle) -> LatentBundle:
    return LatentBundle(
        entries=tuple(
            BundleEntry(e.vector.detach(), e.layer_index, e.token_index) for e in bundle.entries
        ),
        num_layers=bundle.num_layers,
        dim=bundle.dim,
    )


def save_bundle(bundle: LatentBundle, stem: str | Path) -> tuple[Path, Path]:
    """Manifest + little-endian blob, for replaying harvested latents without
    rerunning the upstream model."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for e in bundle.entries:
        raw = e.vector.data.astype("<f8").tobytes()
        entries.append(
            {"layer_index": e.layer_index, "token_index": e.token_index, "offset": offset}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = stem.with_suffix(".json")
    blob = stem.with_suffix(".bin")
    manifest.write_text(
        json.dumps(
            {"dim": bundle.dim, "num_layers": bundle.num_layers, "entries": entries},
            indent=1,
            sort_keys=True,
        )
        + "\n"
    )
    blob.write_bytes(b"".join(chunks))
    return manifest, blob


def load_bundle(stem: str | Path) -> LatentBundle:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".bin").read_bytes()
    dim = meta["dim"]
    entries = []
    for e in meta["entries"]:
        arr = np.frombuffer(raw, dtype="<f8", count=dim, offset=e["offset"]).astype(np.float64)
        entries.append(BundleEntry(Tensor(arr), e["layer_index"], e["token_index"]))
    return LatentBundle(entries=tuple(entries), num_layers=meta["num_layers"], dim=dim)
