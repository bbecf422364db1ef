"""Cross-modality translation of harvested latents into a fixed-size
instruction matrix.

Learnable query rows attend over the harvested vectors (each tagged with a
learnable per-layer embedding) plus an always-appended learnable fallback
row, so output stays finite even when nothing was harvested. A single
decoder-style block plus a final norm and projection produce the instruction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .blocks import decoder_block, init_decoder_block, init_linear, init_norm, linear, norm
from .collector import LatentBundle
from .errors import ConfigurationError
from .numkit import ParamStore, Tensor


@dataclass(frozen=True)
class TranslatorConfig:
    dim_gm: int
    num_layers: int  # layer count of the upstream model (tags one embedding per layer)
    roller_num: int  # instruction rows
    dim_out: int  # instruction width, must match the distribution mode
    heads: int = 4
    use_layer_embedding: bool = True
    init_scale: float = 0.02

    def __post_init__(self):
        if self.roller_num < 1:
            raise ConfigurationError("need at least one instruction row")
        if self.dim_gm % self.heads != 0:
            raise ConfigurationError(f"dim_gm {self.dim_gm} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class Instruction:
    """The translated instruction matrix handed to the distributor."""

    matrix: Tensor  # (roller_num, dim_out)

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def detach(self) -> "Instruction":
        return Instruction(self.matrix.detach())


def init_translator(
    store: ParamStore, cfg: TranslatorConfig, rng: np.random.Generator, prefix: str = "tr"
) -> None:
    """Layer tags are uniform on [-a, a]; the fallback row is Gaussian; the
    output projection starts at zero so a freshly attached adapter emits an
    all-zero instruction (identity downstream)."""
    a = cfg.init_scale
    store.add(f"{prefix}.queries", rng.normal(0.0, a, (cfg.roller_num, cfg.dim_gm)))
    if cfg.use_layer_embedding:
        store.add(f"{prefix}.pe_layer", rng.uniform(-a, a, (cfg.num_layers, cfg.dim_gm)))
    store.add(f"{prefix}.fallback", rng.normal(0.0, a, (1, cfg.dim_gm)))
    init_decoder_block(store, f"{prefix}.block", cfg.dim_gm, rng)
    init_norm(store, f"{prefix}.lnf", cfg.dim_gm)
    init_linear(store, f"{prefix}.out", cfg.dim_gm, cfg.dim_out, rng, zero=True)


def translate(
    bundle: LatentBundle, store: ParamStore, cfg: TranslatorConfig, prefix: str = "tr"
) -> Instruction:
    """Produce the instruction matrix from a (possibly empty) bundle.

    Memory = every harvested vector plus its layer tag, then the fallback
    row; queries cross-attend over it, and the block output is normalized
    and projected to the distribution width.
    """
    rows: list[Tensor] = []
    for e in bundle.entries:
        if e.layer_index >= cfg.num_layers:
            raise IndexError(
                f"layer index {e.layer_index} out of range for {cfg.num_layers} layers"
            )
        row = nk.reshape(e.vector, (1, cfg.dim_gm))
        if cfg.use_layer_embedding:
            row = nk.add(row, nk.narrow(store[f"{prefix}.pe_layer"], 0, e.layer_index, 1))
        rows.append(row)
    rows.append(store[f"{prefix}.fallback"])
    memory = nk.concat(rows, axis=0) if len(rows) > 1 else rows[0]
    x = decoder_block(store[f"{prefix}.queries"], memory, store, f"{prefix}.block", cfg.heads)
    out = linear(norm(x, store, f"{prefix}.lnf"), store, f"{prefix}.out")
    return Instruction(matrix=out)
