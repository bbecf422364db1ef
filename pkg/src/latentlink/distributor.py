"""Application of the instruction matrix to the fast model's latent streams.

Two targets (the learnable spatial queries before encoding or the encoded
feature grid after it) times two mechanisms: a one-layer decoder transformer
whose final projections start at zero, or a broadcast bias addition. Feature
shifts in transformer mode round-trip through an exact space-to-channel
pixel shuffle so the feature width matches the instruction width.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numkit as nk
from .blocks import decoder_block, init_decoder_block
from .errors import ConfigurationError, DimensionError
from .numkit import ParamStore, Tensor
from .translator import Instruction


class ShiftTarget(str, Enum):
    Q_BEV = "q_bev"
    F_BEV = "f_bev"


class ShiftMode(str, Enum):
    TF = "tf"
    BIAS = "bias"


@dataclass(frozen=True)
class DistributionConfig:
    target: ShiftTarget = ShiftTarget.Q_BEV
    mode: ShiftMode = ShiftMode.BIAS
    dim_sm: int = 32
    shuffle_factor: int = 2
    heads: int = 4
    tf_rows: int = 4  # instruction rows in transformer mode

    def __post_init__(self):
        if self.shuffle_factor < 1:
            raise ConfigurationError("shuffle_factor must be >= 1")
        if self.dim_tf % self.heads != 0:
            raise ConfigurationError(
                f"dim_tf {self.dim_tf} not divisible by heads {self.heads}"
            )

    @property
    def dim_tf(self) -> int:
        return self.dim_sm * self.shuffle_factor**2

    @property
    def instruction_width(self) -> int:
        return self.dim_sm if self.mode is ShiftMode.BIAS else self.dim_tf

    @property
    def instruction_rows(self) -> int:
        return 1 if self.mode is ShiftMode.BIAS else self.tf_rows


def init_shift(
    store: ParamStore, cfg: DistributionConfig, rng: np.random.Generator, prefix: str = "sh"
) -> None:
    """Bias mode has no parameters. Transformer mode gets a decoder block
    with zero-initialized final projections (identity at initialization);
    query shifts additionally get a pad/truncate linear pair between the
    native width and the transformer width, exact inverses at init."""
    if cfg.mode is ShiftMode.BIAS:
        return
    init_decoder_block(store, f"{prefix}.block", cfg.dim_tf, rng, zero_final=True)
    if cfg.target is ShiftTarget.Q_BEV:
        up = np.zeros((cfg.dim_sm, cfg.dim_tf))
        up[: cfg.dim_sm, : cfg.dim_sm] = np.eye(cfg.dim_sm)
        store.add(f"{prefix}.up.w", up)
        store.add(f"{prefix}.down.w", up.T.copy())


def shift_bias(x: Tensor, instruction: Instruction) -> Tensor:
    """Add the single instruction row to every row of ``x``."""
    mat = instruction.matrix
    if mat.shape[0] != 1 or mat.shape[1] != x.shape[1]:
        raise DimensionError(
            f"bias shift needs a 1x{x.shape[1]} instruction, got {mat.shape}"
        )
    return nk.add(x, nk.reshape(mat, (mat.shape[1],)))


def shift_tf(
    x: Tensor, instruction: Instruction, store: ParamStore, prefix: str, heads: int
) -> Tensor:
    """Run one decoder block with ``x`` as the target stream and the
    instruction rows as memory; shape-preserving."""
    if instruction.width != x.shape[1]:
        raise DimensionError(
            f"transformer shift width mismatch: stream {x.shape} vs instruction {instruction.matrix.shape}"
        )
    return decoder_block(x, instruction.matrix, store, f"{prefix}.block", heads)


def pixel_shuffle(f: Tensor, g: int) -> Tensor:
    """(H, W, C) -> (H/g, W/g, C*g*g), concatenating each g x g spatial
    block's channels row-major; exactly invertible."""
    if f.ndim != 3:
        raise DimensionError(f"pixel_shuffle expects a 3-D tensor, got {f.shape}")
    h, w, c = f.shape
    if h % g or w % g:
        raise DimensionError(f"extent {h}x{w} not divisible by shuffle factor {g}")
    t = nk.reshape(f, (h // g, g, w // g, g, c))
    t = nk.transpose(t, (0, 2, 1, 3, 4))
    return nk.reshape(t, (h // g, w // g, g * g * c))


def pixel_unshuffle(f: Tensor, g: int) -> Tensor:
    if f.ndim != 3:
        raise DimensionError(f"pixel_unshuffle expects a 3-D tensor, got {f.shape}")
    h, w, c = f.shape
    if c % (g * g):
        raise DimensionError(f"channel count {c} not divisible by {g * g}")
    t = nk.reshape(f, (h, w, g, g, c // (g * g)))
    t = nk.transpose(t, (0, 2, 1, 3, 4))
    return nk.reshape(t, (h * g, w * g, c // (g * g)))


def apply_shift(
    x: Tensor,
    instruction: Instruction,
    store: ParamStore,
    cfg: DistributionConfig,
    *,
    bev_shape: tuple[int, int],
    prefix: str = "sh",
) -> Tensor:
    """Route ``x`` (rows of the targeted stream) through the configured
    mechanism. For feature-target transformer shifts, ``x`` is reshaped to
    the (bev_h, bev_w) grid, shuffled to the transformer width, shifted, and
    shuffled back."""
    if cfg.mode is ShiftMode.BIAS:
        return shift_bias(x, instruction)
    if cfg.target is ShiftTarget.Q_BEV:
        u = nk.matmul(x, store[f"{prefix}.up.w"])
        u = shift_tf(u, instruction, store, prefix, cfg.heads)
        return nk.matmul(u, store[f"{prefix}.down.w"])
    bh, bw = bev_shape
    g = cfg.shuffle_factor
    grid = nk.reshape(x, (bh, bw, cfg.dim_sm))
    packed = pixel_shuffle(grid, g)
    rows = nk.reshape(packed, ((bh // g) * (bw // g), cfg.dim_tf))
    shifted = shift_tf(rows, instruction, store, prefix, cfg.heads)
    unpacked = pixel_unshuffle(nk.reshape(shifted, (bh // g, bw // g, cfg.dim_tf)), g)
    return nk.reshape(unpacked, (bh * bw, cfg.dim_sm))
