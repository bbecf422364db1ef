"""Shared transformer building blocks and their initializers."""

from __future__ import annotations

import numpy as np

from . import numkit as nk
from .numkit import ParamStore, Tensor


def init_linear(store: ParamStore, name: str, fan_in: int, fan_out: int, rng, scale=0.02, zero=False):
    store.add(f"{name}.w", np.zeros((fan_in, fan_out)) if zero else rng.normal(0.0, scale, (fan_in, fan_out)))
    store.add(f"{name}.b", np.zeros(fan_out))


def init_norm(store: ParamStore, name: str, dim: int):
    store.add(f"{name}.g", np.ones(dim))
    store.add(f"{name}.b", np.zeros(dim))


def init_attn(store: ParamStore, prefix: str, dim: int, rng, scale=0.02, zero_out=False):
    for part in ("q", "k", "v"):
        init_linear(store, f"{prefix}.{part}", dim, dim, rng, scale)
    init_linear(store, f"{prefix}.o", dim, dim, rng, scale, zero=zero_out)


def attn_params(store: ParamStore, prefix: str) -> dict:
    return {
        "wq": store[f"{prefix}.q.w"],
        "bq": store[f"{prefix}.q.b"],
        "wk": store[f"{prefix}.k.w"],
        "bk": store[f"{prefix}.k.b"],
        "wv": store[f"{prefix}.v.w"],
        "bv": store[f"{prefix}.v.b"],
        "wo": store[f"{prefix}.o.w"],
        "bo": store[f"{prefix}.o.b"],
    }


def linear(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return nk.add(nk.matmul(x, store[f"{name}.w"]), store[f"{name}.b"])


def norm(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return nk.layer_norm(x, store[f"{name}.g"], store[f"{name}.b"])


def init_decoder_block(store: ParamStore, prefix: str, dim: int, rng, zero_final=False):
    """One pre-norm cross-attention + MLP block. The MLP doubles the width,
    applies SiLU, normalizes, and projects back. With ``zero_final`` the
    attention output and MLP output projections start at zero, so the block
    is the identity at initialization."""
    init_norm(store, f"{prefix}.ln1", dim)
    init_attn(store, f"{prefix}.attn", dim, rng, zero_out=zero_final)
    init_norm(store, f"{prefix}.ln2", dim)
    init_linear(store, f"{prefix}.mlp.fc1", dim, 2 * dim, rng)
    init_norm(store, f"{prefix}.mlp.ln", 2 * dim)
    init_linear(store, f"{prefix}.mlp.fc2", 2 * dim, dim, rng, zero=zero_final)


def decoder_block(x: Tensor, memory: Tensor, store: ParamStore, prefix: str, heads: int) -> Tensor:
    """Apply the block initialized by :func:`init_decoder_block`. ``x`` rows
    attend over ``memory`` rows; residuals wrap both sublayers."""
    a = nk.mha_cross(norm(x, store, f"{prefix}.ln1"), memory, attn_params(store, f"{prefix}.attn"), heads)
    x = nk.add(x, a)
    h = linear(norm(x, store, f"{prefix}.ln2"), store, f"{prefix}.mlp.fc1")
    h = norm(nk.silu(h), store, f"{prefix}.mlp.ln")
    h = linear(h, store, f"{prefix}.mlp.fc2")
    return nk.add(x, h)
