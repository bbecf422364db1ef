"""Toy query-based driving planner in the fast-model role.

Learnable spatial queries cross-attend over the public raster to form a
feature grid; one head scores per-cell occupancy, another decodes an ego
trajectory from trajectory queries attending the features plus an embedded
ego history. The adapter can shift either the queries (before encoding) or
the features (after encoding). The encoder statically rejects privileged
views: hidden intent information can only arrive through the instruction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .blocks import attn_params, init_attn, init_linear, init_norm, linear, norm
from .errors import ConfigurationError, PrivilegeError
from .numkit import ParamStore, Tensor
from .worldgen import PUBLIC_CHANNELS, RasterView, Scenario, Trajectory


@dataclass(frozen=True)
class SmConfig:
    dim: int = 32
    bev_h: int = 8
    bev_w: int = 8
    heads: int = 4
    horizon: int = 6
    history_len: int = 2
    patch: int = 4
    mlp_mult: int = 2
    world_h: int = 16
    world_w: int = 16
    lambda_occ: float = 0.5

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.world_h % self.patch or self.world_w % self.patch:
            raise ConfigurationError(f"patch {self.patch} does not tile the world grid")
        if self.world_h % self.bev_h or self.world_w % self.bev_w:
            raise ConfigurationError("spatial query grid must tile the world grid")

    @property
    def num_queries(self) -> int:
        return self.bev_h * self.bev_w

    @property
    def num_patches(self) -> int:
        return (self.world_h // self.patch) * (self.world_w // self.patch)

    @property
    def patch_dim(self) -> int:
        return PUBLIC_CHANNELS * self.patch * self.patch


@dataclass
class SmOutput:
    waypoints: Tensor  # (horizon, 2) in cell units
    occupancy_logits: Tensor  # (bev_h, bev_w)

    def trajectory(self) -> Trajectory:
        return Trajectory(tuple((float(r), float(c)) for r, c in self.waypoints.data))


def init_sm(store: ParamStore, cfg: SmConfig, rng: np.random.Generator, prefix: str = "sm") -> None:
    store.add(f"{prefix}.q_bev", rng.normal(0.0, 0.02, (cfg.num_queries, cfg.dim)))
    init_linear(store, f"{prefix}.patch", cfg.patch_dim, cfg.dim, rng)
    store.add(f"{prefix}.patch_pos", rng.normal(0.0, 0.02, (cfg.num_patches, cfg.dim)))
    for block in ("enc", "plan"):
        base = f"{prefix}.{block}"
        init_norm(store, f"{base}.ln1", cfg.dim)
        init_attn(store, f"{base}.attn", cfg.dim, rng)
        init_norm(store, f"{base}.ln2", cfg.dim)
        init_linear(store, f"{base}.mlp.fc1", cfg.dim, cfg.mlp_mult * cfg.dim, rng)
        init_linear(store, f"{base}.mlp.fc2", cfg.mlp_mult * cfg.dim, cfg.dim, rng)
    store.add(f"{prefix}.traj_q", rng.normal(0.0, 0.02, (cfg.horizon, cfg.dim)))
    init_linear(store, f"{prefix}.hist", 2 * cfg.history_len, cfg.dim, rng)
    init_linear(store, f"{prefix}.occ", cfg.dim, 1, rng)
    init_linear(store, f"{prefix}.out", cfg.dim, 2, rng)


def _block(x: Tensor, memory: Tensor, store: ParamStore, base: str, heads: int) -> Tensor:
    a = nk.mha_cross(norm(x, store, f"{base}.ln1"), memory, attn_params(store, f"{base}.attn"), heads)
    x = nk.add(x, a)
    h = nk.silu(linear(norm(x, store, f"{base}.ln2"), store, f"{base}.mlp.fc1"))
    return nk.add(x, linear(h, store, f"{base}.mlp.fc2"))


def encode_bev(
    view: RasterView, queries: Tensor, store: ParamStore, cfg: SmConfig, prefix: str = "sm"
) -> Tensor:
    """Cross-attend the (possibly shifted) spatial queries over raster patch
    embeddings; rejects privileged views outright."""
    if view.privileged:
        raise PrivilegeError("the fast model must not read the privileged view")
    c, h, w = view.channels.shape
    p = cfg.patch
    blocks = view.channels.data.reshape(c, h // p, p, w // p, p).transpose(1, 3, 0, 2, 4)
    patches = Tensor(np.ascontiguousarray(blocks.reshape(cfg.num_patches, cfg.patch_dim)))
    memory = nk.add(linear(patches, store, f"{prefix}.patch"), store[f"{prefix}.patch_pos"])
    return _block(queries, memory, store, f"{prefix}.enc", cfg.heads)


def decode_heads(
    f_bev: Tensor, history: tuple[tuple[int, int], ...], store: ParamStore, cfg: SmConfig, prefix: str = "sm"
) -> SmOutput:
    """Occupancy logits per feature cell plus an ego-anchored trajectory.

    ``history`` holds the trailing ego cells (most recent last); waypoints
    are decoded as offsets from the current cell.
    """
    occ = linear(f_bev, store, f"{prefix}.occ")
    occ = nk.reshape(occ, (cfg.bev_h, cfg.bev_w))

    coords = np.asarray(history[-cfg.history_len :], dtype=np.float64)
    if coords.shape[0] < cfg.history_len:
        coords = np.vstack([np.repeat(coords[:1], cfg.history_len - coords.shape[0], 0), coords])
    scaled = coords / np.asarray([cfg.world_h, cfg.world_w], dtype=np.float64)
    hist_row = linear(Tensor(scaled.reshape(1, -1)), store, f"{prefix}.hist")
    memory = nk.concat([f_bev, hist_row], axis=0)
    q = _block(store[f"{prefix}.traj_q"], memory, store, f"{prefix}.plan", cfg.heads)
    anchor = np.asarray(history[-1], dtype=np.float64)
    waypoints = nk.add(linear(q, store, f"{prefix}.out"), Tensor(anchor))
    return SmOutput(waypoints=waypoints, occupancy_logits=occ)


def occupancy_target(s: Scenario, cfg: SmConfig) -> np.ndarray:
    """Anchor-tick obstacle occupancy pooled onto the feature grid."""
    target = np.zeros((cfg.bev_h, cfg.bev_w))
    rh, rw = s.height // cfg.bev_h, s.width // cfg.bev_w
    for ob in s.obstacles:
        target[ob.cell[0] // rh, ob.cell[1] // rw] = 1.0
    return target


def sm_loss(out: SmOutput, gt: Trajectory, s: Scenario, cfg: SmConfig) -> Tensor:
    """Mean squared waypoint error plus weighted occupancy cross-entropy."""
    traj = nk.mse(out.waypoints, Tensor(gt.as_array()))
    if cfg.lambda_occ == 0.0:
        return traj
    occ = nk.bce_with_logits(out.occupancy_logits, occupancy_target(s, cfg))
    return nk.add(traj, nk.scale(occ, cfg.lambda_occ))
