"""Toy autoregressive transformer in the slow-reasoner role.

Conditioned on a privileged raster and a prompt-category token, it decodes a
short structured caption greedily while exposing the hidden state of every
layer at each decode step. Decoding can be stopped after a fixed number of
tokens, so harvesting cost is independent of the full answer length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .blocks import attn_params, init_attn, init_linear, init_norm
from .errors import ConfigurationError, UsageError
from .numkit import ParamStore, Tensor
from .worldgen import (
    HEADING_VECTORS,
    INTENT_CHANNELS,
    INTENT_STOP,
    INTENTS,
    PUBLIC_CHANNELS,
    Obstacle,
    RasterView,
    Scenario,
    Trajectory,
    oracle_plan,
    survival_plan,
)

# ---------------------------------------------------------------------------
# token table
# ---------------------------------------------------------------------------

CATEGORIES = ("perception", "prediction", "behavior", "planning")
MANEUVERS = ("stay", "up", "right", "down", "left")
DIRECTIONS = ("here", "n", "ne", "e", "se", "s", "sw", "w", "nw")
ATTRIBUTES = ("red", "blue", "green", "white", "truck", "bike")
MAX_COUNT = 8

_CATEGORY_BASE = 0
_INTENT_BASE = _CATEGORY_BASE + len(CATEGORIES)
_MANEUVER_BASE = _INTENT_BASE + len(INTENTS)
_DIRECTION_BASE = _MANEUVER_BASE + len(MANEUVERS)
_ATTRIBUTE_BASE = _DIRECTION_BASE + len(DIRECTIONS)
_COUNT_BASE = _ATTRIBUTE_BASE + len(ATTRIBUTES)
END_TOKEN = _COUNT_BASE + MAX_COUNT + 1
VOCAB_SIZE = END_TOKEN + 1


def category_token(name: str) -> int:
    return _CATEGORY_BASE + CATEGORIES.index(name)


def intent_token(intent: str) -> int:
    return _INTENT_BASE + INTENTS.index(intent)


def maneuver_token(name: str) -> int:
    return _MANEUVER_BASE + MANEUVERS.index(name)


def direction_token(name: str) -> int:
    return _DIRECTION_BASE + DIRECTIONS.index(name)


def attribute_token(name: str) -> int:
    return _ATTRIBUTE_BASE + ATTRIBUTES.index(name)


def count_token(n: int) -> int:
    return _COUNT_BASE + min(n, MAX_COUNT)


def token_name(tok: int) -> str:
    if tok == END_TOKEN:
        return "end"
    for base, names, tag in (
        (_CATEGORY_BASE, CATEGORIES, "q"),
        (_INTENT_BASE, INTENTS, "intent"),
        (_MANEUVER_BASE, MANEUVERS, "move"),
        (_DIRECTION_BASE, DIRECTIONS, "dir"),
        (_ATTRIBUTE_BASE, ATTRIBUTES, "attr"),
    ):
        if base <= tok < base + len(names):
            return f"{tag}_{names[tok - base]}"
    if _COUNT_BASE <= tok <= _COUNT_BASE + MAX_COUNT:
        return f"count_{tok - _COUNT_BASE}"
    raise UsageError(f"token id {tok} outside vocabulary")


# ---------------------------------------------------------------------------
# captions
# ---------------------------------------------------------------------------


def nearest_obstacle(s: Scenario) -> Obstacle | None:
    if not s.obstacles:
        return None
    return min(
        s.obstacles,
        key=lambda ob: (abs(ob.cell[0] - s.ego[0]) + abs(ob.cell[1] - s.ego[1]), ob.cell),
    )


def _first_move_maneuver(s: Scenario, plan: Trajectory | None) -> str:
    if plan is None:
        try:
            plan = oracle_plan(s)
        except Exception:
            plan = survival_plan(s)
    first = (int(plan.waypoints[0][0]), int(plan.waypoints[0][1]))
    move = (first[0] - s.ego[0], first[1] - s.ego[1])
    if move == (0, 0):
        return "stay"
    return MANEUVERS[1 + HEADING_VECTORS.index(move)]


def _goal_direction(s: Scenario) -> str:
    dr = int(np.sign(s.goal[0] - s.ego[0]))
    dc = int(np.sign(s.goal[1] - s.ego[1]))
    table = {
        (0, 0): "here",
        (-1, 0): "n",
        (-1, 1): "ne",
        (0, 1): "e",
        (1, 1): "se",
        (1, 0): "s",
        (1, -1): "sw",
        (0, -1): "w",
        (-1, -1): "nw",
    }
    return table[(dr, dc)]


def caption_tokens(s: Scenario, category: str, plan: Trajectory | None = None) -> list[int]:
    """Ground-truth caption (end token included) for one prompt category.

    perception: obstacle count plus two distractor attribute tokens;
    prediction: intent of the obstacle nearest to the ego;
    behavior:   the expert's first move; planning: goal direction.
    """
    if category == "perception":
        rng = np.random.default_rng(np.random.PCG64(s.seed * 31 + 7))
        attrs = rng.choice(len(ATTRIBUTES), size=2, replace=False)
        return [
            count_token(len(s.obstacles)),
            attribute_token(ATTRIBUTES[attrs[0]]),
            attribute_token(ATTRIBUTES[attrs[1]]),
            END_TOKEN,
        ]
    if category == "prediction":
        ob = nearest_obstacle(s)
        return [intent_token(ob.intent if ob else INTENT_STOP), END_TOKEN]
    if category == "behavior":
        return [maneuver_token(_first_move_maneuver(s, plan)), END_TOKEN]
    if category == "planning":
        return [direction_token(_goal_direction(s)), END_TOKEN]
    raise UsageError(f"unknown prompt category {category!r}")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GmConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    patch: int = 2
    max_tokens: int = 8
    mlp_mult: int = 4
    world_h: int = 16
    world_w: int = 16

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ConfigurationError("need at least one layer")
        if self.world_h % self.patch or self.world_w % self.patch:
            raise ConfigurationError(
                f"patch {self.patch} does not tile {self.world_h}x{self.world_w}"
            )

    @property
    def vocab(self) -> int:
        return VOCAB_SIZE

    @property
    def num_patches(self) -> int:
        return (self.world_h // self.patch) * (self.world_w // self.patch)

    @property
    def patch_dim(self) -> int:
        return (PUBLIC_CHANNELS + INTENT_CHANNELS) * self.patch * self.patch


@dataclass
class LatentRecord:
    """Per decoded token, the last-position output of every layer."""

    hiddens: list[list[Tensor]]  # [token][layer], each shaped (dim,)
    tokens: list[int]
    num_layers: int
    dim: int

    @property
    def decode_step_count(self) -> int:
        return len(self.tokens)

    def detach(self) -> "LatentRecord":
        return LatentRecord(
            hiddens=[[h.detach() for h in per_tok] for per_tok in self.hiddens],
            tokens=list(self.tokens),
            num_layers=self.num_layers,
            dim=self.dim,
        )


def init_gm(store: ParamStore, cfg: GmConfig, rng: np.random.Generator, prefix: str = "gm") -> None:
    init_linear(store, f"{prefix}.patch", cfg.patch_dim, cfg.dim, rng)
    store.add(f"{prefix}.patch_pos", rng.normal(0.0, 0.02, (cfg.num_patches, cfg.dim)))
    store.add(f"{prefix}.tok_emb", rng.normal(0.0, 0.02, (cfg.vocab, cfg.dim)))
    store.add(f"{prefix}.tok_pos", rng.normal(0.0, 0.02, (cfg.max_tokens + 1, cfg.dim)))
    for layer in range(cfg.layers):
        base = f"{prefix}.L{layer}"
        init_norm(store, f"{base}.ln1", cfg.dim)
        init_attn(store, f"{base}.attn", cfg.dim, rng)
        init_norm(store, f"{base}.ln2", cfg.dim)
        init_linear(store, f"{base}.mlp.fc1", cfg.dim, cfg.mlp_mult * cfg.dim, rng)
        init_linear(store, f"{base}.mlp.fc2", cfg.mlp_mult * cfg.dim, cfg.dim, rng)
    init_norm(store, f"{prefix}.lnf", cfg.dim)
    init_linear(store, f"{prefix}.head", cfg.dim, cfg.vocab, rng)


_MASK_CACHE: dict[int, Tensor] = {}


def _causal_mask(size: int) -> Tensor:
    if size not in _MASK_CACHE:
        m = np.triu(np.full((size, size), -1e30), k=1)
        _MASK_CACHE[size] = Tensor(m)
    return _MASK_CACHE[size]


def patchify(view: RasterView, patch: int) -> np.ndarray:
    c, h, w = view.channels.shape
    blocks = view.channels.data.reshape(c, h // patch, patch, w // patch, patch)
    blocks = blocks.transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(blocks.reshape((h // patch) * (w // patch), c * patch * patch))


def _forward_layers(
    store: ParamStore, cfg: GmConfig, view: RasterView, token_ids: list[int], prefix: str
) -> tuple[list[Tensor], int]:
    """Run all transformer blocks; returns each block's full output sequence
    and the patch count (token rows start there)."""
    if not view.privileged:
        raise UsageError("the reasoner is conditioned on the privileged view")
    patches = Tensor(patchify(view, cfg.patch))
    p_emb = nk.add(
        nk.add(nk.matmul(patches, store[f"{prefix}.patch.w"]), store[f"{prefix}.patch.b"]),
        store[f"{prefix}.patch_pos"],
    )
    ids = np.asarray(token_ids, dtype=np.int64)
    t_emb = nk.add(
        nk.take_rows(store[f"{prefix}.tok_emb"], ids),
        nk.narrow(store[f"{prefix}.tok_pos"], 0, 0, len(token_ids)),
    )
    x = nk.concat([p_emb, t_emb], axis=0)
    seq = x.shape[0]
    mask = _causal_mask(seq)
    outputs = []
    for layer in range(cfg.layers):
        base = f"{prefix}.L{layer}"
        normed = nk.layer_norm(x, store[f"{base}.ln1.g"], store[f"{base}.ln1.b"])
        x = nk.add(x, nk.mha_self(normed, attn_params(store, f"{base}.attn"), cfg.heads, mask))
        normed = nk.layer_norm(x, store[f"{base}.ln2.g"], store[f"{base}.ln2.b"])
        h = nk.silu(nk.add(nk.matmul(normed, store[f"{base}.mlp.fc1.w"]), store[f"{base}.mlp.fc1.b"]))
        h = nk.add(nk.matmul(h, store[f"{base}.mlp.fc2.w"]), store[f"{base}.mlp.fc2.b"])
        x = nk.add(x, h)
        outputs.append(x)
    return outputs, cfg.num_patches


def _logits(store: ParamStore, cfg: GmConfig, rows: Tensor, prefix: str) -> Tensor:
    normed = nk.layer_norm(rows, store[f"{prefix}.lnf.g"], store[f"{prefix}.lnf.b"])
    return nk.add(nk.matmul(normed, store[f"{prefix}.head.w"]), store[f"{prefix}.head.b"])


def decode_step(
    store: ParamStore, cfg: GmConfig, view: RasterView, prefix_ids: list[int], prefix: str = "gm"
) -> tuple[int, list[Tensor]]:
    """Greedy-decode one token; returns (token id, per-layer hidden vectors
    at the last position)."""
    if not prefix_ids:
        raise UsageError("prefix must start with a prompt-category token")
    layers, _ = _forward_layers(store, cfg, view, prefix_ids, prefix)
    seq = layers[-1].shape[0]
    hiddens = [nk.reshape(nk.narrow(x, 0, seq - 1, 1), (cfg.dim,)) for x in layers]
    logits = _logits(store, cfg, nk.narrow(layers[-1], 0, seq - 1, 1), prefix)
    return int(np.argmax(logits.data[0])), hiddens


def generate(
    store: ParamStore,
    cfg: GmConfig,
    view: RasterView,
    prompt_token: int,
    early_stop_after: int | None = None,
    prefix: str = "gm",
) -> tuple[LatentRecord, list[int]]:
    """Greedy decoding until the end token, max_tokens, or early stop.

    The returned record holds exactly decode_step_count * layers hidden
    vectors; with early_stop_after=1 a single decode step runs regardless of
    the full answer length.
    """
    if early_stop_after is not None and not (1 <= early_stop_after <= cfg.max_tokens):
        raise UsageError(f"early_stop_after {early_stop_after} outside [1, {cfg.max_tokens}]")
    limit = early_stop_after if early_stop_after is not None else cfg.max_tokens
    ids = [prompt_token]
    record = LatentRecord(hiddens=[], tokens=[], num_layers=cfg.layers, dim=cfg.dim)
    while len(record.tokens) < limit:
        tok, hiddens = decode_step(store, cfg, view, ids, prefix)
        record.tokens.append(tok)
        record.hiddens.append(hiddens)
        ids.append(tok)
        if tok == END_TOKEN:
            break
    return record, list(record.tokens)


def gm_caption_loss(
    store: ParamStore,
    cfg: GmConfig,
    view: RasterView,
    prompt_token: int,
    target_ids: list[int],
    prefix: str = "gm",
) -> Tensor:
    """Teacher-forced cross-entropy over all caption positions."""
    if not target_ids:
        raise UsageError("empty caption")
    if len(target_ids) > cfg.max_tokens:
        raise UsageError(f"caption length {len(target_ids)} exceeds max_tokens {cfg.max_tokens}")
    ids = [prompt_token] + list(target_ids[:-1])
    layers, patches = _forward_layers(store, cfg, view, ids, prefix)
    rows = nk.narrow(layers[-1], 0, patches, len(ids))
    return nk.cross_entropy(_logits(store, cfg, rows, prefix), target_ids)


def masked_view(view: RasterView) -> RasterView:
    """Zero every input feature while keeping the shape (probing robustness
    to an uninformed reasoner)."""
    return RasterView(channels=Tensor(np.zeros_like(view.channels.data)), privileged=view.privileged)
