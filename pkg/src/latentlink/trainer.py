"""Training protocol at desk scale: caption pretraining for the reasoner,
baseline pretraining for the planner, then few-epoch joint fine-tuning of the
adapter (and optionally either model, per freeze flags) with gradient
accumulation under a cosine schedule. Fine-tuning draws each instruction from
a randomly staled (or dropped) source frame to mimic asynchronous serving."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .collector import CollectionMode
from .errors import UsageError
from .gm import CATEGORIES, GmConfig, caption_tokens, category_token, decode_step, gm_caption_loss, init_gm, intent_token, nearest_obstacle
from .numkit import CosineSchedule, ParamStore, sgd_step
from .pipeline import EvalCache, System, gm_bundle, instruction_for, rollout_for, sample_category, sm_forward, validate_system
from .scheduler import staleness_sampler
from .sm import SmConfig, decode_heads, encode_bev, init_sm, sm_loss
from .worldgen import INTENT_STOP, FrameState, Scenario, rasterize


@dataclass(frozen=True)
class FreezeSpec:
    freeze_gm: bool = True
    freeze_sm: bool = False


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    accumulation_steps: int = 8
    base_lr: float = 0.05
    min_lr: float = 0.0
    weight_decay: float = 0.02
    seed: int = 0
    category_policy: str = "uniform"
    staleness_window: int = 8
    p_drop: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.accumulation_steps < 1:
            raise UsageError("epochs and accumulation_steps must be >= 1")


def _optimize(store: ParamStore, n_examples: int, loss_at, cfg: TrainConfig,
              rng: np.random.Generator) -> list[dict]:
    """Shuffled epochs of micro-batches: accumulate scaled gradients over
    ``accumulation_steps`` examples, then one decayed step on the cosine
    schedule. Returns one curve row per optimizer step."""
    steps_per_epoch = math.ceil(n_examples / cfg.accumulation_steps)
    schedule = CosineSchedule(cfg.base_lr, total_steps=max(1, cfg.epochs * steps_per_epoch), min_lr=cfg.min_lr)
    rows = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n_examples)
        for start in range(0, n_examples, cfg.accumulation_steps):
            batch = order[start : start + cfg.accumulation_steps]
            total = 0.0
            for idx in batch:
                loss = nk.scale(loss_at(int(idx)), 1.0 / len(batch))
                nk.backward(loss)
                total += loss.item()
            lr = schedule.lr(step)
            sgd_step(store, lr, cfg.weight_decay)
            rows.append({"step": step, "loss": total, "lr": lr})
            step += 1
    return rows


# ---------------------------------------------------------------------------
# reasoner caption pretraining
# ---------------------------------------------------------------------------


def caption_corpus(scenarios: list[Scenario]) -> list[tuple[Scenario, str, list[int]]]:
    """All four prompt categories per scenario, captions precomputed."""
    examples = []
    for s in scenarios:
        for cat in CATEGORIES:
            examples.append((s, cat, caption_tokens(s, cat)))
    return examples


def pretrain_gm(scenarios: list[Scenario], gm_cfg: GmConfig, cfg: TrainConfig) -> tuple[ParamStore, list[dict]]:
    if not scenarios:
        raise UsageError("empty pretraining corpus")
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    store = ParamStore()
    init_gm(store, gm_cfg, rng)
    examples = caption_corpus(scenarios)
    views = {}

    def loss_at(idx: int):
        s, cat, caption = examples[idx]
        if s.seed not in views:
            views[s.seed] = rasterize(s, privileged=True)
        return gm_caption_loss(store, gm_cfg, views[s.seed], category_token(cat), caption)

    rows = _optimize(store, len(examples), loss_at, cfg, rng)
    return store, rows


def intent_accuracy(store: ParamStore, gm_cfg: GmConfig, scenarios: list[Scenario]) -> float:
    """Fraction of scenarios whose greedily decoded first token under the
    prediction prompt names the nearest obstacle's intent."""
    if not scenarios:
        raise UsageError("empty evaluation set")
    hits = 0
    for s in scenarios:
        view = rasterize(s, privileged=True)
        tok, _ = decode_step(store, gm_cfg, view, [category_token("prediction")])
        ob = nearest_obstacle(s)
        if tok == intent_token(ob.intent if ob else INTENT_STOP):
            hits += 1
    return hits / len(scenarios)


# ---------------------------------------------------------------------------
# planner baseline pretraining
# ---------------------------------------------------------------------------


def planning_examples(
    scenarios: list[Scenario],
    episode_frames: int,
    frames_per_scenario: int,
    history_len: int,
    seed: int,
    cache: EvalCache | None = None,
) -> list[tuple[list[FrameState], int]]:
    """Expand scenarios into (rollout, frame index) pairs so training covers
    mid-episode states, not just the initial frame."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    out = []
    for s in scenarios:
        states = rollout_for(s, episode_frames, history_len, cache)
        count = min(frames_per_scenario, episode_frames)
        picks = sorted(rng.choice(episode_frames, size=count, replace=False))
        for f in picks:
            out.append((states, int(f)))
    return out


def pretrain_sm(
    scenarios: list[Scenario],
    sm_cfg: SmConfig,
    cfg: TrainConfig,
    *,
    episode_frames: int = 12,
    frames_per_scenario: int = 2,
    cache: EvalCache | None = None,
) -> tuple[ParamStore, list[dict]]:
    if not scenarios:
        raise UsageError("empty pretraining corpus")
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    store = ParamStore()
    init_sm(store, sm_cfg, rng)
    examples = planning_examples(scenarios, episode_frames, frames_per_scenario, sm_cfg.history_len, cfg.seed, cache)

    def loss_at(idx: int):
        states, f = examples[idx]
        frame = states[f]
        view = rasterize(frame.scenario, privileged=False)
        f_bev = encode_bev(view, store["sm.q_bev"], store, sm_cfg)
        out = decode_heads(f_bev, frame.history, store, sm_cfg)
        return sm_loss(out, frame.oracle, frame.scenario, sm_cfg)

    rows = _optimize(store, len(examples), loss_at, cfg, rng)
    return store, rows


# ---------------------------------------------------------------------------
# joint fine-tuning
# ---------------------------------------------------------------------------


def finetune_joint(
    system: System,
    scenarios: list[Scenario],
    freeze: FreezeSpec,
    cfg: TrainConfig,
    *,
    episode_frames: int = 12,
    frames_per_scenario: int = 2,
    cache: EvalCache | None = None,
) -> list[dict]:
    """Fine-tune the attached system in place. Each step picks a staled
    source frame (or none) for the instruction, runs the shifted planner on
    the current frame, and accumulates planning-loss gradients. Frozen
    prefixes receive zero updates throughout."""
    if not scenarios:
        raise UsageError("empty fine-tuning corpus")
    validate_system(system)
    store = system.store
    store.freeze("gm", freeze.freeze_gm)
    store.freeze("sm", freeze.freeze_sm)
    store.freeze("tr", False)  # adapter parameters always train
    if any(name.startswith("sh.") for name in store.names()):
        store.freeze("sh", False)
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    bundle_cache = cache if freeze.freeze_gm else None
    examples = planning_examples(
        scenarios, episode_frames, frames_per_scenario, system.sm_cfg.history_len, cfg.seed, cache
    )

    def loss_at(idx: int):
        states, f = examples[idx]
        frame = states[f]
        source = staleness_sampler(f, cfg.staleness_window, cfg.p_drop, rng)
        if source is None:
            instruction = instruction_for(system, None)
        else:
            category = sample_category(cfg.category_policy, rng)
            bundle = gm_bundle(
                system, states[source].scenario, source, category,
                detach=freeze.freeze_gm, cache=bundle_cache,
            )
            instruction = instruction_for(system, bundle)
        out = sm_forward(system, frame, instruction)
        return sm_loss(out, frame.oracle, frame.scenario, system.sm_cfg)

    return _optimize(store, len(examples), loss_at, cfg, rng)
