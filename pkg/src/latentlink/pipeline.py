"""End-to-end wiring: the slow reasoner, the adapter stages and the fast
planner assembled around one parameter store, plus caches that avoid
recomputing frozen-reasoner work during evaluation sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .collector import CollectionMode, LatentBundle, collect, detach_bundle, empty_bundle
from .distributor import DistributionConfig, ShiftTarget, apply_shift, init_shift
from .errors import ConfigurationError
from .gm import CATEGORIES, GmConfig, category_token, generate, init_gm, masked_view
from .numkit import ParamStore, Tensor
from .sm import SmConfig, SmOutput, decode_heads, encode_bev, init_sm
from .translator import Instruction, TranslatorConfig, init_translator, translate
from .worldgen import FrameState, Scenario, WorldConfig, expert_rollout, rasterize


@dataclass
class System:
    store: ParamStore
    gm_cfg: GmConfig
    sm_cfg: SmConfig
    tr_cfg: TranslatorConfig
    dist_cfg: DistributionConfig
    collection: CollectionMode = CollectionMode.FIRST_TOKEN_ALL_LAYERS
    last_l: int | None = None
    attached: bool = True  # False: run the bare fast model
    gm_masked: bool = False

    def detached(self) -> "System":
        """A view of the same parameters with the adapter unplugged."""
        return System(
            store=self.store,
            gm_cfg=self.gm_cfg,
            sm_cfg=self.sm_cfg,
            tr_cfg=self.tr_cfg,
            dist_cfg=self.dist_cfg,
            collection=self.collection,
            last_l=self.last_l,
            attached=False,
            gm_masked=self.gm_masked,
        )


def translator_config_for(gm_cfg: GmConfig, dist_cfg: DistributionConfig, heads: int = 4,
                          use_layer_embedding: bool = True) -> TranslatorConfig:
    """Width contract: instruction shape is pinned by the distribution mode."""
    return TranslatorConfig(
        dim_gm=gm_cfg.dim,
        num_layers=gm_cfg.layers,
        roller_num=dist_cfg.instruction_rows,
        dim_out=dist_cfg.instruction_width,
        heads=heads,
        use_layer_embedding=use_layer_embedding,
    )


def init_system(
    seed: int,
    gm_cfg: GmConfig,
    sm_cfg: SmConfig,
    dist_cfg: DistributionConfig,
    collection: CollectionMode = CollectionMode.FIRST_TOKEN_ALL_LAYERS,
    *,
    tr_heads: int = 4,
    use_layer_embedding: bool = True,
    last_l: int | None = None,
) -> System:
    rng = np.random.default_rng(np.random.PCG64(seed))
    store = ParamStore()
    init_gm(store, gm_cfg, rng)
    init_sm(store, sm_cfg, rng)
    tr_cfg = translator_config_for(gm_cfg, dist_cfg, tr_heads, use_layer_embedding)
    init_translator(store, tr_cfg, rng)
    init_shift(store, dist_cfg, rng)
    system = System(
        store=store,
        gm_cfg=gm_cfg,
        sm_cfg=sm_cfg,
        tr_cfg=tr_cfg,
        dist_cfg=dist_cfg,
        collection=collection,
        last_l=last_l,
    )
    validate_system(system)
    return system


def validate_system(system: System) -> None:
    """Cross-module width checks; raised before any tick runs."""
    problems = []
    if system.tr_cfg.dim_gm != system.gm_cfg.dim:
        problems.append(f"translator dim_gm {system.tr_cfg.dim_gm} != reasoner dim {system.gm_cfg.dim}")
    if system.tr_cfg.num_layers != system.gm_cfg.layers:
        problems.append(
            f"translator layer count {system.tr_cfg.num_layers} != reasoner layers {system.gm_cfg.layers}"
        )
    if system.tr_cfg.dim_out != system.dist_cfg.instruction_width:
        problems.append(
            f"instruction width {system.tr_cfg.dim_out} != distribution width {system.dist_cfg.instruction_width}"
        )
    if system.tr_cfg.roller_num != system.dist_cfg.instruction_rows:
        problems.append(
            f"instruction rows {system.tr_cfg.roller_num} != distribution rows {system.dist_cfg.instruction_rows}"
        )
    if system.dist_cfg.dim_sm != system.sm_cfg.dim:
        problems.append(f"distribution dim_sm {system.dist_cfg.dim_sm} != planner dim {system.sm_cfg.dim}")
    if system.dist_cfg.target is ShiftTarget.F_BEV and (
        system.sm_cfg.bev_h % system.dist_cfg.shuffle_factor
        or system.sm_cfg.bev_w % system.dist_cfg.shuffle_factor
    ):
        problems.append("shuffle factor does not tile the feature grid")
    if (system.gm_cfg.world_h, system.gm_cfg.world_w) != (system.sm_cfg.world_h, system.sm_cfg.world_w):
        problems.append("reasoner and planner disagree on the world extent")
    if problems:
        raise ConfigurationError("; ".join(problems))


# ---------------------------------------------------------------------------
# caches (valid only while the reasoner parameters stay frozen)
# ---------------------------------------------------------------------------


@dataclass
class EvalCache:
    bundles: dict = field(default_factory=dict)
    rollouts: dict = field(default_factory=dict)


def rollout_for(scenario: Scenario, frames: int, history_len: int, cache: EvalCache | None) -> list[FrameState]:
    if cache is None:
        return expert_rollout(scenario, frames, history_len)
    key = (scenario.seed, frames, history_len)
    if key not in cache.rollouts:
        cache.rollouts[key] = expert_rollout(scenario, frames, history_len)
    return cache.rollouts[key]


def sample_category(policy: str, rng: np.random.Generator) -> str:
    if policy == "uniform":
        return CATEGORIES[rng.integers(0, len(CATEGORIES))]
    if policy in CATEGORIES:
        return policy
    raise ConfigurationError(f"unknown category policy {policy!r}")


def gm_bundle(
    system: System,
    frame_scenario: Scenario,
    frame_index: int,
    category: str,
    *,
    detach: bool = True,
    cache: EvalCache | None = None,
) -> LatentBundle:
    """Run the reasoner on the frame's privileged raster and harvest latents.

    A masked reasoner sees an all-zero raster, making its output independent
    of the scenario (cached accordingly).
    """
    early = 1 if system.collection is CollectionMode.FIRST_TOKEN_ALL_LAYERS else None
    key = (
        None if system.gm_masked else frame_scenario.seed,
        None if system.gm_masked else frame_index,
        category,
        system.collection.value,
        system.last_l,
    )
    if cache is not None and key in cache.bundles:
        return cache.bundles[key]
    view = rasterize(frame_scenario, privileged=True)
    if system.gm_masked:
        view = masked_view(view)
    record, _ = generate(system.store, system.gm_cfg, view, category_token(category), early)
    bundle = collect(record, system.collection, system.last_l)
    if detach:
        bundle = detach_bundle(bundle)
    if cache is not None and detach:
        cache.bundles[key] = bundle
    return bundle


def instruction_for(system: System, bundle: LatentBundle | None) -> Instruction:
    """Translate a bundle (or the empty bundle when upstream produced
    nothing) into an instruction."""
    if bundle is None:
        bundle = empty_bundle(system.gm_cfg.layers, system.gm_cfg.dim)
    return translate(bundle, system.store, system.tr_cfg)


def sm_forward(system: System, frame: FrameState, instruction: Instruction | None) -> SmOutput:
    """One planner inference; shifts apply only when an instruction is given."""
    view = rasterize(frame.scenario, privileged=False)
    queries = system.store["sm.q_bev"]
    bev_shape = (system.sm_cfg.bev_h, system.sm_cfg.bev_w)
    if instruction is not None and system.dist_cfg.target is ShiftTarget.Q_BEV:
        queries = apply_shift(queries, instruction, system.store, system.dist_cfg, bev_shape=bev_shape)
    f_bev = encode_bev(view, queries, system.store, system.sm_cfg)
    if instruction is not None and system.dist_cfg.target is ShiftTarget.F_BEV:
        f_bev = apply_shift(f_bev, instruction, system.store, system.dist_cfg, bev_shape=bev_shape)
    return decode_heads(f_bev, frame.history, system.store, system.sm_cfg)
