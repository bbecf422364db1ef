"""TOML-backed run configuration with full defaulting, override tracking,
cross-module validation and content hashing for reproducible run
directories."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .collector import CollectionMode
from .distributor import DistributionConfig, ShiftMode, ShiftTarget
from .errors import ConfigurationError
from .gm import GmConfig
from .scheduler import RateModel
from .sm import SmConfig
from .trainer import FreezeSpec, TrainConfig
from .worldgen import WorldConfig

DEFAULTS: dict = {
    "seed": 0,
    "world": {
        "height": 16,
        "width": 16,
        "obstacles": 4,
        "horizon": 6,
        "wall_density": 0.05,
        "turn_tick": 3,
        "max_retries": 64,
        "seconds_per_tick": 0.5,
    },
    "gm": {"dim": 64, "layers": 2, "heads": 4, "patch": 2, "max_tokens": 8, "mlp_mult": 4},
    "sm": {
        "dim": 32,
        "bev_h": 8,
        "bev_w": 8,
        "heads": 4,
        "history_len": 2,
        "patch": 4,
        "mlp_mult": 2,
        "lambda_occ": 0.5,
    },
    "translator": {"heads": 4, "use_layer_embedding": True},
    "distribution": {"target": "q_bev", "mode": "bias", "shuffle_factor": 2, "heads": 4, "tf_rows": 4},
    "collection": {"mode": "c1", "last_l": 0},
    "rates": {"gm_period": 10, "per_token_cost": 1, "pipeline_overhead": 1},
    "episode": {"frames": 12},
    "corpus": {"count": 2000, "start_seed": 1000},
    "train_gm": {
        "epochs": 3,
        "base_lr": 0.3,
        "accumulation_steps": 4,
        "weight_decay": 0.02,
        "holdout": 200,
    },
    "train_sm": {
        "epochs": 6,
        "base_lr": 0.2,
        "accumulation_steps": 8,
        "weight_decay": 0.02,
        "frames_per_scenario": 2,
    },
    "finetune": {
        "epochs": 5,
        "base_lr": 0.05,
        "accumulation_steps": 8,
        "weight_decay": 0.02,
        "category_policy": "uniform",
        "staleness_window": 8,
        "p_drop": 0.1,
        "frames_per_scenario": 2,
        "freeze_gm": True,
        "freeze_sm": False,
    },
    "eval": {
        "scenarios": 100,
        "frames": 12,
        "gm_masked": False,
        "category_policy": "uniform",
        "rates": {"gm_period": 1, "per_token_cost": 0, "pipeline_overhead": 0},
    },
    "ablate": {
        "collection": [],
        "use_layer_embedding": [],
        "mode": [],
        "target": [],
        "freeze_gm": [],
        "freeze_sm": [],
        "category_policy": [],
        "gm_masked": [],
    },
}


def _deep_merge(base: dict, extra: dict, path: str = "") -> list[str]:
    """Merge ``extra`` into ``base`` in place; returns offending key paths."""
    bad = []
    for key, value in extra.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            bad.append(here)
            continue
        if isinstance(base[key], dict) and isinstance(value, dict):
            bad.extend(_deep_merge(base[key], value, here))
        elif isinstance(base[key], dict) != isinstance(value, dict):
            bad.append(here)
        else:
            base[key] = value
    return bad


def parse_override(expr: str) -> tuple[list[str], object]:
    """Parse ``a.b.c=value`` with TOML literal semantics for the value."""
    if "=" not in expr:
        raise ConfigurationError(f"override {expr!r} is not of the form key=value")
    key, _, raw = expr.partition("=")
    keys = [k.strip() for k in key.strip().split(".")]
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return keys, value


class RunConfig:
    """The resolved configuration tree plus the overrides that produced it."""

    def __init__(self, resolved: dict, overrides: list[str], source: str | None):
        self.resolved = resolved
        self.overrides = overrides
        self.source = source
        self._validate()

    def __getitem__(self, key: str):
        return self.resolved[key]

    @property
    def seed(self) -> int:
        return int(self.resolved["seed"])

    def hash(self) -> str:
        """Content hash of everything except the seed."""
        stripped = {k: v for k, v in self.resolved.items() if k != "seed"}
        canon = json.dumps(stripped, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def run_name(self) -> str:
        return f"{self.hash()}-s{self.seed}"

    def persist(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        payload = {
            "resolved": self.resolved,
            "overrides": self.overrides,
            "source": self.source,
            "hash": self.hash(),
        }
        out = directory / "resolved.json"
        out.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        return out

    # typed views -----------------------------------------------------------

    def world(self) -> WorldConfig:
        return WorldConfig(**self.resolved["world"])

    def gm(self) -> GmConfig:
        w = self.resolved["world"]
        return GmConfig(world_h=w["height"], world_w=w["width"], **self.resolved["gm"])

    def sm(self) -> SmConfig:
        w = self.resolved["world"]
        return SmConfig(
            world_h=w["height"],
            world_w=w["width"],
            horizon=w["horizon"],
            **self.resolved["sm"],
        )

    def distribution(self) -> DistributionConfig:
        d = self.resolved["distribution"]
        return DistributionConfig(
            target=ShiftTarget(d["target"]),
            mode=ShiftMode(d["mode"]),
            dim_sm=self.resolved["sm"]["dim"],
            shuffle_factor=d["shuffle_factor"],
            heads=d["heads"],
            tf_rows=d["tf_rows"],
        )

    def collection_mode(self) -> CollectionMode:
        return CollectionMode(self.resolved["collection"]["mode"])

    def last_l(self) -> int | None:
        raw = self.resolved["collection"]["last_l"]
        return None if raw in (0, None) else int(raw)

    def rates(self) -> RateModel:
        return RateModel(**self.resolved["rates"])

    def eval_rates(self) -> RateModel:
        return RateModel(**self.resolved["eval"]["rates"])

    def freeze(self) -> FreezeSpec:
        f = self.resolved["finetune"]
        return FreezeSpec(freeze_gm=f["freeze_gm"], freeze_sm=f["freeze_sm"])

    def train_cfg(self, section: str) -> TrainConfig:
        t = self.resolved[section]
        kwargs = {
            "epochs": t["epochs"],
            "accumulation_steps": t["accumulation_steps"],
            "base_lr": t["base_lr"],
            "weight_decay": t["weight_decay"],
            "seed": self.seed,
        }
        if section == "finetune":
            kwargs.update(
                category_policy=t["category_policy"],
                staleness_window=t["staleness_window"],
                p_drop=t["p_drop"],
            )
        return TrainConfig(**kwargs)

    def _validate(self) -> None:
        try:
            self.world()
            self.gm()
            self.sm()
            self.distribution()
            self.collection_mode()
            self.rates()
            self.eval_rates()
            self.train_cfg("train_gm")
            self.train_cfg("train_sm")
            self.train_cfg("finetune")
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigurationError(f"invalid configuration: {exc}") from exc


def load_config(path: str | Path | None = None, sets: list[str] | None = None,
                seed: int | None = None) -> RunConfig:
    """Defaults, then the TOML file, then ``--set`` overrides, then the
    explicit seed; unknown keys fail with their full paths."""
    resolved = copy.deepcopy(DEFAULTS)
    bad: list[str] = []
    if path is not None:
        with open(path, "rb") as fh:
            bad.extend(_deep_merge(resolved, tomllib.load(fh)))
    overrides = []
    for expr in sets or []:
        keys, value = parse_override(expr)
        node = resolved
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                bad.append(".".join(keys))
                break
            node = node[k]
        else:
            if not isinstance(node, dict) or keys[-1] not in node:
                bad.append(".".join(keys))
            else:
                node[keys[-1]] = value
                overrides.append(expr)
    if bad:
        raise ConfigurationError(f"unknown configuration keys: {', '.join(sorted(set(bad)))}")
    if seed is not None:
        resolved["seed"] = int(seed)
        overrides.append(f"seed={seed}")
    return RunConfig(resolved, overrides, str(path) if path else None)
