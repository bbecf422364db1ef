"""Evaluation math: displacement at fixed horizons, the cell-coincidence
collision proxy, the detection-score formula, frame-wise improvement
statistics and range-normalized advantage values for ablation tables."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .worldgen import Scenario, Trajectory, roll_obstacles

# horizon ticks evaluated at 0.5 s per tick: 1 s / 2 s / 3 s
HORIZON_TICKS = (2, 4, 6)
HORIZON_SECONDS = {2: 1.0, 4: 2.0, 6: 3.0}


@dataclass(frozen=True)
class EvalRecord:
    """One planned frame scored against its expert plan."""

    frame: int
    scenario_seed: int
    l2: dict[int, float]  # horizon tick -> displacement
    collided: dict[int, bool]  # horizon tick -> any collision up to that tick

    @property
    def l2_avg(self) -> float:
        return sum(self.l2[h] for h in HORIZON_TICKS) / len(HORIZON_TICKS)


def l2_at(traj: Trajectory, gt: Trajectory, horizon_tick: int) -> float:
    """Euclidean distance between the two waypoints at ``horizon_tick``."""
    if horizon_tick < 1 or horizon_tick > len(traj) or horizon_tick > len(gt):
        raise UsageError(f"horizon tick {horizon_tick} outside both trajectories")
    a = traj.waypoints[horizon_tick - 1]
    b = gt.waypoints[horizon_tick - 1]
    return math.hypot(a[0] - b[0], a[1] - b[1])


def collides_by(traj: Trajectory, scenario: Scenario, horizon_tick: int) -> bool:
    """True when any planned waypoint up to ``horizon_tick`` lands on an
    intent-rolled obstacle cell at the same tick (nearest-cell rounding)."""
    for t in range(1, horizon_tick + 1):
        r, c = traj.waypoints[t - 1]
        cell = (int(round(r)), int(round(c)))
        if cell in roll_obstacles(scenario, t):
            return True
    return False


def build_record(frame: int, scenario: Scenario, planned: Trajectory, gt: Trajectory) -> EvalRecord:
    return EvalRecord(
        frame=frame,
        scenario_seed=scenario.seed,
        l2={h: l2_at(planned, gt, h) for h in HORIZON_TICKS},
        collided={h: collides_by(planned, scenario, h) for h in HORIZON_TICKS},
    )


def collision_rate(records: list[EvalRecord], horizon_tick: int) -> float:
    """Percentage of frames with a collision at or before ``horizon_tick``."""
    if not records:
        raise UsageError("no records")
    return 100.0 * sum(r.collided[horizon_tick] for r in records) / len(records)


def mean_l2(records: list[EvalRecord], horizon_tick: int) -> float:
    if not records:
        raise UsageError("no records")
    return float(np.mean([r.l2[horizon_tick] for r in records]))


def summarize(records: list[EvalRecord]) -> dict[str, float]:
    """Table-shaped summary: displacement and collision rate per horizon
    plus their across-horizon means."""
    out: dict[str, float] = {}
    for h in HORIZON_TICKS:
        out[f"l2_{HORIZON_SECONDS[h]:g}s"] = mean_l2(records, h)
        out[f"col_{HORIZON_SECONDS[h]:g}s"] = collision_rate(records, h)
    out["l2_avg"] = float(np.mean([out[f"l2_{HORIZON_SECONDS[h]:g}s"] for h in HORIZON_TICKS]))
    out["col_avg"] = float(np.mean([out[f"col_{HORIZON_SECONDS[h]:g}s"] for h in HORIZON_TICKS]))
    return out


def nds(map_score: float, mtp: list[float] | tuple[float, ...]) -> float:
    """Weighted detection score: (5*mAP + sum(1 - min(1, mTP))) / 10."""
    if map_score < 0 or any(v < 0 for v in mtp):
        raise UsageError("detection-score inputs must be non-negative")
    if len(mtp) != 5:
        raise UsageError(f"expected five true-positive metrics, got {len(mtp)}")
    return 0.1 * (5.0 * map_score + sum(1.0 - min(1.0, v) for v in mtp))


@dataclass(frozen=True)
class AdvantageInput:
    value: float
    baseline: float
    observed: tuple[float, ...]  # values across all configurations
    higher_better: bool = True


def advantage(a: AdvantageInput) -> float:
    """Baseline-anchored, range-normalized score where higher is always
    better; a degenerate (zero) range maps everything to 1."""
    if not a.observed:
        raise UsageError("no observed configuration values")
    span = max(a.observed) - min(a.observed)
    if span == 0:
        return 1.0
    sign = 1.0 if a.higher_better else -1.0
    return 1.0 + sign * (a.value - a.baseline) / span


def framewise_stats(delta_l2: list[float]) -> dict[str, float]:
    """Per-frame improvement statistics of base-minus-experiment
    displacement deltas: fraction strictly improved, worst regression, and
    the mean delta."""
    if not delta_l2:
        raise UsageError("no deltas")
    arr = np.asarray(delta_l2, dtype=np.float64)
    return {
        "portion_improved": float((arr > 0).sum() / arr.size),
        "max_withdrawal": float(arr.min()),
        "average_improvement": float(arr.mean()),
    }


def occupancy_iou(pred_logits: np.ndarray, target: np.ndarray) -> float:
    """IoU of thresholded occupancy against the target grid; empty-vs-empty
    counts as a perfect match."""
    pred = pred_logits > 0.0
    tgt = target > 0.5
    union = np.logical_or(pred, tgt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, tgt).sum() / union)
