"""Deterministic two-rate harness in logical ticks.

The fast model ticks every tick; the slow reasoner launches every
``gm_period`` ticks on the current frame and its translated instruction
becomes visible after a modeled delay (per decode step plus a fixed
overhead). A latest-wins mailbox hands immutable snapshots across; when it is
empty the fast side runs on the translator's fallback-only instruction, so
the episode always completes.
"""

from __future__ import annotations

import heapq
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, UsageError
from .pipeline import (
    EvalCache,
    System,
    gm_bundle,
    instruction_for,
    rollout_for,
    sample_category,
    sm_forward,
    validate_system,
)
from .sm import SmOutput
from .translator import Instruction
from .worldgen import Scenario


@dataclass(frozen=True)
class RateModel:
    """Logical-tick costs. A launch at tick t with n decode steps posts its
    instruction at t + pipeline_overhead + per_token_cost * n."""

    gm_period: int = 10
    per_token_cost: int = 1
    pipeline_overhead: int = 1
    sm_period: int = 1

    def __post_init__(self):
        if self.gm_period < 1 or self.sm_period != 1:
            raise ConfigurationError("gm_period must be >= 1 and sm_period fixed at 1")
        if self.per_token_cost < 0 or self.pipeline_overhead < 0:
            raise ConfigurationError("costs must be non-negative")


@dataclass(frozen=True)
class Snapshot:
    instruction: Instruction
    produced_at_tick: int
    source_frame: int


class Mailbox:
    """Holds at most one snapshot; posts replace it atomically and reads
    never block. Posts carrying an older source frame than the current one
    are dropped, so consumed staleness is monotone."""

    def __init__(self):
        self.latest: Snapshot | None = None

    def post(self, snap: Snapshot) -> bool:
        if self.latest is not None and snap.source_frame < self.latest.source_frame:
            return False
        self.latest = snap
        return True

    def read(self) -> Snapshot | None:
        return self.latest


EVENT_KINDS = ("gm_start", "gm_token", "gm_done", "er_ready", "sm_tick")


@dataclass(frozen=True)
class Event:
    tick: int
    kind: str
    frame: int | None = None
    staleness: int | None = None
    used_empty_path: bool = False
    wall_seconds: float | None = None


@dataclass
class ScheduleLog:
    events: list[Event] = field(default_factory=list)

    def append(self, event: Event) -> None:
        if self.events and event.tick < self.events[-1].tick:
            raise UsageError("events must be appended in non-decreasing tick order")
        self.events.append(event)

    def of_kind(self, kind: str) -> list[Event]:
        return [e for e in self.events if e.kind == kind]

    def to_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = []
        for e in self.events:
            row = {
                "tick": e.tick,
                "kind": e.kind,
                "frame": e.frame,
                "staleness": e.staleness,
                "used_empty_path": e.used_empty_path,
            }
            if e.wall_seconds is not None:
                row["wall_seconds"] = e.wall_seconds
            lines.append(json.dumps(row, sort_keys=True))
        path.write_text("\n".join(lines) + "\n")
        return path

    @staticmethod
    def from_jsonl(path: str | Path) -> "ScheduleLog":
        log = ScheduleLog()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            log.append(
                Event(
                    tick=row["tick"],
                    kind=row["kind"],
                    frame=row.get("frame"),
                    staleness=row.get("staleness"),
                    used_empty_path=row.get("used_empty_path", False),
                    wall_seconds=row.get("wall_seconds"),
                )
            )
        return log


def run_episode(
    scenario: Scenario,
    system: System,
    rates: RateModel,
    seed: int,
    *,
    frames: int = 12,
    category_policy: str = "uniform",
    cache: EvalCache | None = None,
    wall_clock: bool = False,
) -> tuple[list[SmOutput], ScheduleLog]:
    """Simulate one episode; fully deterministic per (inputs, seed).

    Returns the planner output at every tick plus the event log. With the
    adapter detached the planner runs bare and no reasoner events occur.
    """
    validate_system(system)
    rng = np.random.default_rng(np.random.PCG64(seed))
    log = ScheduleLog()
    mailbox = Mailbox()
    states = rollout_for(scenario, frames, system.sm_cfg.history_len, cache)
    fallback = instruction_for(system, None).detach() if system.attached else None
    pending: list[tuple[int, int, str, object]] = []  # (tick, seq, kind, payload)
    seq = 0
    outputs: list[SmOutput] = []

    for t in range(frames):
        if system.attached and t % rates.gm_period == 0:
            category = sample_category(category_policy, rng)
            bundle = gm_bundle(system, states[t].scenario, t, category, cache=cache)
            instruction = instruction_for(system, bundle).detach()
            steps = _bundle_decode_steps(bundle)
            log.append(Event(tick=t, kind="gm_start", frame=t))
            for i in range(steps):
                heapq.heappush(pending, (t + rates.per_token_cost * (i + 1), seq, "gm_token", t))
                seq += 1
            done = t + rates.per_token_cost * steps
            heapq.heappush(pending, (done, seq, "gm_done", t))
            seq += 1
            ready = done + rates.pipeline_overhead
            heapq.heappush(pending, (ready, seq, "er_ready", Snapshot(instruction, ready, t)))
            seq += 1

        while pending and pending[0][0] <= t:
            tick, _, kind, payload = heapq.heappop(pending)
            if kind == "er_ready":
                mailbox.post(payload)
                log.append(Event(tick=tick, kind=kind, frame=payload.source_frame))
            else:
                log.append(Event(tick=tick, kind=kind, frame=payload))

        started = time.perf_counter() if wall_clock else None
        if system.attached:
            snap = mailbox.read()
            if snap is None:
                instruction, staleness, empty = fallback, None, True
            else:
                instruction, staleness, empty = snap.instruction, t - snap.source_frame, False
        else:
            instruction, staleness, empty = None, None, False
        outputs.append(sm_forward(system, states[t], instruction))
        wall = (time.perf_counter() - started) if wall_clock else None
        log.append(
            Event(tick=t, kind="sm_tick", frame=t, staleness=staleness, used_empty_path=empty, wall_seconds=wall)
        )
    return outputs, log


def _bundle_decode_steps(bundle) -> int:
    """Decode steps implied by a harvested bundle (token indices are dense)."""
    if not bundle.entries:
        return 0
    return max(e.token_index for e in bundle.entries) + 1


def staleness_sampler(frame_index: int, window: int, p_drop: float, rng: np.random.Generator) -> int | None:
    """Training-time source-frame pick: None with probability p_drop
    (omission), else uniform over the trailing ``window`` frames."""
    if frame_index < 0:
        raise UsageError("frame_index must be >= 0")
    if rng.random() < p_drop:
        return None
    low = max(0, frame_index - window + 1)
    return int(rng.integers(low, frame_index + 1))


@dataclass(frozen=True)
class Stats:
    count: int
    mean: float
    std: float


@dataclass(frozen=True)
class LatencyReport:
    collection_translation: Stats
    distribution: Stats


def _stats(values: list[float]) -> Stats:
    if not values:
        return Stats(count=0, mean=math.nan, std=math.nan)
    arr = np.asarray(values, dtype=np.float64)
    return Stats(count=len(values), mean=float(arr.mean()), std=float(arr.std()))


def latency_report(log: ScheduleLog) -> LatencyReport:
    """Mean/std of instruction production delay per completed launch, and of
    per-tick distribution wall time (zero when not recorded)."""
    if not log.events:
        raise UsageError("empty schedule log")
    starts = {e.frame: e.tick for e in log.of_kind("gm_start")}
    ready = {e.frame: e.tick for e in log.of_kind("er_ready")}
    deltas = [float(ready[f] - starts[f]) for f in sorted(ready) if f in starts]
    walls = [e.wall_seconds if e.wall_seconds is not None else 0.0 for e in log.of_kind("sm_tick")]
    return LatencyReport(collection_translation=_stats(deltas), distribution=_stats(walls))
