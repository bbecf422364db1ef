"""Seeded grid-world driving scenarios with hidden obstacle intents.

A scenario is a small occupancy grid with static walls, an ego start cell, a
goal cell and a few moving obstacles. Each obstacle carries an intent (stop,
straight, turn-left, turn-right) that fully determines its future cells; the
intent is visible only in the privileged raster view. Ground truth comes from
a breadth-first search over the time-expanded grid.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import GenerationError, UnsolvableError
from .numkit import Tensor

INTENT_STOP = "stop"
INTENT_STRAIGHT = "straight"
INTENT_TURN_LEFT = "turn_left"
INTENT_TURN_RIGHT = "turn_right"
INTENTS = (INTENT_STOP, INTENT_STRAIGHT, INTENT_TURN_LEFT, INTENT_TURN_RIGHT)

# heading codes: 0 up, 1 right, 2 down, 3 left
HEADING_VECTORS = ((-1, 0), (0, 1), (1, 0), (0, -1))

Cell = tuple[int, int]


@dataclass(frozen=True)
class WorldConfig:
    height: int = 16
    width: int = 16
    obstacles: int = 4
    horizon: int = 6
    wall_density: float = 0.05
    turn_tick: int = 3
    max_retries: int = 64
    seconds_per_tick: float = 0.5

    def __post_init__(self):
        if self.height < 2 or self.width < 2 or self.horizon < 1 or self.obstacles < 0:
            raise ValueError(f"invalid world config {self}")


@dataclass(frozen=True)
class Obstacle:
    cell: Cell
    velocity: Cell
    intent: str
    turn_tick: int


@dataclass(frozen=True)
class Scenario:
    height: int
    width: int
    walls: frozenset[Cell]
    ego: Cell
    heading: int
    goal: Cell
    obstacles: tuple[Obstacle, ...]
    horizon: int
    seed: int

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width


@dataclass(frozen=True)
class Trajectory:
    """Planned waypoints, one (row, col) pair per future tick."""

    waypoints: tuple[tuple[float, float], ...]

    def __len__(self) -> int:
        return len(self.waypoints)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.waypoints, dtype=np.float64)


@dataclass(frozen=True)
class RasterView:
    channels: Tensor  # (C, H, W), values in [0, 1]
    privileged: bool


@dataclass(frozen=True)
class FrameState:
    """World state at one tick of an expert rollout."""

    index: int
    scenario: Scenario  # re-anchored: ego/obstacles advanced to this tick
    history: tuple[Cell, ...]  # trailing ego cells, last entry is current
    oracle: Trajectory


def _rotate_left(v: Cell) -> Cell:
    return (-v[1], v[0])


def _rotate_right(v: Cell) -> Cell:
    return (v[1], -v[0])


def _clamp(cell: Cell, height: int, width: int) -> Cell:
    return (min(max(cell[0], 0), height - 1), min(max(cell[1], 0), width - 1))


def _obstacle_velocity_at_step(ob: Obstacle, step: int) -> Cell:
    """Velocity used for the move that enters tick ``step``."""
    if ob.intent == INTENT_STOP:
        return (0, 0)
    if ob.intent == INTENT_TURN_LEFT and step > ob.turn_tick:
        return _rotate_left(ob.velocity)
    if ob.intent == INTENT_TURN_RIGHT and step > ob.turn_tick:
        return _rotate_right(ob.velocity)
    return ob.velocity


def obstacle_position(ob: Obstacle, t: int, height: int, width: int) -> Cell:
    pos = ob.cell
    for step in range(1, t + 1):
        v = _obstacle_velocity_at_step(ob, step)
        pos = _clamp((pos[0] + v[0], pos[1] + v[1]), height, width)
    return pos


def roll_obstacles(s: Scenario, t: int) -> frozenset[Cell]:
    """Cells occupied by obstacles at tick ``t`` (t >= 0)."""
    return frozenset(obstacle_position(ob, t, s.height, s.width) for ob in s.obstacles)


def advance_obstacles(s: Scenario, t: int) -> tuple[Obstacle, ...]:
    """Obstacle states re-anchored at tick ``t``; turned obstacles become
    straight movers with the rotated velocity."""
    out = []
    for ob in s.obstacles:
        pos = obstacle_position(ob, t, s.height, s.width)
        if ob.intent in (INTENT_TURN_LEFT, INTENT_TURN_RIGHT):
            remaining = ob.turn_tick - t
            if remaining >= 1:
                out.append(replace(ob, cell=pos, turn_tick=remaining))
            else:
                rot = _rotate_left if ob.intent == INTENT_TURN_LEFT else _rotate_right
                out.append(
                    Obstacle(cell=pos, velocity=rot(ob.velocity), intent=INTENT_STRAIGHT, turn_tick=0)
                )
        else:
            out.append(replace(ob, cell=pos))
    return tuple(out)


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------


def _neighbors(cell: Cell, height: int, width: int) -> list[Cell]:
    r, c = cell
    cand = [(r, c), (r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
    return sorted(p for p in cand if 0 <= p[0] < height and 0 <= p[1] < width)


def _occupancy_by_tick(s: Scenario) -> list[frozenset[Cell]]:
    return [roll_obstacles(s, t) for t in range(s.horizon + 1)]


def _survivable_sets(s: Scenario, occ: list[frozenset[Cell]]) -> list[set[Cell]]:
    """surv[t] = cells from which the ego can stay collision-free until the
    horizon, moving one step (or staying) per tick."""
    walls = s.walls
    free_at = [
        {
            (r, c)
            for r in range(s.height)
            for c in range(s.width)
            if (r, c) not in walls and (r, c) not in occ[t]
        }
        for t in range(s.horizon + 1)
    ]
    surv: list[set[Cell]] = [set() for _ in range(s.horizon + 1)]
    surv[s.horizon] = free_at[s.horizon]
    for t in range(s.horizon - 1, -1, -1):
        nxt = surv[t + 1]
        surv[t] = {
            cell
            for cell in free_at[t]
            if any(n in nxt for n in _neighbors(cell, s.height, s.width))
        }
    return surv


def oracle_plan(s: Scenario) -> Trajectory:
    """Shortest collision-free route to the goal on the time-expanded grid,
    extended to the full horizon (stay at goal when safe, dodge otherwise).

    Breadth-first over (cell, tick) states with successors expanded in
    lexicographic (row, col) order; only states that can still survive to the
    horizon are entered.
    """
    occ = _occupancy_by_tick(s)
    surv = _survivable_sets(s, occ)
    if s.ego not in surv[0]:
        raise UnsolvableError(f"ego cannot survive from {s.ego} (seed {s.seed})")

    arrival: tuple[Cell, int] | None = None
    if s.ego == s.goal:
        arrival = (s.goal, 0)
    parent: dict[tuple[Cell, int], tuple[Cell, int]] = {}
    if arrival is None:
        seen = {(s.ego, 0)}
        queue: deque[tuple[Cell, int]] = deque([(s.ego, 0)])
        while queue and arrival is None:
            cell, t = queue.popleft()
            if t == s.horizon:
                continue
            for nxt in _neighbors(cell, s.height, s.width):
                state = (nxt, t + 1)
                if nxt not in surv[t + 1] or state in seen:
                    continue
                seen.add(state)
                parent[state] = (cell, t)
                if nxt == s.goal:
                    arrival = state
                    break
                queue.append(state)
        if arrival is None:
            raise UnsolvableError(f"goal {s.goal} unreachable within horizon (seed {s.seed})")

    # reconstruct the prefix: positions at ticks 0..t_arrive
    path: list[Cell] = []
    state = arrival
    while state in parent:
        path.append(state[0])
        state = parent[state]
    path.reverse()  # cells at ticks 1..t_arrive

    # extend to the horizon: prefer staying put, else the smallest safe cell
    pos = arrival[0]
    for t in range(arrival[1], s.horizon):
        options = [pos] + [n for n in _neighbors(pos, s.height, s.width) if n != pos]
        for nxt in options:
            if nxt in surv[t + 1]:
                pos = nxt
                break
        path.append(pos)

    return Trajectory(tuple((float(r), float(c)) for r, c in path))


def survival_plan(s: Scenario) -> Trajectory:
    """A goal-agnostic collision-free trajectory (fallback when the goal has
    become unreachable mid-episode)."""
    occ = _occupancy_by_tick(s)
    surv = _survivable_sets(s, occ)
    path: list[Cell] = []
    pos = s.ego
    for t in range(s.horizon):
        options = [pos] + [n for n in _neighbors(pos, s.height, s.width) if n != pos]
        chosen = None
        for nxt in options:
            if nxt in surv[t + 1]:
                chosen = nxt
                break
        pos = chosen if chosen is not None else pos
        path.append(pos)
    return Trajectory(tuple((float(r), float(c)) for r, c in path))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _heading_towards(src: Cell, dst: Cell) -> int:
    dr, dc = dst[0] - src[0], dst[1] - src[1]
    if abs(dr) >= abs(dc):
        return 0 if dr <= 0 else 2
    return 1 if dc > 0 else 3


def generate_scenario(seed: int, cfg: WorldConfig = WorldConfig()) -> Scenario:
    """Deterministic per (seed, cfg); redraws internally until the oracle can
    solve the draw, raising GenerationError when the retry budget runs out."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    for _ in range(cfg.max_retries):
        wall_mask = rng.random((cfg.height, cfg.width)) < cfg.wall_density
        free = [
            (r, c)
            for r in range(cfg.height)
            for c in range(cfg.width)
            if not wall_mask[r, c]
        ]
        if len(free) < cfg.obstacles + 2:
            continue
        picks = rng.choice(len(free), size=cfg.obstacles + 2, replace=False)
        ego = free[picks[0]]
        goal = free[picks[1]]
        if ego == goal:
            continue
        obstacles = []
        for i in range(cfg.obstacles):
            cell = free[picks[2 + i]]
            velocity = HEADING_VECTORS[rng.integers(0, 4)]
            intent = INTENTS[rng.integers(0, 4)]
            obstacles.append(
                Obstacle(cell=cell, velocity=velocity, intent=intent, turn_tick=cfg.turn_tick)
            )
        walls = frozenset(
            (r, c)
            for r in range(cfg.height)
            for c in range(cfg.width)
            if wall_mask[r, c] and (r, c) not in (ego, goal)
        )
        scenario = Scenario(
            height=cfg.height,
            width=cfg.width,
            walls=walls,
            ego=ego,
            heading=_heading_towards(ego, goal),
            goal=goal,
            obstacles=tuple(obstacles),
            horizon=cfg.horizon,
            seed=seed,
        )
        try:
            oracle_plan(scenario)
        except UnsolvableError:
            continue
        return scenario
    raise GenerationError(f"no solvable scenario for seed {seed} after {cfg.max_retries} draws")


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

INTENT_CHANNELS = len(INTENTS)
PUBLIC_CHANNELS = 7  # walls, obstacles, ego, goal, vel_row, vel_col, ego-distance


def rasterize(s: Scenario, privileged: bool) -> RasterView:
    """Stack the scenario into [0, 1]-valued channel planes.

    Public channels: walls, obstacle occupancy, ego (heading-coded), goal,
    obstacle velocity (row/col components), and a distance-to-ego field.
    The privileged view appends one one-hot intent plane per intent class.
    """
    c_total = PUBLIC_CHANNELS + (INTENT_CHANNELS if privileged else 0)
    grid = np.zeros((c_total, s.height, s.width), dtype=np.float64)
    for r, c in s.walls:
        grid[0, r, c] = 1.0
    for ob in s.obstacles:
        r, c = ob.cell
        grid[1, r, c] = 1.0
        grid[4, r, c] = (ob.velocity[0] + 1.0) / 2.0
        grid[5, r, c] = (ob.velocity[1] + 1.0) / 2.0
    grid[2, s.ego[0], s.ego[1]] = (s.heading + 1.0) / 4.0
    grid[3, s.goal[0], s.goal[1]] = 1.0
    rows = np.arange(s.height)[:, None]
    cols = np.arange(s.width)[None, :]
    dist = np.abs(rows - s.ego[0]) + np.abs(cols - s.ego[1])
    grid[6] = 1.0 - dist / (s.height + s.width)
    if privileged:
        for ob in s.obstacles:
            grid[PUBLIC_CHANNELS + INTENTS.index(ob.intent), ob.cell[0], ob.cell[1]] = 1.0
    return RasterView(channels=Tensor(grid), privileged=privileged)


# ---------------------------------------------------------------------------
# expert rollout
# ---------------------------------------------------------------------------


def scenario_at(s: Scenario, t: int, ego: Cell, heading: int) -> Scenario:
    return replace(s, ego=ego, heading=heading, obstacles=advance_obstacles(s, t))


def expert_rollout(s: Scenario, frames: int, history_len: int = 2) -> list[FrameState]:
    """Drive the expert through ``frames`` ticks, replanning each tick.

    Each frame carries the re-anchored scenario, the trailing ego history and
    the expert plan from that state (the supervision / evaluation target).
    """
    ego = s.ego
    heading = s.heading
    history: list[Cell] = [ego] * history_len
    states = []
    for t in range(frames):
        sc = scenario_at(s, t, ego, heading)
        try:
            plan = oracle_plan(sc)
        except UnsolvableError:
            plan = survival_plan(sc)
        states.append(FrameState(index=t, scenario=sc, history=tuple(history), oracle=plan))
        nxt = (int(plan.waypoints[0][0]), int(plan.waypoints[0][1]))
        move = (nxt[0] - ego[0], nxt[1] - ego[1])
        if move in HEADING_VECTORS:
            heading = HEADING_VECTORS.index(move)
        ego = nxt
        history = (history + [ego])[-history_len:]
    return states


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "height": s.height,
        "width": s.width,
        "walls": sorted([list(w) for w in s.walls]),
        "ego": list(s.ego),
        "heading": s.heading,
        "goal": list(s.goal),
        "horizon": s.horizon,
        "seed": s.seed,
        "obstacles": [
            {
                "cell": list(ob.cell),
                "velocity": list(ob.velocity),
                "intent": ob.intent,
                "turn_tick": ob.turn_tick,
            }
            for ob in s.obstacles
        ],
    }


def scenario_from_dict(d: dict) -> Scenario:
    return Scenario(
        height=d["height"],
        width=d["width"],
        walls=frozenset(tuple(w) for w in d["walls"]),
        ego=tuple(d["ego"]),
        heading=d["heading"],
        goal=tuple(d["goal"]),
        obstacles=tuple(
            Obstacle(
                cell=tuple(ob["cell"]),
                velocity=tuple(ob["velocity"]),
                intent=ob["intent"],
                turn_tick=ob["turn_tick"],
            )
            for ob in d["obstacles"]
        ),
        horizon=d["horizon"],
        seed=d["seed"],
    )


def save_corpus(scenarios: list[Scenario], directory: str | Path, cfg: WorldConfig) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, s in enumerate(scenarios):
        name = f"scenario_{i:05d}.json"
        (directory / name).write_text(json.dumps(scenario_to_dict(s), sort_keys=True))
        files.append(name)
    index = {
        "count": len(scenarios),
        "files": files,
        "world": {
            "height": cfg.height,
            "width": cfg.width,
            "obstacles": cfg.obstacles,
            "horizon": cfg.horizon,
            "wall_density": cfg.wall_density,
            "turn_tick": cfg.turn_tick,
            "seconds_per_tick": cfg.seconds_per_tick,
        },
    }
    (directory / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return directory / "index.json"


def load_corpus(directory: str | Path) -> list[Scenario]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    return [
        scenario_from_dict(json.loads((directory / name).read_text()))
        for name in index["files"]
    ]
