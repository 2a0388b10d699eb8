"""Navigation metrics: success rate, SPL, NDTW, trajectory length, nav error.

``evaluate`` drives closed-loop episodes through ``world.run_episode`` with a
per-episode policy factory, so the same code path scores trained agents,
oracle replays, and the random/stationary reference policies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .oracle import astar_plan, navigable_mask, replay_low_actions, subdivide_waypoints
from .world import (Pose, SimParams, Trajectory, World, generate_world,
                    is_success, run_episode, success_threshold)


def nav_error(traj: Trajectory, goal: tuple[float, float]) -> float:
    """Euclidean distance from the final pose to the goal."""
    if not traj.poses:
        raise InputError("nav_error needs a non-empty trajectory")
    f = traj.final_pose
    return math.hypot(f.x - goal[0], f.y - goal[1])


def spl(episodes: list[tuple[bool, float, float]]) -> float:
    """Mean of S_i * l_i / max(p_i, l_i) over (success, shortest, actual)."""
    if not episodes:
        return 0.0
    total = 0.0
    for success, shortest, actual in episodes:
        if shortest <= 0:
            raise InputError(f"shortest path length must be positive, got {shortest}")
        if success:
            total += shortest / max(actual, shortest)
    return total / len(episodes)


def dtw_distance(query: np.ndarray, ref: np.ndarray) -> float:
    """Boundary-matched monotone DTW with Euclidean point cost, O(|R||Q|) DP."""
    q = np.asarray(query, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if len(q) == 0 or len(r) == 0:
        raise InputError("DTW paths must be non-empty")
    nq, nr = len(q), len(r)
    # pairwise costs row by row keeps memory at O(|R|)
    prev = np.full(nr, np.inf)
    cur = np.full(nr, np.inf)
    for i in range(nq):
        costs = np.linalg.norm(r - q[i], axis=1)
        if i == 0:
            cur[0] = costs[0]
            for j in range(1, nr):
                cur[j] = cur[j - 1] + costs[j]
        else:
            cur[0] = prev[0] + costs[0]
            for j in range(1, nr):
                cur[j] = costs[j] + min(prev[j], cur[j - 1], prev[j - 1])
        prev, cur = cur, prev
    return float(prev[nr - 1])


def ndtw(query: np.ndarray, ref: np.ndarray, d_th: float) -> float:
    """exp(-DTW(ref, query) / (|ref| * d_th)), in (0, 1]."""
    if d_th <= 0:
        raise InputError(f"d_th must be positive, got {d_th}")
    r = np.asarray(ref, dtype=np.float64)
    return math.exp(-dtw_distance(query, ref) / (len(r) * d_th))


def resample_path(points: np.ndarray, spacing: float = 0.25) -> np.ndarray:
    """Arc-length resampling; always keeps both endpoints."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return pts.copy()
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total < 1e-12:
        return pts[:1].copy()
    targets = np.arange(0.0, total, spacing)
    out = []
    for s in targets:
        k = int(np.searchsorted(cum, s, side="right") - 1)
        k = min(k, len(seg) - 1)
        t = (s - cum[k]) / seg[k] if seg[k] > 0 else 0.0
        out.append(pts[k] + t * (pts[k + 1] - pts[k]))
    out.append(pts[-1])
    return np.array(out)


@dataclass
class MetricsReport:
    sr: float
    spl: float
    ndtw: float
    tl: float
    ne: float
    n_episodes: int
    per_episode: list = field(default_factory=list)

    def validate(self) -> None:
        assert 0.0 <= self.sr <= 1.0 and 0.0 <= self.spl <= 1.0 and 0.0 <= self.ndtw <= 1.0
        assert self.spl <= self.sr + 1e-12
        assert self.tl >= 0.0 and self.ne >= 0.0

    def to_json(self) -> str:
        obj = {
            "sr": self.sr, "spl": self.spl, "ndtw": self.ndtw,
            "tl": self.tl, "ne": self.ne, "n_episodes": self.n_episodes,
            "per_episode": self.per_episode,
        }
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"

    def to_table(self, label: str = "") -> str:
        head = f"{'':24s} {'SR↑':>6s} {'SPL↑':>6s} {'NDTW↑':>6s} {'TL':>7s} {'NE↓':>6s}"
        row = (f"{label:24s} {self.sr:6.3f} {self.spl:6.3f} {self.ndtw:6.3f} "
               f"{self.tl:7.2f} {self.ne:6.2f}")
        return head + "\n" + row

    @staticmethod
    def from_rows(rows: list[dict]) -> "MetricsReport":
        n = len(rows)
        if n == 0:
            return MetricsReport(0, 0, 0, 0, 0, 0, [])
        rep = MetricsReport(
            sr=sum(r["success"] for r in rows) / n,
            spl=spl([(r["success"], r["shortest_len"], r["tl"]) for r in rows]),
            ndtw=sum(r["ndtw"] for r in rows) / n,
            tl=sum(r["tl"] for r in rows) / n,
            ne=sum(r["ne"] for r in rows) / n,
            n_episodes=n,
            per_episode=rows,
        )
        rep.validate()
        return rep


class WorldCache:
    """Regenerates worlds (and planner masks) once per seed."""

    def __init__(self, sim: SimParams | None = None, size_m: float = 10.4,
                 landmark_count: int = 5, cell_size: float = 0.1):
        self.sim = sim or SimParams()
        self.size_m = size_m
        self.landmark_count = landmark_count
        self.cell_size = cell_size
        self._worlds: dict[int, World] = {}
        self._masks: dict[int, np.ndarray] = {}

    def world(self, seed: int) -> World:
        if seed not in self._worlds:
            self._worlds[seed] = generate_world(seed, self.size_m, self.landmark_count,
                                                self.cell_size)
        return self._worlds[seed]

    def mask(self, seed: int) -> np.ndarray:
        if seed not in self._masks:
            self._masks[seed] = navigable_mask(self.world(seed), self.sim.r_robot)
        return self._masks[seed]


def score_trajectory(traj: Trajectory, episode, world: World, cache: WorldCache) -> dict:
    """Per-episode metric row for one executed trajectory."""
    sim = cache.sim
    d_a = success_threshold(world)
    ref_poses, _ = replay_low_actions(world, episode.start, episode.low_actions, sim)
    ref = resample_path(np.array([[p.x, p.y] for p in ref_poses]), 0.25)
    plan = astar_plan(world, (episode.start.x, episode.start.y), episode.goal,
                      sim.r_robot, mask=cache.mask(episode.world_ref["seed"]))
    shortest = sum(math.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(plan, plan[1:]))
    # resampling both traces makes the score independent of the control rate
    query = resample_path(traj.path_xy(), 0.25)
    row = {
        "id": episode.id,
        "success": bool(is_success(traj, episode.goal, d_a)),
        "ne": nav_error(traj, episode.goal),
        "tl": traj.length_m(),
        "ndtw": ndtw(query, ref, d_a),
        "shortest_len": shortest,
        "steps": traj.n_steps,
        "collisions": traj.collisions,
    }
    return row


def evaluate(make_policy, episodes, cache: WorldCache,
             max_steps: int | None = None) -> MetricsReport:
    """Run every episode closed-loop and aggregate the metric suite.

    ``make_policy(episode)`` returns a fresh policy honouring the
    begin_episode/act protocol; determinism is the caller's responsibility
    (seeded policies give bit-reproducible reports).
    """
    rows = []
    for ep in episodes:
        world = cache.world(ep.world_ref["seed"])
        policy = make_policy(ep)
        traj = run_episode(world, policy, ep.instruction_tokens, ep.start,
                           max_steps=max_steps, sim=cache.sim)
        rows.append(score_trajectory(traj, ep, world, cache))
    return MetricsReport.from_rows(rows)


# ---------------------------------------------------------------------------
# Reference policies (floor / ceiling checks)


class OracleReplayPolicy:
    """Replays the stored expert velocity commands open-loop."""

    def __init__(self, episode):
        self.actions = episode.low_actions
        self.t = 0

    def begin_episode(self, tokens):
        self.t = 0

    def act(self, obs):
        from .world import LowAction
        if self.t >= len(self.actions):
            return LowAction(0.0, 0.0), True
        v, w = self.actions[self.t]
        self.t += 1
        return LowAction(v, w), False


class RandomPolicy:
    """Uniform random velocities; declares stop at a random step."""

    def __init__(self, seed: int, sim: SimParams | None = None,
                 max_steps: int = 1000):
        from .autodiff import make_rng
        self.sim = sim or SimParams()
        self.rng = make_rng(0x7A2D, seed)
        self.stop_at = int(self.rng.integers(1, max_steps))
        self.t = 0

    def begin_episode(self, tokens):
        self.t = 0

    def act(self, obs):
        from .world import LowAction
        if self.t >= self.stop_at:
            return LowAction(0.0, 0.0), True
        self.t += 1
        return LowAction(float(self.rng.uniform(0.0, self.sim.v_max)),
                         float(self.rng.uniform(-self.sim.omega_max, self.sim.omega_max))), False


class StationaryPolicy:
    """Declares stop immediately."""

    def begin_episode(self, tokens):
        pass

    def act(self, obs):
        from .world import LowAction
        return LowAction(0.0, 0.0), True
