"""Expert demonstration pipeline: grid planning, waypoint-following control,
navigability filtering, template instructions, and dataset emission.

The planner runs A* on the radius-inflated occupancy grid (8-connected,
octile heuristic) and simplifies the cell path to waypoints at direction
changes. Episode waypoints are the same polyline subdivided so consecutive
points are at most 1 m apart, which the proportional go-to-goal controller
tracks with a 0.15 m advance radius.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import heapq

import numpy as np

from .autodiff import make_rng
from .errors import (GenerationShortfallError, InputError, NoPathError,
                     RolloutDivergenceError)
from .world import (CELL_FREE, HighAction, LANDMARK_BASE, LANDMARK_NAMES,
                    LowAction, Pose, SimParams, TURN_STEP_RAD, World,
                    check_collision, clamp_action, generate_world,
                    normalize_angle, step_dynamics, success_threshold)

PLANNER_PAD_M = 0.20        # inflation margin beyond the robot radius
WAYPOINT_SPACING_M = 1.0    # max gap between consecutive episode waypoints
WAYPOINT_ADVANCE_M = 0.15   # switch to the next waypoint inside this radius
HEADING_BAND_RAD = TURN_STEP_RAD / 2.0  # "turn" label outside this error
ROLLOUT_BUDGET = 3000
K_RHO = 1.0
K_ALPHA = 2.0


# ---------------------------------------------------------------------------
# Planner


def navigable_mask(world: World, r_robot: float = 0.18, pad: float = PLANNER_PAD_M) -> np.ndarray:
    """Cells whose centre keeps the inflated disc clear of every obstacle cell."""
    s = world.cell_size
    radius = r_robot + pad
    occupied = world.grid != CELL_FREE
    window = int(math.ceil(radius / s)) + 1
    blocked = np.zeros_like(occupied)
    for dr in range(-window, window + 1):
        for dc in range(-window, window + 1):
            # distance from a cell centre to the rectangle of the offset cell
            dx = max(0.0, (abs(dc) - 0.5)) * s
            dy = max(0.0, (abs(dr) - 0.5)) * s
            if math.hypot(dx, dy) >= radius:
                continue
            shifted = np.zeros_like(occupied)
            src = occupied[max(0, -dr):occupied.shape[0] - max(0, dr),
                           max(0, -dc):occupied.shape[1] - max(0, dc)]
            shifted[max(0, dr):occupied.shape[0] - max(0, -dr),
                    max(0, dc):occupied.shape[1] - max(0, -dc)] = src
            blocked |= shifted
    mask = ~occupied & ~blocked
    # grid border cells can never host the disc
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False
    return mask


_SQRT2 = math.sqrt(2.0)
_MOVES = [(-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0),
          (-1, -1, _SQRT2), (-1, 1, _SQRT2), (1, -1, _SQRT2), (1, 1, _SQRT2)]


def _octile(a, b) -> float:
    dr, dc = abs(a[0] - b[0]), abs(a[1] - b[1])
    return max(dr, dc) + (_SQRT2 - 1.0) * min(dr, dc)


def astar_cells(mask: np.ndarray, start: tuple[int, int], goal: tuple[int, int]):
    """8-connected A* over a navigable mask; returns (cell path, cost in cells).

    Diagonal moves require both orthogonal neighbours free (no corner cutting).
    """
    if not mask[start] or not mask[goal]:
        raise NoPathError(f"start {start} or goal {goal} not in navigable space")
    nr, nc = mask.shape
    g = {start: 0.0}
    parent = {start: None}
    tie = 0
    heap = [(_octile(start, goal), tie, start)]
    closed = set()
    while heap:
        _, _, cur = heapq.heappop(heap)
        if cur == goal:
            path = []
            while cur is not None:
                path.append(cur)
                cur = parent[cur]
            return path[::-1], g[goal]
        if cur in closed:
            continue
        closed.add(cur)
        for dr, dc, cost in _MOVES:
            node = (cur[0] + dr, cur[1] + dc)
            if not (0 <= node[0] < nr and 0 <= node[1] < nc) or not mask[node]:
                continue
            if dr and dc and not (mask[cur[0] + dr, cur[1]] and mask[cur[0], cur[1] + dc]):
                continue
            cand = g[cur] + cost
            if cand < g.get(node, math.inf):
                g[node] = cand
                parent[node] = cur
                tie += 1
                heapq.heappush(heap, (cand + _octile(node, goal), tie, node))
    raise NoPathError(f"no route from {start} to {goal}")


def dijkstra_cost(mask: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> float:
    """Heuristic-free reference cost (oracle for planner optimality tests)."""
    nr, nc = mask.shape
    dist = {start: 0.0}
    heap = [(0.0, start)]
    while heap:
        d, cur = heapq.heappop(heap)
        if cur == goal:
            return d
        if d > dist.get(cur, math.inf):
            continue
        for dr, dc, cost in _MOVES:
            node = (cur[0] + dr, cur[1] + dc)
            if not (0 <= node[0] < nr and 0 <= node[1] < nc) or not mask[node]:
                continue
            if dr and dc and not (mask[cur[0] + dr, cur[1]] and mask[cur[0], cur[1] + dc]):
                continue
            nd = d + cost
            if nd < dist.get(node, math.inf):
                dist[node] = nd
                heapq.heappush(heap, (nd, node))
    raise NoPathError(f"no route from {start} to {goal}")


def _cell_center(world: World, cell: tuple[int, int]) -> tuple[float, float]:
    s = world.cell_size
    return ((cell[1] + 0.5) * s, (cell[0] + 0.5) * s)


def simplify_path(points: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Keep endpoints and direction changes of a polyline."""
    if len(points) <= 2:
        return list(points)
    out = [points[0]]
    for i in range(1, len(points) - 1):
        ax, ay = points[i][0] - points[i - 1][0], points[i][1] - points[i - 1][1]
        bx, by = points[i + 1][0] - points[i][0], points[i + 1][1] - points[i][1]
        if abs(ax * by - ay * bx) > 1e-9 or ax * bx + ay * by < 0:
            out.append(points[i])
    out.append(points[-1])
    return out


def _line_of_sight(world: World, mask: np.ndarray, a, b) -> bool:
    """Both endpoints and sub-cell samples between them lie in navigable cells."""
    d = math.hypot(b[0] - a[0], b[1] - a[1])
    n = max(2, int(math.ceil(d / (world.cell_size * 0.5))))
    for i in range(n + 1):
        t = i / n
        r, c = world.cell_index(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))
        if not (0 <= r < mask.shape[0] and 0 <= c < mask.shape[1]) or not mask[r, c]:
            return False
    return True


def string_pull(world: World, mask: np.ndarray, points):
    """Greedy line-of-sight shortcutting: removes grid staircase zigzags."""
    out = [points[0]]
    i = 0
    while i < len(points) - 1:
        j = len(points) - 1
        while j > i + 1 and not _line_of_sight(world, mask, points[i], points[j]):
            j -= 1
        out.append(points[j])
        i = j
    return out


def astar_plan(world: World, start_xy: tuple[float, float], goal_xy: tuple[float, float],
               r_robot: float = 0.18, mask: np.ndarray | None = None) -> list[tuple[float, float]]:
    """Shortest radius-inflated grid route as sparse turn-point waypoints.

    The raw 8-connected cell path is string-pulled (line-of-sight shortcuts)
    and then reduced to direction changes, so a straight reachable segment
    yields exactly [start, goal].
    """
    if mask is None:
        mask = navigable_mask(world, r_robot)
    start = world.cell_index(*start_xy)
    goal = world.cell_index(*goal_xy)
    cells, _ = astar_cells(mask, start, goal)
    centers = [_cell_center(world, c) for c in cells]
    if len(centers) > 2:
        centers = string_pull(world, mask, simplify_path(centers))
    return simplify_path(centers)


def subdivide_waypoints(waypoints, spacing: float = WAYPOINT_SPACING_M):
    """Insert points so consecutive waypoints are at most ``spacing`` apart."""
    out = [waypoints[0]]
    for a, b in zip(waypoints, waypoints[1:]):
        d = math.hypot(b[0] - a[0], b[1] - a[1])
        pieces = max(1, int(math.ceil(d / spacing)))
        for i in range(1, pieces + 1):
            t = i / pieces
            out.append((a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])))
    return out


def path_length(points) -> float:
    return float(sum(math.hypot(b[0] - a[0], b[1] - a[1])
                     for a, b in zip(points, points[1:])))


# ---------------------------------------------------------------------------
# Feedback controller


def feedback_control(p: Pose, z: tuple[float, float], k_rho: float = K_RHO,
                     k_alpha: float = K_ALPHA, sim: SimParams | None = None) -> LowAction:
    """Proportional go-to-goal law; translation is gated by cos(heading error)."""
    sim = sim or SimParams()
    rho = math.hypot(z[0] - p.x, z[1] - p.y)
    alpha = normalize_angle(math.atan2(z[1] - p.y, z[0] - p.x) - p.theta)
    v = min(max(k_rho * rho * max(0.0, math.cos(alpha)), 0.0), sim.v_max)
    omega = min(max(k_alpha * alpha, -sim.omega_max), sim.omega_max)
    return LowAction(v, omega)


def rollout_oracle(world: World, start: Pose, waypoints, sim: SimParams | None = None,
                   budget: int = ROLLOUT_BUDGET):
    """Drive the controller along episode waypoints; label each control step.

    Labels follow plan progress: STOP once the final waypoint is reached
    (a tail of zero-velocity steps ensures the kinematic stop fires on
    replay), TURN_LEFT/TURN_RIGHT while the heading error to the current
    waypoint exceeds half the turn granularity, FORWARD otherwise.
    """
    sim = sim or SimParams()
    pose = start
    poses = [pose]
    low: list[LowAction] = []
    high: list[HighAction] = []
    collisions = 0
    idx = 1 if len(waypoints) > 1 else 0
    last = len(waypoints) - 1
    for _ in range(budget):
        while idx < last and math.hypot(waypoints[idx][0] - pose.x,
                                        waypoints[idx][1] - pose.y) < WAYPOINT_ADVANCE_M:
            idx += 1
        z = waypoints[idx]
        dist = math.hypot(z[0] - pose.x, z[1] - pose.y)
        if idx == last and dist < WAYPOINT_ADVANCE_M:
            stop = LowAction(0.0, 0.0)
            for _ in range(sim.n_stop):
                low.append(stop)
                high.append(HighAction.STOP)
                poses.append(pose)
            return poses, low, high, collisions
        a = clamp_action(feedback_control(pose, z, sim=sim), sim)
        alpha = normalize_angle(math.atan2(z[1] - pose.y, z[0] - pose.x) - pose.theta)
        if alpha > HEADING_BAND_RAD:
            label = HighAction.TURN_LEFT
        elif alpha < -HEADING_BAND_RAD:
            label = HighAction.TURN_RIGHT
        else:
            label = HighAction.FORWARD
        cand = step_dynamics(pose, a, sim.dt)
        if check_collision(world, cand, sim.r_robot):
            collisions += 1
            cand = pose
        pose = cand
        poses.append(pose)
        low.append(a)
        high.append(label)
    raise RolloutDivergenceError(
        f"controller did not reach the goal within {budget} steps")


def filter_navigable(world: World, start: Pose, waypoints,
                     sim: SimParams | None = None) -> bool:
    """True iff the rollout finishes collision-free inside the goal radius."""
    sim = sim or SimParams()
    try:
        poses, _, _, collisions = rollout_oracle(world, start, waypoints, sim)
    except RolloutDivergenceError:
        return False
    if collisions > 0:
        return False
    goal = waypoints[-1]
    final = poses[-1]
    return math.hypot(final.x - goal[0], final.y - goal[1]) < success_threshold(world)


# ---------------------------------------------------------------------------
# Template instructions


_FORWARD_PHRASES = [("go", "forward"), ("move", "forward"), ("head", "straight"),
                    ("walk", "forward"), ("continue", "straight")]
_TURN_VERBS = ["turn", "veer"]
_STOP_PHRASES = [("stop", "near"), ("halt", "by"), ("wait", "at")]
_GLUE = ["then", "and"]
_PASS_WORDS = ["past", "toward"]
TURN_EVENT_RAD = math.radians(25.0)
LANDMARK_NEAR_M = 2.0


def build_vocab() -> dict[str, int]:
    """Fixed token table shipped with every dataset (id 0 is the pad token)."""
    words = {"<pad>"}
    for v, w in _FORWARD_PHRASES:
        words.update((v, w))
    words.update(_TURN_VERBS)
    words.update(("left", "right"))
    for v, w in _STOP_PHRASES:
        words.update((v, w))
    words.update(_GLUE)
    words.update(_PASS_WORDS)
    words.add("the")
    for name in LANDMARK_NAMES:
        words.update(name.split())
    ordered = ["<pad>"] + sorted(w for w in words if w != "<pad>")
    if len(ordered) > 128:
        raise InputError(f"vocabulary {len(ordered)} exceeds the 128-token budget")
    return {w: i for i, w in enumerate(ordered)}


VOCAB = build_vocab()


def tokenize(text: str, vocab: dict[str, int] | None = None) -> list[int]:
    vocab = vocab or VOCAB
    out = []
    for word in text.split():
        if word not in vocab:
            raise InputError(f"token {word!r} not in vocabulary")
        out.append(vocab[word])
    return out


def _douglas_peucker(points, tol):
    if len(points) <= 2:
        return list(points)
    ax, ay = points[0]
    bx, by = points[-1]
    norm = math.hypot(bx - ax, by - ay)
    best_d, best_i = -1.0, 0
    for i in range(1, len(points) - 1):
        px, py = points[i]
        if norm < 1e-12:
            d = math.hypot(px - ax, py - ay)
        else:
            d = abs((bx - ax) * (ay - py) - (ax - px) * (by - ay)) / norm
        if d > best_d:
            best_d, best_i = d, i
    if best_d <= tol:
        return [points[0], points[-1]]
    left = _douglas_peucker(points[:best_i + 1], tol)
    right = _douglas_peucker(points[best_i:], tol)
    return left[:-1] + right


def _nearest_landmark(world: World, point, within=None):
    best = None
    for cid, _ in world.landmarks:
        cx, cy = world.landmark_center(cid)
        d = math.hypot(cx - point[0], cy - point[1])
        if (within is None or d < within) and (best is None or d < best[1]):
            best = (cid, d)
    return best[0] if best else None


def _segment_events(world: World, waypoints):
    """(kind, payload) clauses over a coarsened path: forwards (with an
    optional landmark the segment passes) and major turns."""
    pts = _douglas_peucker(simplify_path(list(waypoints)), tol=0.6)
    events = []
    for i in range(len(pts) - 1):
        a, b = pts[i], pts[i + 1]
        if i > 0:
            prev = pts[i - 1]
            h0 = math.atan2(a[1] - prev[1], a[0] - prev[0])
            h1 = math.atan2(b[1] - a[1], b[0] - a[0])
            turn = normalize_angle(h1 - h0)
            if turn > TURN_EVENT_RAD:
                events.append(("turn", "left"))
            elif turn < -TURN_EVENT_RAD:
                events.append(("turn", "right"))
        mid = ((a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0)
        events.append(("forward", _nearest_landmark(world, mid, within=LANDMARK_NEAR_M)))
    events.append(("stop", _nearest_landmark(world, waypoints[-1])))
    return events


def generate_instruction(world: World, waypoints, seed,
                         token_budget: int = 24) -> tuple[str, list[int]]:
    """Deterministic clause-template instruction for a waypoint path.

    Clauses are dropped from least informative first (plain forwards, then
    landmark mentions on forwards) so the text fits the encoder window while
    always keeping every turn and the final stop clause.
    """
    if len(waypoints) < 2:
        raise InputError("instruction generation needs at least 2 waypoints")
    rng = make_rng(0x1A57, *(seed if isinstance(seed, (tuple, list)) else (seed,)))
    events = _segment_events(world, waypoints)

    def render(evts, keep_mentions=True):
        words: list[str] = []
        prev_kind = None
        for kind, payload in evts:
            if kind == "forward":
                if prev_kind == "forward" and payload is None:
                    continue
                if words:
                    words.append(_GLUE[int(rng.integers(len(_GLUE)))])
                v, w = _FORWARD_PHRASES[int(rng.integers(len(_FORWARD_PHRASES)))]
                words.extend((v, w))
                if payload is not None and keep_mentions:
                    words.append(_PASS_WORDS[int(rng.integers(len(_PASS_WORDS)))])
                    words.append("the")
                    words.extend(LANDMARK_NAMES[payload].split())
            elif kind == "turn":
                if words:
                    words.append(_GLUE[int(rng.integers(len(_GLUE)))])
                words.append(_TURN_VERBS[int(rng.integers(len(_TURN_VERBS)))])
                words.append(payload)
            else:  # stop
                if words:
                    words.append(_GLUE[int(rng.integers(len(_GLUE)))])
                v, prep = _STOP_PHRASES[int(rng.integers(len(_STOP_PHRASES)))]
                words.append(v)
                if payload is not None:
                    words.append(prep)
                    words.append("the")
                    words.extend(LANDMARK_NAMES[payload].split())
            prev_kind = kind
        return words

    state = rng.bit_generator.state
    words = render(events)
    if len(words) > token_budget:
        # drop plain forward clauses between turns, keep turn order intact
        events = [e for i, e in enumerate(events)
                  if not (e[0] == "forward" and e[1] is None and 0 < i < len(events) - 2)]
        rng.bit_generator.state = state
        words = render(events)
    keep_mentions = True
    if len(words) > token_budget:
        keep_mentions = False
        rng.bit_generator.state = state
        words = render(events, keep_mentions=False)
    while len(words) > token_budget and len(events) > 2:
        events.pop(len(events) // 2)  # sacrifice mid-route clauses, keep the stop
        rng.bit_generator.state = state
        words = render(events, keep_mentions=keep_mentions)
    text = " ".join(words)
    return text, tokenize(text)


# ---------------------------------------------------------------------------
# Episodes and dataset emission


@dataclass
class Episode:
    id: str
    world_ref: dict               # {"seed": int, "split_tag": str}
    instruction_text: str
    instruction_tokens: list[int]
    start: Pose
    goal: tuple[float, float]
    waypoints: list[tuple[float, float]]
    high_actions: list[int]
    low_actions: list[tuple[float, float]]

    def to_json_line(self) -> str:
        def f(x):
            return float(format(x, ".17g"))

        obj = {
            "id": self.id,
            "world_ref": self.world_ref,
            "instruction_text": self.instruction_text,
            "instruction_tokens": self.instruction_tokens,
            "start": {"x": f(self.start.x), "y": f(self.start.y), "theta": f(self.start.theta)},
            "goal": [f(self.goal[0]), f(self.goal[1])],
            "waypoints": [[f(a), f(b)] for a, b in self.waypoints],
            "high_actions": [int(a) for a in self.high_actions],
            "low_actions": [[f(v), f(w)] for v, w in self.low_actions],
        }
        return json.dumps(obj, separators=(",", ":"), sort_keys=True)

    @staticmethod
    def from_json(obj: dict) -> "Episode":
        return Episode(
            id=obj["id"],
            world_ref=obj["world_ref"],
            instruction_text=obj["instruction_text"],
            instruction_tokens=list(obj["instruction_tokens"]),
            start=Pose(obj["start"]["x"], obj["start"]["y"], obj["start"]["theta"]),
            goal=(obj["goal"][0], obj["goal"][1]),
            waypoints=[(a, b) for a, b in obj["waypoints"]],
            high_actions=list(obj["high_actions"]),
            low_actions=[(v, w) for v, w in obj["low_actions"]],
        )


def replay_low_actions(world: World, start: Pose, low_actions,
                       sim: SimParams | None = None):
    """Open-loop deterministic replay of stored velocity commands."""
    sim = sim or SimParams()
    pose = start
    poses = [pose]
    collisions = 0
    for v, w in low_actions:
        cand = step_dynamics(pose, clamp_action(LowAction(v, w), sim), sim.dt)
        if check_collision(world, cand, sim.r_robot):
            collisions += 1
            cand = pose
        pose = cand
        poses.append(pose)
    return poses, collisions


@dataclass
class DataConfig:
    """Generation settings for one dataset directory."""

    out_dir: str = "dataset"
    master_seed: int = 1234
    world_size_m: float = 10.4
    landmark_count: int = 5
    cell_size: float = 0.1
    n_train: int = 300
    n_val_seen: int = 50
    n_val_unseen: int = 50
    paraphrases: int = 3
    seen_world_seeds: tuple = tuple(s for s in range(1, 25) if s % 10 != 0)
    unseen_world_seeds: tuple = (10, 20, 30, 40, 50, 60)
    min_geodesic_m: float = 5.5
    max_geodesic_m: float = 12.0
    candidate_budget_factor: int = 12

    def counts(self):
        return {"train": self.n_train, "val_seen": self.n_val_seen,
                "val_unseen": self.n_val_unseen}

    def config_hash(self) -> str:
        payload = json.dumps(self.__dict__, sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def sample_start_goal(world: World, mask: np.ndarray, rng, min_g: float, max_g: float):
    """Draw a (start pose, goal) pair with geodesic distance in the band."""
    cells = np.argwhere(mask)
    for _ in range(60):
        s_cell = tuple(cells[int(rng.integers(len(cells)))])
        g_cell = tuple(cells[int(rng.integers(len(cells)))])
        start_xy = _cell_center(world, s_cell)
        goal_xy = _cell_center(world, g_cell)
        try:
            cells_path, cost = astar_cells(mask, s_cell, g_cell)
        except NoPathError:
            continue
        geodesic = cost * world.cell_size
        if not (min_g <= geodesic <= max_g):
            continue
        theta = normalize_angle(float(rng.uniform(-math.pi, math.pi)))
        return Pose(start_xy[0], start_xy[1], theta), goal_xy, geodesic
    return None


def _make_trajectory(world: World, mask, rng, cfg: DataConfig, sim: SimParams):
    """One filtered demonstration or None (also reports the filter verdict)."""
    drawn = sample_start_goal(world, mask, rng, cfg.min_geodesic_m, cfg.max_geodesic_m)
    if drawn is None:
        return None, False
    start, goal_xy, _ = drawn
    plan = astar_plan(world, (start.x, start.y), goal_xy, sim.r_robot, mask=mask)
    waypoints = subdivide_waypoints(plan)
    if not filter_navigable(world, start, waypoints, sim):
        return None, True
    poses, low, high, _ = rollout_oracle(world, start, waypoints, sim)
    return {"start": start, "goal": goal_xy, "waypoints": waypoints,
            "low": low, "high": high, "poses": poses}, True


def emit_dataset(cfg: DataConfig, sim: SimParams | None = None) -> dict:
    """Generate all splits, write episodes.jsonl / manifest.json / vocab.json."""
    import os

    sim = sim or SimParams()
    os.makedirs(cfg.out_dir, exist_ok=True)
    counts = cfg.counts()
    split_seeds = {"train": cfg.seen_world_seeds, "val_seen": cfg.seen_world_seeds,
                   "val_unseen": cfg.unseen_world_seeds}
    episodes: list[Episode] = []
    split_ids: dict[str, list[str]] = {k: [] for k in counts}
    stats = {"candidates": 0, "accepted": 0, "step_counts": [],
             "action_hist": {a.name: 0 for a in HighAction}}
    worlds: dict[int, World] = {}
    masks: dict[int, np.ndarray] = {}

    for split, n_episodes in counts.items():
        # each trajectory carries `paraphrases` instructions; the last one may
        # carry fewer when the split size is not a multiple
        n_traj = -(-n_episodes // cfg.paraphrases)
        rng = make_rng(0xDA7A, cfg.master_seed, {"train": 0, "val_seen": 1, "val_unseen": 2}[split])
        made = 0
        budget = n_traj * cfg.candidate_budget_factor
        tries = 0
        while made < n_traj and tries < budget:
            tries += 1
            seed = int(split_seeds[split][int(rng.integers(len(split_seeds[split])))])
            if seed not in worlds:
                worlds[seed] = generate_world(seed, cfg.world_size_m, cfg.landmark_count,
                                              cfg.cell_size)
                masks[seed] = navigable_mask(worlds[seed], sim.r_robot)
            world = worlds[seed]
            traj, was_candidate = _make_trajectory(world, masks[seed], rng, cfg, sim)
            if was_candidate:
                stats["candidates"] += 1
            if traj is None:
                continue
            stats["accepted"] += 1
            stats["step_counts"].append(len(traj["low"]))
            for a in traj["high"]:
                stats["action_hist"][HighAction(a).name] += 1
            n_para = min(cfg.paraphrases, n_episodes - len(split_ids[split]))
            for k in range(n_para):
                text, tokens = generate_instruction(
                    world, traj["waypoints"], (cfg.master_seed, seed, made, k))
                ep = Episode(
                    id=f"{split}-{made:05d}-p{k}",
                    world_ref={"seed": seed, "split_tag": world.split_tag},
                    instruction_text=text,
                    instruction_tokens=tokens,
                    start=traj["start"],
                    goal=traj["goal"],
                    waypoints=traj["waypoints"],
                    high_actions=[int(a) for a in traj["high"]],
                    low_actions=[(a.v, a.omega) for a in traj["low"]],
                )
                episodes.append(ep)
                split_ids[split].append(ep.id)
            made += 1
        if made < n_traj:
            raise GenerationShortfallError(
                f"{split}: produced {made}/{n_traj} trajectories "
                f"({n_traj - made} short) within the retry budget")

    # re-validation pass: every emitted episode must replay cleanly
    for ep in episodes:
        world = worlds[ep.world_ref["seed"]]
        poses, collisions = replay_low_actions(world, ep.start, ep.low_actions, sim)
        final = poses[-1]
        d = math.hypot(final.x - ep.goal[0], final.y - ep.goal[1])
        if collisions > 0 or d >= success_threshold(world):
            raise GenerationShortfallError(f"episode {ep.id} failed re-validation")

    step_arr = np.array(stats["step_counts"]) if stats["step_counts"] else np.array([0])
    manifest = {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()},
        "config_hash": cfg.config_hash(),
        "splits": split_ids,
        "counts": {k: len(v) for k, v in split_ids.items()},
        "statistics": {
            "n_trajectories": int(stats["accepted"]),
            "acceptance_rate": (stats["accepted"] / stats["candidates"]
                                if stats["candidates"] else 0.0),
            "mean_steps": float(step_arr.mean()),
            "min_steps": int(step_arr.min()),
            "max_steps": int(step_arr.max()),
            "action_histogram": stats["action_hist"],
        },
        "vocab_hash": hashlib.sha256(
            json.dumps(VOCAB, sort_keys=True).encode()).hexdigest()[:16],
    }
    with open(os.path.join(cfg.out_dir, "episodes.jsonl"), "w") as fh:
        for ep in episodes:
            fh.write(ep.to_json_line() + "\n")
    with open(os.path.join(cfg.out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(cfg.out_dir, "vocab.json"), "w") as fh:
        json.dump(VOCAB, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(dataset_dir: str):
    """Read manifest + episodes; returns (manifest, {split: [Episode, ...]})."""
    import os

    with open(os.path.join(dataset_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    by_id = {}
    with open(os.path.join(dataset_dir, "episodes.jsonl")) as fh:
        for line in fh:
            ep = Episode.from_json(json.loads(line))
            by_id[ep.id] = ep
    splits = {split: [by_id[i] for i in ids] for split, ids in manifest["splits"].items()}
    return manifest, splits
