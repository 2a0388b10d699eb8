"""Continuous-control navigation environment over semantic occupancy grids.

Worlds are procedurally generated room-and-corridor layouts on a square grid
(0.1 m cells by default). The robot is a differential-drive disc driven by
clamped (v, omega) commands under unicycle kinematics; observations are a
7x7 egocentric semantic lattice plus a 7x7 raycast range image.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from .autodiff import make_rng
from .errors import WorldGenerationError

CELL_FREE = 0
CELL_WALL = 1
LANDMARK_BASE = 2  # landmark class i occupies cell value LANDMARK_BASE + i

LANDMARK_NAMES = [
    "red crate", "blue barrel", "green box", "yellow cone",
    "white shelf", "black pillar", "orange drum", "purple bench",
]
N_LANDMARK_CLASSES = len(LANDMARK_NAMES)
N_CELL_CLASSES = LANDMARK_BASE + N_LANDMARK_CLASSES  # rgb one-hot channel count

_CELL_CHARS = ".#" + "ABCDEFGH"


class HighAction(IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


FORWARD_STEP_M = 0.25
TURN_STEP_RAD = math.radians(15.0)


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    t = math.remainder(theta, 2.0 * math.pi)
    if t <= -math.pi:
        t += 2.0 * math.pi
    return t


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float


@dataclass(frozen=True)
class LowAction:
    v: float
    omega: float


@dataclass
class SimParams:
    """Kinematic and sensing defaults for the desk-scale robot."""

    v_max: float = 0.5
    omega_max: float = math.pi / 2.0
    dt: float = 0.1
    r_robot: float = 0.18
    v_stop: float = 0.02
    omega_stop: float = 0.05
    n_stop: int = 10
    obs_size: int = 7
    fov: float = math.pi / 2.0
    max_range: float = 3.0
    max_steps: int = 1000


@dataclass
class Observation:
    rgb: np.ndarray    # [7,7,C] one-hot semantic channels
    depth: np.ndarray  # [7,7,1] range / max_range in [0,1]


@dataclass
class World:
    seed: int
    cell_size: float
    grid: np.ndarray  # int8 [n_rows, n_cols]; row r spans y in [r*s, (r+1)*s)
    landmarks: list  # (class_id, (r0, c0, r1, c1)) inclusive cell rects
    split_tag: str

    @property
    def n_rows(self) -> int:
        return self.grid.shape[0]

    @property
    def n_cols(self) -> int:
        return self.grid.shape[1]

    @property
    def width_m(self) -> float:
        return self.n_cols * self.cell_size

    @property
    def height_m(self) -> float:
        return self.n_rows * self.cell_size

    def cell_index(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(y / self.cell_size)), int(math.floor(x / self.cell_size))

    def cell_class(self, x: float, y: float) -> int:
        """Cell class at a world point; outside the grid counts as wall."""
        r, c = self.cell_index(x, y)
        if r < 0 or c < 0 or r >= self.n_rows or c >= self.n_cols:
            return CELL_WALL
        return int(self.grid[r, c])

    def landmark_center(self, class_id: int) -> tuple[float, float]:
        for cid, (r0, c0, r1, c1) in self.landmarks:
            if cid == class_id:
                s = self.cell_size
                return ((c0 + c1 + 1) * 0.5 * s, (r0 + r1 + 1) * 0.5 * s)
        raise KeyError(f"landmark class {class_id} not present")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "cell_size": self.cell_size,
            "width": self.n_cols,
            "height": self.n_rows,
            "rows": ["".join(_CELL_CHARS[v] for v in row) for row in self.grid],
            "legend": {_CELL_CHARS[LANDMARK_BASE + i]: LANDMARK_NAMES[i]
                       for i in range(N_LANDMARK_CLASSES)},
            "landmarks": [[cid, list(rect)] for cid, rect in self.landmarks],
            "split_tag": self.split_tag,
        }

    @staticmethod
    def from_json(obj: dict) -> "World":
        grid = np.array([[_CELL_CHARS.index(ch) for ch in row] for row in obj["rows"]],
                        dtype=np.int8)
        landmarks = [(cid, tuple(rect)) for cid, rect in obj["landmarks"]]
        return World(obj["seed"], obj["cell_size"], grid, landmarks, obj["split_tag"])


def split_for_seed(seed: int) -> str:
    """World split rule: every tenth seed is held out as unseen."""
    return "unseen" if seed % 10 == 0 else "seen"


def success_threshold(world: World) -> float:
    """Goal radius: 3 m, shrunk to 20% of the diagonal on small worlds."""
    return min(3.0, 0.2 * math.hypot(world.width_m, world.height_m))


# ---------------------------------------------------------------------------
# Procedural generation


def _carve(grid, r0, c0, r1, c1, value=CELL_FREE):
    grid[r0:r1 + 1, c0:c1 + 1] = value


def _free_connected(grid) -> bool:
    free = grid == CELL_FREE
    total = int(free.sum())
    if total == 0:
        return False
    seen = np.zeros_like(free)
    start = tuple(np.argwhere(free)[0])
    stack = [start]
    seen[start] = True
    count = 0
    while stack:
        r, c = stack.pop()
        count += 1
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nr, nc = r + dr, c + dc
            if 0 <= nr < grid.shape[0] and 0 <= nc < grid.shape[1] \
                    and free[nr, nc] and not seen[nr, nc]:
                seen[nr, nc] = True
                stack.append((nr, nc))
    return count == total


def _try_generate(seed: int, attempt: int, size_m: float, landmark_count: int,
                  cell_size: float) -> World | None:
    rng = make_rng(0x5EED, seed, attempt)
    n = int(round(size_m / cell_size))
    grid = np.full((n, n), CELL_WALL, dtype=np.int8)

    # non-overlapping rooms with a 2-cell outer margin
    n_rooms = int(rng.integers(4, 7))
    rooms = []
    for _ in range(200):
        if len(rooms) == n_rooms:
            break
        h = int(rng.integers(18, 31))
        w = int(rng.integers(18, 31))
        r0 = int(rng.integers(2, n - h - 2))
        c0 = int(rng.integers(2, n - w - 2))
        rect = (r0, c0, r0 + h - 1, c0 + w - 1)
        if all(rect[0] > o[2] + 2 or o[0] > rect[2] + 2 or rect[1] > o[3] + 2 or o[1] > rect[3] + 2
               for o in rooms):
            rooms.append(rect)
    if len(rooms) < 3:
        return None
    for rect in rooms:
        _carve(grid, *rect)

    # L-shaped corridors along a random room ordering, plus one extra loop edge
    width = 9
    order = list(rng.permutation(len(rooms)))
    pairs = list(zip(order, order[1:]))
    if len(rooms) > 2:
        extra = (order[0], order[-1])
        pairs.append(extra)
    for a, b in pairs:
        ra, ca = (rooms[a][0] + rooms[a][2]) // 2, (rooms[a][1] + rooms[a][3]) // 2
        rb, cb = (rooms[b][0] + rooms[b][2]) // 2, (rooms[b][1] + rooms[b][3]) // 2
        half = width // 2
        if rng.integers(2) == 0:  # horizontal then vertical
            _carve(grid, ra - half, min(ca, cb) - half, ra + half, max(ca, cb) + half)
            _carve(grid, min(ra, rb) - half, cb - half, max(ra, rb) + half, cb + half)
        else:
            _carve(grid, min(ra, rb) - half, ca - half, max(ra, rb) + half, ca + half)
            _carve(grid, rb - half, min(ca, cb) - half, rb + half, max(ca, cb) + half)

    # restore the outer boundary in case a corridor clipped it
    grid[:2, :] = CELL_WALL
    grid[-2:, :] = CELL_WALL
    grid[:, :2] = CELL_WALL
    grid[:, -2:] = CELL_WALL
    if not _free_connected(grid):
        return None

    # landmark blocks: distinct classes, interior placement with clearance
    classes = rng.choice(N_LANDMARK_CLASSES, size=landmark_count, replace=False)
    landmarks = []
    block = 4
    for cid in classes:
        placed = False
        for _ in range(60):
            room = rooms[int(rng.integers(len(rooms)))]
            r0 = int(rng.integers(room[0] + 4, room[2] - 4 - block + 2))
            c0 = int(rng.integers(room[1] + 4, room[3] - 4 - block + 2))
            rect = (r0, c0, r0 + block - 1, c0 + block - 1)
            region = grid[rect[0] - 2:rect[2] + 3, rect[1] - 2:rect[3] + 3]
            if np.all(region == CELL_FREE):
                grid[rect[0]:rect[2] + 1, rect[1]:rect[3] + 1] = LANDMARK_BASE + int(cid)
                if not _free_connected(grid):
                    grid[rect[0]:rect[2] + 1, rect[1]:rect[3] + 1] = CELL_FREE
                    continue
                landmarks.append((int(cid), rect))
                placed = True
                break
        if not placed:
            return None

    return World(seed, cell_size, grid, landmarks, split_for_seed(seed))


def generate_world(seed: int, size_m: float = 10.4, landmark_count: int = 5,
                   cell_size: float = 0.1) -> World:
    """Deterministic room-and-corridor world for a given seed."""
    if size_m < 5.0:
        raise WorldGenerationError(f"world size must be >= 5 m, got {size_m}")
    if landmark_count < 2 or landmark_count > N_LANDMARK_CLASSES:
        raise WorldGenerationError(f"landmark_count must be in [2, {N_LANDMARK_CLASSES}]")
    for attempt in range(25):
        world = _try_generate(seed, attempt, size_m, landmark_count, cell_size)
        if world is not None:
            return world
    raise WorldGenerationError(f"world generation exhausted retries for seed {seed}")


# ---------------------------------------------------------------------------
# Kinematics and collision


def clamp_action(a: LowAction, sim: SimParams) -> LowAction:
    return LowAction(
        v=min(max(a.v, 0.0), sim.v_max),
        omega=min(max(a.omega, -sim.omega_max), sim.omega_max),
    )


def step_dynamics(p: Pose, a: LowAction, dt: float = 0.1) -> Pose:
    """Unicycle update; the heading stays normalized to (-pi, pi]."""
    return Pose(
        x=p.x + a.v * math.cos(p.theta) * dt,
        y=p.y + a.v * math.sin(p.theta) * dt,
        theta=normalize_angle(p.theta + a.omega * dt),
    )


def check_collision(world: World, p: Pose, r_robot: float = 0.18) -> bool:
    """True iff the robot disc strictly overlaps any wall or landmark cell."""
    s = world.cell_size
    if p.x < 0 or p.y < 0 or p.x > world.width_m or p.y > world.height_m:
        return True
    r0 = int(math.floor((p.y - r_robot) / s))
    r1 = int(math.floor((p.y + r_robot) / s))
    c0 = int(math.floor((p.x - r_robot) / s))
    c1 = int(math.floor((p.x + r_robot) / s))
    rr = r_robot * r_robot
    for r in range(r0, r1 + 1):
        for c in range(c0, c1 + 1):
            if r < 0 or c < 0 or r >= world.n_rows or c >= world.n_cols:
                cls = CELL_WALL
            else:
                cls = world.grid[r, c]
            if cls == CELL_FREE:
                continue
            # distance from the disc centre to this cell's rectangle
            dx = max(c * s - p.x, 0.0, p.x - (c + 1) * s)
            dy = max(r * s - p.y, 0.0, p.y - (r + 1) * s)
            if dx * dx + dy * dy < rr:
                return True
    return False


# ---------------------------------------------------------------------------
# Observation rendering


def _ray_distance(world: World, x: float, y: float, angle: float, max_range: float) -> float:
    """Exact grid-DDA distance to the first non-free cell along a bearing."""
    s = world.cell_size
    dx, dy = math.cos(angle), math.sin(angle)
    r, c = world.cell_index(x, y)
    step_c = 1 if dx > 0 else -1
    step_r = 1 if dy > 0 else -1
    t_max_x = ((c + (step_c > 0)) * s - x) / dx if dx != 0 else math.inf
    t_max_y = ((r + (step_r > 0)) * s - y) / dy if dy != 0 else math.inf
    t_dx = abs(s / dx) if dx != 0 else math.inf
    t_dy = abs(s / dy) if dy != 0 else math.inf
    t = 0.0
    while t <= max_range:
        if t_max_x < t_max_y:
            t = t_max_x
            t_max_x += t_dx
            c += step_c
        else:
            t = t_max_y
            t_max_y += t_dy
            r += step_r
        if t > max_range:
            break
        if r < 0 or c < 0 or r >= world.n_rows or c >= world.n_cols:
            return t
        if world.grid[r, c] != CELL_FREE:
            return t
    return max_range


def render_observation(world: World, p: Pose, sim: SimParams | None = None) -> Observation:
    """Egocentric forward window: one-hot class lattice + per-bearing ranges.

    The lattice is polar: rows are ranges (near to far), columns are bearings
    sweeping left to right across the field of view. Depth is the raycast
    distance along each column bearing divided by max range, so a column is
    constant and encodes the first obstacle along that line of sight.
    """
    sim = sim or SimParams()
    n = sim.obs_size
    bearings = np.linspace(sim.fov / 2.0, -sim.fov / 2.0, n)
    ranges = sim.max_range * (np.arange(n) + 1.0) / n
    rgb = np.zeros((n, n, N_CELL_CLASSES))
    depth = np.zeros((n, n, 1))
    for j, b in enumerate(bearings):
        ang = p.theta + b
        d = _ray_distance(world, p.x, p.y, ang, sim.max_range)
        depth[:, j, 0] = d / sim.max_range
        ca, sa = math.cos(ang), math.sin(ang)
        for i, rho in enumerate(ranges):
            px, py = p.x + rho * ca, p.y + rho * sa
            if 0 <= px < world.width_m and 0 <= py < world.height_m:
                rgb[i, j, world.cell_class(px, py)] = 1.0
    return Observation(rgb=rgb, depth=depth)


# ---------------------------------------------------------------------------
# Episode protocol


@dataclass
class Trajectory:
    poses: list
    actions: list
    declared_stop: bool = False
    kinematic_stop: bool = False
    collisions: int = 0

    @property
    def final_pose(self) -> Pose:
        return self.poses[-1]

    @property
    def n_steps(self) -> int:
        return len(self.actions)

    def path_xy(self) -> np.ndarray:
        return np.array([[q.x, q.y] for q in self.poses])

    def length_m(self) -> float:
        xy = self.path_xy()
        if len(xy) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(xy, axis=0), axis=1)))


def _kinematic_stop(actions, sim: SimParams) -> bool:
    if len(actions) < sim.n_stop:
        return False
    tail = actions[-sim.n_stop:]
    return all(abs(a.v) < sim.v_stop and abs(a.omega) < sim.omega_stop for a in tail)


def run_episode(world: World, policy, instruction_tokens, start: Pose,
                max_steps: int | None = None, sim: SimParams | None = None) -> Trajectory:
    """Closed loop observe -> act -> clamp -> integrate, with collision slide.

    A commanded step that would collide leaves the pose unchanged (and counts
    a collision); the episode keeps going. Termination: the policy declares a
    stop, the kinematic stop condition holds, or the step budget runs out.
    """
    sim = sim or SimParams()
    budget = max_steps if max_steps is not None else sim.max_steps
    traj = Trajectory(poses=[start], actions=[])
    pose = start
    policy.begin_episode(instruction_tokens)
    for _ in range(budget):
        obs = render_observation(world, pose, sim)
        action, declared = policy.act(obs)
        if declared:
            traj.declared_stop = True
            break
        action = clamp_action(action, sim)
        cand = step_dynamics(pose, action, sim.dt)
        if check_collision(world, cand, sim.r_robot):
            traj.collisions += 1
            cand = pose
        pose = cand
        traj.poses.append(pose)
        traj.actions.append(action)
        if _kinematic_stop(traj.actions, sim):
            traj.kinematic_stop = True
            break
    return traj


def is_success(traj: Trajectory, goal: tuple[float, float], d_a: float) -> bool:
    """Success: the agent stopped (declared or kinematic) within d_a of goal."""
    if not (traj.declared_stop or traj.kinematic_stop):
        return False
    f = traj.final_pose
    return math.hypot(f.x - goal[0], f.y - goal[1]) < d_a
