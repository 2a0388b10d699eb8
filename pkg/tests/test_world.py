"""Tests for world generation, kinematics, collision, rendering, episodes."""

import math

import numpy as np
import pytest

from langnav import world as W
from langnav.errors import WorldGenerationError
from langnav.world import (HighAction, LowAction, Pose, SimParams,
                           check_collision, generate_world, is_success,
                           normalize_angle, render_observation, run_episode,
                           step_dynamics)


def make_box_world(n=80, cell=0.1, wall=2):
    """Plain rectangular room used by unit tests."""
    grid = np.full((n, n), W.CELL_WALL, dtype=np.int8)
    grid[wall:n - wall, wall:n - wall] = W.CELL_FREE
    return W.World(seed=0, cell_size=cell, grid=grid, landmarks=[], split_tag="seen")


# ---------------------------------------------------------------------------
# Generation


def test_generate_world_deterministic():
    a = generate_world(3)
    b = generate_world(3)
    assert a.grid.tobytes() == b.grid.tobytes()
    assert a.landmarks == b.landmarks


def test_generate_world_split_rule():
    assert generate_world(10).split_tag == "unseen"
    assert generate_world(11).split_tag == "seen"
    assert W.split_for_seed(20) == "unseen"


def test_generate_world_rejects_small_size():
    with pytest.raises(WorldGenerationError):
        generate_world(1, size_m=3.0)


def _flood_fill_count(grid):
    # independent oracle: BFS over free cells
    free = grid == W.CELL_FREE
    from collections import deque
    start = tuple(np.argwhere(free)[0])
    seen = {start}
    q = deque([start])
    while q:
        r, c = q.popleft()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            p = (r + dr, c + dc)
            if 0 <= p[0] < grid.shape[0] and 0 <= p[1] < grid.shape[1] \
                    and free[p] and p not in seen:
                seen.add(p)
                q.append(p)
    return len(seen)


def test_generate_world_invariants_100_seeds():
    for seed in range(1, 101):
        w = generate_world(seed)
        # outer boundary is wall
        assert np.all(w.grid[0, :] == W.CELL_WALL) and np.all(w.grid[-1, :] == W.CELL_WALL)
        assert np.all(w.grid[:, 0] == W.CELL_WALL) and np.all(w.grid[:, -1] == W.CELL_WALL)
        # free space is one connected component (flood-fill oracle)
        assert _flood_fill_count(w.grid) == int((w.grid == W.CELL_FREE).sum()), seed
        # landmarks: connected rect regions adjacent to free space
        for cid, (r0, c0, r1, c1) in w.landmarks:
            assert np.all(w.grid[r0:r1 + 1, c0:c1 + 1] == W.LANDMARK_BASE + cid)
            ring = w.grid[r0 - 1:r1 + 2, c0 - 1:c1 + 2]
            assert np.any(ring == W.CELL_FREE)


# ---------------------------------------------------------------------------
# Dynamics


def test_step_dynamics_straight_line():
    p = step_dynamics(Pose(0, 0, 0), LowAction(0.25, 0.0), dt=1.0)
    assert (p.x, p.y, p.theta) == (0.25, 0.0, 0.0)


def test_step_dynamics_pure_rotation():
    p = step_dynamics(Pose(0, 0, 0), LowAction(0.0, math.pi / 2), dt=1.0)
    assert p.x == 0.0 and p.y == 0.0
    assert abs(p.theta - math.pi / 2) < 1e-12


def test_step_dynamics_circle_arc_oracle():
    v, om, dt = 0.25, 0.5, 0.01
    p = Pose(0, 0, 0)
    n = 100
    for _ in range(n):
        p = step_dynamics(p, LowAction(v, om), dt)
    t = n * dt
    r = v / om
    ex, ey = r * math.sin(om * t), r * (1 - math.cos(om * t))
    assert math.hypot(p.x - ex, p.y - ey) < 1e-3


def test_theta_stays_normalized():
    p = Pose(0, 0, 0)
    for _ in range(1000):
        p = step_dynamics(p, LowAction(0.1, 1.3), dt=0.1)
        assert -math.pi < p.theta <= math.pi


def test_normalize_angle_boundary():
    assert normalize_angle(math.pi) == math.pi
    assert normalize_angle(-math.pi) == math.pi
    assert abs(normalize_angle(3 * math.pi / 2) + math.pi / 2) < 1e-12


def test_dynamics_deterministic():
    a = step_dynamics(Pose(1.1, 2.2, 0.7), LowAction(0.3, -0.4), 0.1)
    b = step_dynamics(Pose(1.1, 2.2, 0.7), LowAction(0.3, -0.4), 0.1)
    assert a == b


# ---------------------------------------------------------------------------
# Collision


def test_collision_free_room_center():
    w = make_box_world()
    assert not check_collision(w, Pose(4.0, 4.0, 0.0))


def test_collision_inside_wall():
    w = make_box_world()
    assert check_collision(w, Pose(0.05, 0.05, 0.0))


def test_collision_outside_grid():
    w = make_box_world()
    assert check_collision(w, Pose(-1.0, 4.0, 0.0))


def test_collision_tangent_is_free():
    # wall face at x = 0.2; disc centre exactly r away must NOT collide
    w = make_box_world()
    r = 0.18
    assert not check_collision(w, Pose(0.2 + r, 4.0, 0.0), r_robot=r)
    assert check_collision(w, Pose(0.2 + r - 1e-9, 4.0, 0.0), r_robot=r)


# ---------------------------------------------------------------------------
# Rendering


def test_render_wall_ahead_center_column_depth():
    w = make_box_world(n=80, wall=2)
    # wall face at x = 7.8; stand 1 m back, facing +x
    pose = Pose(6.8, 4.03, 0.0)
    obs = render_observation(w, pose)
    np.testing.assert_allclose(obs.depth[:, 3, 0], 1.0 / 3.0, atol=1e-9)


def test_render_empty_surroundings():
    w = make_box_world(n=120)  # 12 m box, centre is > 3 m from any wall
    obs = render_observation(w, Pose(6.0, 6.0, 0.37))
    np.testing.assert_allclose(obs.depth, 1.0)
    assert np.all(obs.rgb[:, :, W.CELL_FREE] == 1.0)
    assert np.all(obs.rgb[:, :, 1:] == 0.0)


def test_render_semantic_channels_sum_at_most_one():
    w = generate_world(5)
    pose = _free_pose(w)
    obs = render_observation(w, pose)
    sums = obs.rgb.sum(axis=-1)
    assert np.all((sums == 0.0) | (sums == 1.0))
    assert np.all(obs.depth >= 0.0) and np.all(obs.depth <= 1.0)


def _free_pose(w, margin=0.4):
    # first free cell with clearance, centre of cell
    for r in range(2, w.n_rows - 2):
        for c in range(2, w.n_cols - 2):
            x, y = (c + 0.5) * w.cell_size, (r + 0.5) * w.cell_size
            if not check_collision(w, Pose(x, y, 0.0), r_robot=margin):
                return Pose(x + 0.013, y + 0.007, 0.31)
    raise AssertionError("no free pose found")


def test_render_rotation_equivariance():
    w = generate_world(7)
    n = w.n_rows
    rot = np.zeros_like(w.grid)
    for r in range(n):
        for c in range(n):
            rot[c, n - 1 - r] = w.grid[r, c]  # world content rotated 90 deg CCW
    w_rot = W.World(seed=7, cell_size=w.cell_size, grid=rot, landmarks=[], split_tag="seen")
    pose = _free_pose(w)
    pose_rot = Pose(w.width_m - pose.y, pose.x, normalize_angle(pose.theta + math.pi / 2))
    a = render_observation(w, pose)
    b = render_observation(w_rot, pose_rot)
    np.testing.assert_allclose(a.depth, b.depth, atol=1e-9)
    np.testing.assert_array_equal(a.rgb, b.rgb)


def test_render_pure_function():
    w = generate_world(9)
    pose = _free_pose(w)
    a = render_observation(w, pose)
    b = render_observation(w, pose)
    np.testing.assert_array_equal(a.rgb, b.rgb)
    np.testing.assert_array_equal(a.depth, b.depth)


# ---------------------------------------------------------------------------
# Episodes


class StopNowPolicy:
    def begin_episode(self, tokens):
        pass

    def act(self, obs):
        return LowAction(0, 0), True


class ConstantPolicy:
    def __init__(self, v, omega):
        self.a = LowAction(v, omega)

    def begin_episode(self, tokens):
        pass

    def act(self, obs):
        return self.a, False


def test_run_episode_immediate_stop():
    w = make_box_world()
    traj = run_episode(w, StopNowPolicy(), [], Pose(4, 4, 0))
    assert len(traj.poses) == 1 and traj.n_steps == 0
    assert traj.declared_stop
    assert is_success(traj, goal=(4.2, 4.0), d_a=1.0)
    assert not is_success(traj, goal=(7.5, 7.5), d_a=1.0)


def test_run_episode_max_steps_no_stop_means_failure():
    w = make_box_world(n=200)  # big box so the robot can drive for a while
    traj = run_episode(w, ConstantPolicy(0.5, 0.0), [], Pose(1.0, 10.0, 0.0), max_steps=50)
    assert traj.n_steps == 50
    assert not traj.declared_stop and not traj.kinematic_stop
    # within threshold of its own endpoint but still translating: not success
    f = traj.final_pose
    assert not is_success(traj, goal=(f.x, f.y), d_a=3.0)


def test_run_episode_kinematic_stop():
    w = make_box_world()
    traj = run_episode(w, ConstantPolicy(0.0, 0.0), [], Pose(4, 4, 0), max_steps=100)
    assert traj.kinematic_stop
    assert traj.n_steps == SimParams().n_stop
    assert is_success(traj, goal=(4.1, 4.0), d_a=0.5)


def test_run_episode_collision_slide_keeps_poses_legal():
    w = make_box_world()
    sim = SimParams()
    traj = run_episode(w, ConstantPolicy(0.5, 0.0), [], Pose(7.0, 4.0, 0.0), max_steps=60)
    assert traj.collisions > 0
    for p in traj.poses:
        assert not check_collision(w, p, sim.r_robot)


def test_success_threshold_scaling():
    small = make_box_world(n=80)   # 8 m -> 20% of diagonal
    assert abs(W.success_threshold(small) - 0.2 * math.hypot(8, 8)) < 1e-12
    big = make_box_world(n=160)    # 16 m across -> capped at 3 m
    assert W.success_threshold(big) == 3.0


def test_high_action_granularity():
    assert W.FORWARD_STEP_M == 0.25
    assert abs(W.TURN_STEP_RAD - math.radians(15)) < 1e-12
    assert [a.name for a in HighAction] == ["FORWARD", "TURN_LEFT", "TURN_RIGHT", "STOP"]


def test_world_json_roundtrip():
    w = generate_world(4)
    j = w.to_json()
    w2 = W.World.from_json(j)
    assert np.array_equal(w.grid, w2.grid)
    assert w2.landmarks == w.landmarks
    assert isinstance(j["rows"][0], str)
