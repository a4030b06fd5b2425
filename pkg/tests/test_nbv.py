import math

import numpy as np
import pytest

from trimanual.collision import CollisionScene, config_in_collision, grid_from_points
from trimanual.kincore import Pose, fk_batch, forward_kinematics
from trimanual.nbv import NbvConfig, goal_pose, nbv_cost, plan_nbv, viewpoint_directions

from helpers import ypp_chain


def spot_scene(chains, grid=None):
    return CollisionScene(grid, {"spot": chains["spot"]})


def test_cost_zero_at_goal():
    cfg = NbvConfig()
    g = Pose.from_rpy(0.0, 0.0, 0.7, (1.0, 0.0, 0.5))
    assert nbv_cost(g, g, cfg) == 0.0


def test_cost_position_term():
    cfg = NbvConfig(weight_pos=2.0, weight_rot=10.0)
    g = Pose((1.0, 0.0, 0.5))
    p = Pose((1.1, 0.0, 0.5))
    assert nbv_cost(p, g, cfg) == pytest.approx(2.0 * 0.01)


def test_cost_ignores_yaw_when_free():
    cfg = NbvConfig(weight_pos=1.0, weight_rot=10.0)
    g = Pose((0.0, 0.0, 0.0))
    assert nbv_cost(Pose.from_rpy(0.0, 0.0, 1.0), g, cfg) == pytest.approx(0.0, abs=1e-12)
    assert nbv_cost(Pose.from_rpy(0.1, 0.0, 1.0), g, cfg) == pytest.approx(10.0 * 0.01)
    fixed = NbvConfig(yaw_free=False)
    assert nbv_cost(Pose.from_rpy(0.0, 0.0, 0.2), g, fixed) == pytest.approx(10.0 * 0.04)


def test_goal_pose_keeps_yaw_replaces_roll_pitch():
    cfg = NbvConfig(fixed_roll=0.0, fixed_pitch=0.1)
    g = goal_pose(Pose.from_rpy(0.5, -0.4, 1.2, (1, 2, 3)), cfg)
    np.testing.assert_allclose(g.rpy(), [0.0, 0.1, 1.2], atol=1e-12)


def test_viewpoint_directions_face_base():
    d = viewpoint_directions(np.array([1.5, 0, 0.7]), np.array([0.3, 0, 0.55]), 32)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
    assert np.all(d[:, 0] <= 1e-12)          # hemisphere toward the base (-x)
    assert d[0, 0] < -0.98


def test_unobstructed_target_is_feasible(chains):
    cfg = NbvConfig()
    sol = plan_nbv(chains["spot"], spot_scene(chains), Pose((1.3, 0.1, 0.7)), cfg)
    assert sol.feasible
    assert cfg.d_min - 1e-9 <= sol.standoff <= cfg.d_min + 0.05
    assert sol.roll_pitch_error(cfg) <= 0.05
    assert chains["spot"].admissible(sol.q)
    p = forward_kinematics(chains["spot"], sol.q)
    assert np.linalg.norm(p.position - [1.3, 0.1, 0.7]) == pytest.approx(sol.standoff)


def test_enclosing_shell_is_infeasible(chains):
    rng = np.random.default_rng(0)
    u = rng.normal(size=(20000, 3))
    u /= np.linalg.norm(u, axis=1)[:, None]
    target = np.array([1.3, 0.0, 0.7])
    shell = target + u * rng.uniform(0.60, 0.68, (len(u), 1))
    grid = grid_from_points(shell, 0.02, 0.02)
    sol = plan_nbv(chains["spot"], spot_scene(chains, grid), Pose(tuple(target)), NbvConfig())
    assert not sol.feasible
    assert math.isinf(sol.cost)


def test_far_target_is_infeasible(chains):
    sol = plan_nbv(chains["spot"], spot_scene(chains), Pose((5.0, 0.0, 0.7)), NbvConfig())
    assert not sol.feasible


def test_solutions_avoid_obstacles(chains):
    pts = [[1.0, y, 0.95] for y in np.arange(-0.4, 0.41, 0.02)]
    grid = grid_from_points(pts, 0.02, 0.02)
    scene = spot_scene(chains, grid)
    sol = plan_nbv(chains["spot"], scene, Pose((1.3, 0.0, 0.8)), NbvConfig())
    assert sol.feasible
    assert not config_in_collision(scene, {"spot": sol.q})


def test_rotation_weight_priority():
    """A high rotation weight keeps the tool level; a low one lets it pitch."""
    c = ypp_chain()
    scene = CollisionScene(None, {"ypp": c})
    target = Pose((0.3, 0.1, 1.35))
    hi = NbvConfig(weight_pos=1.0, weight_rot=100.0, d_min=0.3)
    lo = NbvConfig(weight_pos=1.0, weight_rot=0.01, d_min=0.3)
    s_hi = plan_nbv(c, scene, target, hi)
    s_lo = plan_nbv(c, scene, target, lo)
    assert s_hi.feasible and s_lo.feasible
    assert s_hi.roll_pitch_error(hi) < s_lo.roll_pitch_error(lo)


def test_reduced_chain_matches_dense_oracle():
    c = ypp_chain()
    cfg = NbvConfig(weight_pos=1.0, weight_rot=10.0, d_min=0.3)
    g1 = np.radians(np.arange(-180, 180, 2.0))
    g2 = np.radians(np.arange(-90, 90.01, 2.0))
    Q = np.stack(np.meshgrid(g1, g2, g2, indexing="ij"), -1).reshape(-1, 3)
    Rs, Ps = fk_batch(c, Q)
    pitch = np.arcsin(np.clip(-Rs[:, 2, 0], -1, 1))
    roll = np.arctan2(Rs[:, 2, 1], Rs[:, 2, 2])
    scene = CollisionScene(None, {"ypp": c})
    for target in ((0.25, 0.3, 1.3), (-0.2, 0.1, 1.4), (0.7, 0.2, 0.6)):
        sol = plan_nbv(c, scene, Pose(target), cfg)
        d = np.linalg.norm(Ps - target, axis=1)
        ok = (d >= cfg.d_min) & (d <= cfg.standoff_max)
        cost = cfg.weight_pos * d ** 2 + cfg.weight_rot * (roll ** 2 + pitch ** 2)
        oracle = cost[ok].min()
        assert sol.feasible
        assert sol.cost <= 1.05 * oracle
