import math
from dataclasses import replace

import numpy as np
import pytest

from trimanual.bimanual import (PHASES, HarvestSequenceSpec, ReachProblem, interpolate_joint_path,
                                mounted_chains, plan_harvest_sequence, sequence_rows,
                                solve_min_displacement_reach, task_space_transform)
from trimanual.collision import CollisionScene, config_in_collision, grid_from_points
from trimanual.errors import PhaseInfeasible, Unreachable
from trimanual.geometry import Capsule
from trimanual.kincore import Pose, forward_kinematics, planar_chain
from trimanual.nbv import plan_nbv
from trimanual.scenario import load_scenario

from oracles import planar_grid

LENGTHS = (0.3, 0.25, 0.2)
LIMIT = math.radians(150)


@pytest.fixture(scope="module")
def planar():
    c = planar_chain(LENGTHS, "p3", LIMIT)
    return c, CollisionScene(None, {"p3": c})


@pytest.fixture(scope="module")
def indoor_setup():
    """Indoor scenario with the carrier parked at its planned viewpoint."""
    sc = load_scenario("indoor")
    fruit = sc.targets[0].position
    spot = sc.chains["spot"]
    sol = plan_nbv(spot, CollisionScene(None, {"spot": spot}), Pose(tuple(fruit)), sc.nbv,
                   np.array(sc.mission.start_q_spot))
    assert sol.feasible
    chains = mounted_chains(sc.chains, sol.q)
    return sc, fruit, chains


# --- task-space coupling -------------------------------------------------------------

def test_task_space_transform_identity():
    left, right = task_space_transform(Pose((1.0, 0.0, 0.5)), HarvestSequenceSpec())
    np.testing.assert_allclose(left, [1.0, 0.0, 0.6], atol=1e-12)
    np.testing.assert_allclose(right, [1.0, 0.0, 0.5], atol=1e-12)


def test_task_space_transform_rotated_fruit():
    fruit = Pose.from_rpy(math.pi / 2, 0.0, 0.0, (1.0, 0.0, 0.5))
    left, _ = task_space_transform(fruit, HarvestSequenceSpec())
    np.testing.assert_allclose(left, [1.0, -0.1, 0.5], atol=1e-12)


def test_task_space_transform_zero_offset():
    left, right = task_space_transform(Pose((0.2, 0.3, 0.4)),
                                       HarvestSequenceSpec(peduncle_offset=(0, 0, 0)))
    np.testing.assert_array_equal(left, right)


# --- minimum-displacement reach --------------------------------------------------------

def test_start_already_at_goal_returned_exactly(planar):
    c, scene = planar
    q0 = np.array([0.3, -0.4, 0.2])
    goal = forward_kinematics(c, q0).position
    q = solve_min_displacement_reach(ReachProblem("p3", q0, goal, scene))
    np.testing.assert_array_equal(q, q0)


def test_goal_beyond_reach(planar):
    c, scene = planar
    with pytest.raises(Unreachable):
        solve_min_displacement_reach(ReachProblem("p3", np.zeros(3), [0.9, 0.0, 0.0], scene))


def test_reach_matches_grid_oracle(planar):
    c, scene = planar
    Q, P = planar_grid(LENGTHS, 150, 2.0)
    rng = np.random.default_rng(8)
    for i in range(10):
        q0 = rng.uniform(-LIMIT, LIMIT, 3)
        r, th = rng.uniform(0.15, 0.7), rng.uniform(-math.pi, math.pi)
        goal = np.array([r * math.cos(th), r * math.sin(th), 0.0])
        q = solve_min_displacement_reach(ReachProblem("p3", q0, goal, scene, 0.005, 64, i))
        near = np.hypot(P[:, 0] - goal[0], P[:, 1] - goal[1]) <= 0.005
        oracle = ((Q[near] - q0) ** 2).sum(1).min()
        assert ((q - q0) ** 2).sum() <= 1.01 * oracle + 1e-9
        assert np.linalg.norm(forward_kinematics(c, q).position - goal) <= 0.005 + 1e-12
        assert c.admissible(q)


def test_reach_avoids_obstacles(planar):
    c, _ = planar
    q0 = np.zeros(3)
    goal = np.array([0.0, 0.5, 0.0])
    free = solve_min_displacement_reach(ReachProblem("p3", q0, goal, CollisionScene(None, {"p3": c})))
    # block the unconstrained answer's elbow and require a different solution
    elbow = forward_kinematics(planar_chain(LENGTHS[:2], "e"), free[:2]).position
    grid = grid_from_points([elbow], 0.02, 0.01)
    capped = replace(c, capsules=(Capsule(0, (0, 0, 0), (0.3, 0, 0), 0.01),
                                  Capsule(1, (0, 0, 0), (0.25, 0, 0), 0.01),
                                  Capsule(2, (0, 0, 0), (0.2, 0, 0), 0.01)))
    scene = CollisionScene(grid, {"p3": capped})
    q = solve_min_displacement_reach(ReachProblem("p3", q0, goal, scene))
    assert not config_in_collision(scene, {"p3": q})
    assert np.linalg.norm(forward_kinematics(capped, q).position - goal) <= 0.005 + 1e-12


# --- interpolation ------------------------------------------------------------------

def test_interpolation_waypoint_count_and_gaps():
    t, Q = interpolate_joint_path([0.0, 0.0], [0.5, -0.2], 0.05, 2.0, t0=1.0)
    assert len(Q) == 11
    assert np.max(np.abs(np.diff(Q, axis=0))) <= 0.05 + 1e-12
    np.testing.assert_array_equal(Q[0], [0.0, 0.0])
    np.testing.assert_array_equal(Q[-1], [0.5, -0.2])
    assert t[0] == 1.0 and t[-1] == pytest.approx(3.0)


def test_interpolation_of_a_standstill():
    t, Q = interpolate_joint_path([0.1], [0.1], 0.05, 0.5)
    assert len(Q) == 2
    np.testing.assert_allclose(t, [0.0, 0.5])


# --- full sequence ---------------------------------------------------------------------

def test_nominal_sequence_phase_order(indoor_setup):
    sc, fruit, chains = indoor_setup
    m = sc.mission
    scene = CollisionScene(None, chains, sc.self_pairs)
    segs = plan_harvest_sequence(Pose(tuple(fruit)), m.stowed_left, m.stowed_right, scene,
                                 sc.sequence)
    labels = []
    for s in sorted(segs, key=lambda s: (s.t_start, PHASES.index(s.label))):
        if s.label not in labels:
            labels.append(s.label)
    assert labels == ["extend", "left-reach", "left-hold", "right-reach", "twist", "retract"]
    hold = next(s for s in segs if s.label == "left-hold")
    twist = next(s for s in segs if s.label == "twist")
    assert hold.t_end <= twist.t_start and hold.t_start < twist.t_start
    for s in segs:
        if s.label == "retract":
            q0 = m.stowed_left if s.chain == "left" else m.stowed_right
            np.testing.assert_array_equal(s.q[-1], q0)
    left_goal, right_goal = task_space_transform(Pose(tuple(fruit)), sc.sequence)
    ql = next(s for s in segs if s.label == "left-hold").q[0]
    qr = next(s for s in segs if s.label == "right-reach").q[-1]
    assert np.linalg.norm(forward_kinematics(chains["left"], ql).position - left_goal) <= 0.005
    assert np.linalg.norm(forward_kinematics(chains["right"], qr).position - right_goal) <= 0.005
    rows = sequence_rows(segs)
    assert [r[0] for r in rows] == sorted(r[0] for r in rows)


def test_blocked_peduncle_fails_at_left_reach(indoor_setup):
    sc, fruit, chains = indoor_setup
    m = sc.mission
    left_goal, _ = task_space_transform(Pose(tuple(fruit)), sc.sequence)
    slab = [left_goal + [dx, dy, 0.0] for dx in (-0.02, 0, 0.02) for dy in (-0.02, 0, 0.02)]
    scene = CollisionScene(grid_from_points(slab, 0.02, 0.01), chains, sc.self_pairs)
    with pytest.raises(PhaseInfeasible) as ei:
        plan_harvest_sequence(Pose(tuple(fruit)), m.stowed_left, m.stowed_right, scene,
                              sc.sequence)
    assert ei.value.phase == "left-reach"
    assert ei.value.cause == "NoCollisionFreeSolution"


def test_spec_validation():
    with pytest.raises(ValueError):
        HarvestSequenceSpec(twist_angle=0.0)
    with pytest.raises(ValueError):
        HarvestSequenceSpec(phase_durations={"twist": 0.0})
