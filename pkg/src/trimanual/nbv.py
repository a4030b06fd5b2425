"""Next-best-view placement of the carrier arm.

The tool is placed near the target under a weighted position/orientation cost,
a minimum standoff distance, joint limits and obstacle freedom. Roll and pitch
of the goal orientation are fixed by configuration; yaw is left free by default.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .collision import config_in_collision
from .kincore import FULL_POSE, IkConfig, Pose, forward_kinematics, ik_solve, wrap_angle

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass(frozen=True)
class NbvConfig:
    weight_pos: float = 1.0
    weight_rot: float = 10.0
    d_min: float = 0.45
    fixed_roll: float = 0.0
    fixed_pitch: float = 0.0
    yaw_free: bool = True
    n_starts: int = 64
    seed: int = 0
    # feasible standoff band is [d_min, max_standoff]; None means d_min + 0.10
    max_standoff: float | None = None
    # stop once a candidate is within this (relative) gap of the A*d_min^2 bound; None disables
    early_stop_tol: float | None = 1e-6
    refine_iters: int = 100
    ik: IkConfig = field(default_factory=IkConfig)

    def __post_init__(self):
        if self.weight_pos < 0 or self.weight_rot < 0 or self.weight_pos + self.weight_rot <= 0:
            raise ValueError("weights must be non-negative with a positive sum")
        if not self.d_min > 0:
            raise ValueError("d_min must be positive")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")

    @property
    def standoff_max(self):
        return self.d_min + 0.10 if self.max_standoff is None else self.max_standoff

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        ik = IkConfig(**d.pop("ik", {}))
        return cls(ik=ik, **d)


@dataclass(frozen=True, eq=False)
class NbvSolution:
    q: np.ndarray
    pose: Pose
    cost: float
    standoff: float
    starts_tried: int
    feasible: bool
    candidate_costs: tuple = ()

    def roll_pitch_error(self, cfg):
        r, p, _ = self.pose.rpy()
        return math.hypot(wrap_angle(r - cfg.fixed_roll), wrap_angle(p - cfg.fixed_pitch))

    def to_dict(self):
        r, p, y = self.pose.rpy()
        return {
            "feasible": self.feasible,
            "q": [float(x) for x in self.q],
            "pose": self.pose.to_dict(),
            "rpy": [r, p, y],
            "cost": self.cost,
            "standoff": self.standoff,
            "starts_tried": self.starts_tried,
        }


def nbv_cost(pose, goal, cfg):
    """A*|p - p_goal|^2 + B*(droll^2 + dpitch^2 [+ dyaw^2 unless yaw is free])."""
    dp = np.asarray(pose.position) - np.asarray(goal.position)
    r, p, y = pose.rpy()
    rg, pg, yg = goal.rpy()
    rot = wrap_angle(r - rg) ** 2 + wrap_angle(p - pg) ** 2
    if not cfg.yaw_free:
        rot += wrap_angle(y - yg) ** 2
    return float(cfg.weight_pos * (dp @ dp) + cfg.weight_rot * rot)


def goal_pose(target, cfg):
    """Goal pose: the target position with roll/pitch replaced by the configured values."""
    _, _, yaw = target.rpy()
    return Pose.from_rpy(cfg.fixed_roll, cfg.fixed_pitch, yaw, target.position)


def viewpoint_directions(target_pos, base_pos, n):
    """Fibonacci-lattice unit vectors on the hemisphere facing the base.

    The pole is the horizontal direction from the target toward the base;
    directions are ordered by increasing angle from the pole.
    """
    u0 = np.asarray(base_pos, float) - np.asarray(target_pos, float)
    u0[2] = 0.0
    nu = np.linalg.norm(u0)
    u0 = np.array([-1.0, 0.0, 0.0]) if nu < 1e-9 else u0 / nu
    e1 = np.cross([0.0, 0.0, 1.0], u0)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u0, e1)
    i = np.arange(n)
    cos_t = 1.0 - (i + 0.5) / n
    sin_t = np.sqrt(1.0 - cos_t ** 2)
    phi = i * GOLDEN_ANGLE
    return (cos_t[:, None] * u0
            + sin_t[:, None] * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2))


def viewpoint_pose(target_pos, direction, d, cfg):
    """Pose on the standoff sphere, tool x-axis turned toward the target in yaw."""
    pos = np.asarray(target_pos, float) + d * np.asarray(direction, float)
    to_t = np.asarray(target_pos, float) - pos
    yaw = math.atan2(to_t[1], to_t[0])
    return Pose.from_rpy(cfg.fixed_roll, cfg.fixed_pitch, yaw, pos)


def _refine(chain, q_start, goal, cfg):
    grpy = np.array(goal.rpy())
    q, cost, ok = K.nbv_refine(*chain.arrays, chain.lower, chain.upper, np.asarray(q_start, float),
                               np.array(goal.position), grpy, float(cfg.weight_pos),
                               float(cfg.weight_rot), bool(cfg.yaw_free), float(cfg.d_min),
                               float(cfg.standoff_max),
                               int(cfg.refine_iters), 1e-6)
    return q, float(cost), bool(ok)


def plan_nbv(chain, scene, target, cfg=NbvConfig(), q_seed=None):
    """Multi-start search for the minimum-cost feasible carrier-arm configuration.

    Candidates are viewpoints on the ``d_min`` sphere (base-facing hemisphere),
    each solved with damped least squares IK and then refined by projected
    descent on the view cost. Colliding or out-of-band candidates are dropped.
    Infeasibility is reported through ``feasible=False``.
    """
    goal = goal_pose(target, cfg)
    target_pos = np.asarray(target.position, float)
    scene = scene.with_chains(**{chain.name: chain})
    if q_seed is None:
        q_seed = 0.5 * (chain.lower + chain.upper)
    q_seed = chain.check_q(q_seed)
    rng = np.random.default_rng(cfg.seed)
    restarts = rng.uniform(chain.lower, chain.upper, size=(cfg.n_starts, chain.n_joints))

    lower_bound = cfg.weight_pos * cfg.d_min ** 2
    best = None
    costs = []
    dirs = viewpoint_directions(target_pos, chain.base_pose.position, cfg.n_starts)
    tried = 0
    for k, u in enumerate(dirs):
        tried += 1
        view = viewpoint_pose(target_pos, u, cfg.d_min, cfg)
        q_ik, ok, _, pr, rr = ik_solve(chain, view, q_seed, FULL_POSE, cfg.ik)
        if not ok:
            q_alt, ok_alt, _, pr2, rr2 = ik_solve(chain, view, restarts[k], FULL_POSE, cfg.ik)
            if ok_alt or pr2 + rr2 < pr + rr:
                q_ik = q_alt
        q, cost, ok = _refine(chain, q_ik, goal, cfg)
        if not ok:
            costs.append(math.inf)
            continue
        pose = forward_kinematics(chain, q)
        standoff = float(np.linalg.norm(pose.position - target_pos))
        feasible = (cfg.d_min - 1e-9 <= standoff <= cfg.standoff_max
                    and chain.admissible(q)
                    and not config_in_collision(scene, {chain.name: q}))
        if not feasible:
            costs.append(math.inf)
            continue
        costs.append(cost)
        if best is None or cost < best[2]:
            best = (q, pose, cost, standoff)
        if (cfg.early_stop_tol is not None
                and cost <= lower_bound + cfg.early_stop_tol * max(1.0, lower_bound)):
            break

    if best is None:
        q0 = q_seed
        pose0 = forward_kinematics(chain, q0)
        return NbvSolution(q0, pose0, math.inf,
                           float(np.linalg.norm(pose0.position - target_pos)), tried, False,
                           tuple(costs))
    q, pose, cost, standoff = best
    return NbvSolution(q, pose, cost, standoff, tried, True, tuple(costs))
