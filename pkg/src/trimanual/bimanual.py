"""Min-displacement reach for the two small arms and the hold-then-twist harvest sequence.

The reach problem is

    minimize |q - q0|^2  s.t.  |fk_pos(q) - goal| <= tol,  lo <= q <= hi,  q collision free,

solved by multi-start projected descent. The harvest sequence chains predefined
extend waypoints, a left reach and hold at the peduncle, a right reach and twist
at the fruit, and a retraction back to the start configurations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .collision import DEFAULT_PATH_STEP, config_in_collision, first_collision
from .errors import (DimensionMismatch, NoCollisionFreeSolution, PhaseInfeasible,
                     UnknownChain, Unreachable)
from .kincore import POSITION_ONLY, IkConfig, Pose, forward_kinematics, ik_solve

PHASES = ("extend", "left-reach", "left-hold", "right-reach", "twist", "retract")
TWIST_CHAIN = "right_ee"

DEFAULT_DURATIONS = {
    "extend": 2.0,
    "left-reach": 2.0,
    "left-hold": 0.5,
    "right-reach": 2.0,
    "twist": 1.0,
    "retract": 3.0,
}


def mounted_chains(chains, q_spot):
    """World-frame copies of every chain; mounted arms ride on the carrier tool pose."""
    spot = chains["spot"]
    tool = forward_kinematics(spot, q_spot)
    out = {}
    for name, c in chains.items():
        out[name] = c.mounted_on(tool) if c.mount == "spot" else c
    return out


# ---------------------------------------------------------------------------
# reach


@dataclass(frozen=True, eq=False)
class ReachProblem:
    chain: str
    q0: np.ndarray
    goal_position: np.ndarray
    scene: object
    tol: float = 0.005
    n_starts: int = 32
    seed: int = 0
    others: dict = field(default_factory=dict)   # fixed configs of other chains (self pairs)

    def __post_init__(self):
        if self.chain not in self.scene.chains:
            raise UnknownChain(self.chain)
        c = self.scene.chains[self.chain]
        q0 = c.check_q(self.q0)
        if not c.admissible(q0):
            raise ValueError("q0 must be within joint limits")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        object.__setattr__(self, "q0", q0)
        object.__setattr__(self, "goal_position", np.asarray(self.goal_position, float).reshape(3))

    @property
    def spec(self):
        return self.scene.chains[self.chain]


def _first_joint_origin(chain):
    return (chain.base_pose @ chain.joints[0].origin_offset).position


def _residual(chain, q, goal):
    return float(np.linalg.norm(K.fk_pos(*chain.arrays, q) - goal))


def _descend(chain, start, q0, goal, tol):
    """Step-toward-q0 descent to find a good basin, then Newton-KKT polish."""
    args = (*chain.arrays, chain.lower, chain.upper)
    q, ok = K.min_displacement_descent(*args, start, q0, goal, float(tol), 40, 1e-6)
    if ok:
        q, ok = K.min_displacement_newton(*args, q, q0, goal, float(tol), 10, 1e-6)
    return q, ok


def reach_candidates(p):
    """All multi-start candidates as (index, q, cost, residual_ok, collision_free)."""
    chain = p.spec
    goal = p.goal_position
    rng = np.random.default_rng(p.seed)
    starts = [p.q0]
    if p.n_starts > 1:
        starts += list(rng.uniform(chain.lower, chain.upper, size=(p.n_starts - 1, chain.n_joints)))
    ik_cfg = IkConfig(tol_pos=0.5 * p.tol)
    target = Pose(goal)
    out = []
    for k, s in enumerate(starts):
        q, ok = _descend(chain, s, p.q0, goal, p.tol)
        if not ok:
            q_ik, _, _, _, _ = ik_solve(chain, target, s, POSITION_ONLY, ik_cfg)
            q, ok = _descend(chain, q_ik, p.q0, goal, p.tol)
        ok = bool(ok) and _residual(chain, q, goal) <= p.tol and chain.admissible(q)
        free = False
        if ok:
            assign = dict(p.others)
            assign[p.chain] = q
            free = not config_in_collision(p.scene, assign)
        d = q - p.q0
        out.append((k, q, float(d @ d), ok, free))
    return out


def ik_candidates(p):
    """Position-only IK from each start, without the pull toward q0."""
    chain = p.spec
    goal = p.goal_position
    rng = np.random.default_rng(p.seed)
    starts = rng.uniform(chain.lower, chain.upper, size=(max(p.n_starts - 1, 1), chain.n_joints))
    cfg = IkConfig(tol_pos=0.5 * p.tol)
    target = Pose(goal)
    out = []
    for k, s in enumerate(starts, start=1):
        q, ok, _, _, _ = ik_solve(chain, target, s, POSITION_ONLY, cfg)
        ok = bool(ok) and _residual(chain, q, goal) <= p.tol and chain.admissible(q)
        free = False
        if ok:
            assign = dict(p.others)
            assign[p.chain] = q
            free = not config_in_collision(p.scene, assign)
        d = q - p.q0
        out.append((k, q, float(d @ d), ok, free))
    return out


def reach_alternatives(p, limit, exclude=(), min_separation=0.05):
    """Up to ``limit`` distinct collision-free reaching configurations, cheapest first.

    Candidates closer than ``min_separation`` (max-norm, rad) to an excluded or
    already chosen configuration are dropped.
    """
    pool = [c for c in reach_candidates(p) + ik_candidates(p) if c[3] and c[4]]
    pool.sort(key=lambda c: (c[2], c[0]))
    chosen = []
    taken = [np.asarray(q, float) for q in exclude]
    for _, q, _, _, _ in pool:
        if len(chosen) >= limit:
            break
        if any(np.max(np.abs(q - u)) < min_separation for u in taken):
            continue
        chosen.append(q)
        taken.append(q)
    return chosen


def solve_min_displacement_reach(p):
    """Minimum joint displacement configuration placing the tool within ``tol`` of the goal.

    Raises Unreachable when no start reaches the goal ball and
    NoCollisionFreeSolution when every reaching candidate collides.
    """
    chain = p.spec
    goal = p.goal_position
    if np.linalg.norm(goal - _first_joint_origin(chain)) > chain.reach + p.tol:
        raise Unreachable(f"goal is beyond the {chain.name} arm's reach")
    if _residual(chain, p.q0, goal) <= p.tol:
        assign = dict(p.others)
        assign[p.chain] = p.q0
        if not config_in_collision(p.scene, assign):
            return p.q0.copy()

    best = None
    any_reach = False
    for k, q, cost, ok, free in reach_candidates(p):
        any_reach |= ok
        if ok and free and (best is None or cost < best[1]):
            best = (q, cost)
    if best is None and any_reach:
        # the descent pulls every start into the basin nearest q0; when that
        # basin collides, fall back to the undescended IK solutions
        for k, q, cost, ok, free in ik_candidates(p):
            if ok and free and (best is None or cost < best[1]):
                best = (q, cost)
    if best is None:
        if any_reach:
            raise NoCollisionFreeSolution(f"all {chain.name} reach candidates collide")
        raise Unreachable(f"no {chain.name} start converged within {p.tol} m")
    return best[0]


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True, eq=False)
class TrajectorySegment:
    chain: str
    times: np.ndarray
    q: np.ndarray          # (m, n)
    label: str

    @property
    def waypoints(self):
        return [(float(t), row.copy()) for t, row in zip(self.times, self.q)]

    @property
    def t_start(self):
        return float(self.times[0])

    @property
    def t_end(self):
        return float(self.times[-1])

    def at(self, t):
        """Linear interpolation of the joint vector at time t (clamped to the segment)."""
        t = min(max(t, self.t_start), self.t_end)
        return np.array([np.interp(t, self.times, self.q[:, j]) for j in range(self.q.shape[1])])

    def to_dict(self):
        return {"chain": self.chain, "label": self.label,
                "t": [float(x) for x in self.times], "q": self.q.tolist()}


def interpolate_joint_path(q_from, q_to, step, duration, t0=0.0):
    """Uniform-in-time linear joint path with max per-joint gap <= step.

    Returns (times, Q); endpoints are reproduced exactly.
    """
    q_from = np.asarray(q_from, float).reshape(-1)
    q_to = np.asarray(q_to, float).reshape(-1)
    if q_from.shape != q_to.shape:
        raise DimensionMismatch("q_from and q_to differ in length")
    if not step > 0 or not duration > 0:
        raise ValueError("step and duration must be positive")
    span = float(np.max(np.abs(q_to - q_from), initial=0.0))
    n = max(2, int(math.ceil(span / step - 1e-9)) + 1)
    f = np.linspace(0.0, 1.0, n)
    Q = q_from + f[:, None] * (q_to - q_from)
    Q[0] = q_from
    Q[-1] = q_to
    return t0 + f * duration, Q


def _piecewise(points, step, t0, duration):
    """Polyline through joint vectors, time shared in proportion to leg length."""
    pts = [np.asarray(p, float) for p in points]
    lens = np.array([np.max(np.abs(b - a), initial=0.0) for a, b in zip(pts[:-1], pts[1:])])
    share = lens / lens.sum() if lens.sum() > 0 else np.full(len(lens), 1.0 / len(lens))
    times, Q = [np.array([t0])], [pts[0][None, :]]
    t = t0
    for (a, b), s in zip(zip(pts[:-1], pts[1:]), share):
        if s <= 0:
            continue
        ts, qs = interpolate_joint_path(a, b, step, s * duration, t)
        times.append(ts[1:])
        Q.append(qs[1:])
        t = ts[-1]
    times = np.concatenate(times)
    Q = np.concatenate(Q)
    if len(times) == 1:
        times = np.array([t0, t0 + duration])
        Q = np.vstack([Q, Q])
    times[-1] = t0 + duration
    Q[-1] = pts[-1]
    return times, Q


def segments_in_collision(scene, segments, fixed=None):
    """Check concurrently running segments on the union of their sample times."""
    ts = np.unique(np.concatenate([s.times for s in segments]))
    batch = dict(fixed or {})
    for s in segments:
        batch[s.chain] = np.stack([np.interp(ts, s.times, s.q[:, j]) for j in range(s.q.shape[1])],
                                  axis=1)
    hit = first_collision(scene, batch)
    return None if hit is None else hit[1]


@dataclass(frozen=True)
class HarvestSequenceSpec:
    extend_left: tuple = ((1.4, 0.0, 0.5, 0.5), (-0.2, 0.0, 0.0, 0.0))
    extend_right: tuple = ((-1.4, 0.0, 0.5), (0.2, 0.0, 0.0))
    peduncle_offset: tuple = (0.0, 0.0, 0.10)
    hold_radius: float = 0.03
    grasp_radius: float = 0.025
    twist_angle: float = math.pi / 2
    phase_durations: dict = field(default_factory=lambda: dict(DEFAULT_DURATIONS))
    step: float = DEFAULT_PATH_STEP
    reach_tol: float = 0.005
    n_starts: int = 32
    seed: int = 0
    max_backtrack: int = 6

    def __post_init__(self):
        if not self.twist_angle > 0:
            raise ValueError("twist_angle must be positive")
        if not (self.hold_radius > 0 and self.grasp_radius > 0):
            raise ValueError("hold and grasp radii must be positive")
        d = dict(DEFAULT_DURATIONS)
        d.update(self.phase_durations or {})
        if any(not v > 0 for v in d.values()):
            raise ValueError("phase durations must be positive")
        object.__setattr__(self, "phase_durations", d)
        object.__setattr__(self, "extend_left", tuple(tuple(map(float, w)) for w in self.extend_left))
        object.__setattr__(self, "extend_right", tuple(tuple(map(float, w)) for w in self.extend_right))
        object.__setattr__(self, "peduncle_offset", tuple(map(float, self.peduncle_offset)))

    def to_dict(self):
        return {
            "extend_left": [list(w) for w in self.extend_left],
            "extend_right": [list(w) for w in self.extend_right],
            "peduncle_offset": list(self.peduncle_offset),
            "hold_radius": self.hold_radius,
            "grasp_radius": self.grasp_radius,
            "twist_angle": self.twist_angle,
            "phase_durations": dict(self.phase_durations),
            "step": self.step,
            "reach_tol": self.reach_tol,
            "n_starts": self.n_starts,
            "seed": self.seed,
            "max_backtrack": self.max_backtrack,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**(d or {}))


def task_space_transform(fruit_pose, spec):
    """(left_goal, right_goal): peduncle point for the holder, fruit center for the twister."""
    c = np.asarray(fruit_pose.position, float)
    return c + fruit_pose.rotation @ np.asarray(spec.peduncle_offset), c.copy()


def _reach(scene, name, q0, goal, spec, phase, others):
    try:
        return solve_min_displacement_reach(ReachProblem(
            name, q0, goal, scene, spec.reach_tol, spec.n_starts, spec.seed, others))
    except Unreachable:
        raise PhaseInfeasible(phase, "Unreachable") from None
    except NoCollisionFreeSolution:
        raise PhaseInfeasible(phase, "NoCollisionFreeSolution") from None


def plan_harvest_sequence(fruit_pose, q0_left, q0_right, scene, spec=HarvestSequenceSpec()):
    """Ordered segments: extend, left-reach, left-hold, right-reach, twist, retract.

    ``scene.chains`` must hold world-frame ``left`` and ``right`` chains
    (see :func:`mounted_chains`). Raises PhaseInfeasible naming the failed phase.
    """
    for name in ("left", "right"):
        if name not in scene.chains:
            raise UnknownChain(name)
    left, right = scene.chains["left"], scene.chains["right"]
    q0_left = left.check_q(q0_left)
    q0_right = right.check_q(q0_right)
    left_goal, right_goal = task_space_transform(fruit_pose, spec)
    dur = spec.phase_durations
    step = spec.step
    segs = []

    t = 0.0
    tl, Ql = _piecewise([q0_left, *spec.extend_left], step, t, dur["extend"])
    tr, Qr = _piecewise([q0_right, *spec.extend_right], step, t, dur["extend"])
    ext = [TrajectorySegment("left", tl, Ql, "extend"), TrajectorySegment("right", tr, Qr, "extend")]
    if segments_in_collision(scene, ext):
        raise PhaseInfeasible("extend", "NoCollisionFreeSolution")
    segs += ext
    t += dur["extend"]
    ql_ext, qr_ext = Ql[-1].copy(), Qr[-1].copy()

    left_prob = ReachProblem("left", ql_ext, left_goal, scene, spec.reach_tol, spec.n_starts,
                             spec.seed, {"right": qr_ext})
    left_options = [_reach(scene, "left", ql_ext, left_goal, spec, "left-reach", {"right": qr_ext})]
    alternatives = None
    k = 0
    while True:
        # backtrack over distinct left hold configurations when the right arm
        # cannot reach the fruit around the current one
        ql_goal = left_options[k]
        ts, Q = interpolate_joint_path(ql_ext, ql_goal, step, dur["left-reach"], t)
        left_seg = TrajectorySegment("left", ts, Q, "left-reach")
        failure = None
        if segments_in_collision(scene, [left_seg], {"right": qr_ext}):
            failure = PhaseInfeasible("left-reach", "NoCollisionFreeSolution")
        else:
            try:
                qr_goal = _reach(scene, "right", qr_ext, right_goal, spec, "right-reach",
                                 {"left": ql_goal})
                ts, Q = interpolate_joint_path(qr_ext, qr_goal, step, dur["right-reach"],
                                               t + dur["left-reach"] + dur["left-hold"])
                right_seg = TrajectorySegment("right", ts, Q, "right-reach")
                if segments_in_collision(scene, [right_seg], {"left": ql_goal}):
                    failure = PhaseInfeasible("right-reach", "NoCollisionFreeSolution")
            except PhaseInfeasible as exc:
                failure = exc
        if failure is None:
            break
        if failure.cause != "NoCollisionFreeSolution":
            raise failure
        if alternatives is None:
            alternatives = reach_alternatives(left_prob, spec.max_backtrack, exclude=left_options)
            left_options += alternatives
        k += 1
        if k >= len(left_options):
            raise failure

    segs.append(left_seg)
    t += dur["left-reach"]
    segs.append(TrajectorySegment("left", np.array([t, t + dur["left-hold"]]),
                                  np.vstack([ql_goal, ql_goal]), "left-hold"))
    t += dur["left-hold"]
    segs.append(right_seg)
    t += dur["right-reach"]

    ts, Q = interpolate_joint_path([0.0], [spec.twist_angle], step, dur["twist"], t)
    segs.append(TrajectorySegment(TWIST_CHAIN, ts, Q, "twist"))
    t += dur["twist"]

    tl, Ql = _piecewise([ql_goal, ql_ext, *reversed(spec.extend_left[:-1]), q0_left],
                        step, t, dur["retract"])
    tr, Qr = _piecewise([qr_goal, qr_ext, *reversed(spec.extend_right[:-1]), q0_right],
                        step, t, dur["retract"])
    ret = [TrajectorySegment("left", tl, Ql, "retract"), TrajectorySegment("right", tr, Qr, "retract")]
    if segments_in_collision(scene, ret):
        raise PhaseInfeasible("retract", "NoCollisionFreeSolution")
    segs += ret
    return segs


def sequence_rows(segments):
    """Flatten segments into (t, chain, phase, q...) rows ordered by time then chain."""
    rows = []
    for s in segments:
        for t, q in zip(s.times, s.q):
            rows.append((float(t), s.chain, s.label, [float(x) for x in q]))
    rows.sort(key=lambda r: (r[0], PHASES.index(r[2]), r[1]))
    return rows
