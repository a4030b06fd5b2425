"""Mission state machine: navigate, detect, view planning, re-localize, plan, execute, evaluate.

A mission walks the transition graph in :data:`TRANSITIONS` one state at a
time through :func:`advance_mission`. Each call performs the work of the
current state against a mutable :class:`MissionWorld`, returns the next state
and the actions it emitted, and refuses any edge that is not in the graph.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .bimanual import mounted_chains, plan_harvest_sequence
from .collision import CollisionScene
from .errors import IllegalTransition, PhaseInfeasible
from .kincore import Pose, forward_kinematics, sample_reachable_set
from .nbv import plan_nbv
from .perception import COLOR_VGA, DEPTH_TO_COLOR, DEPTH_VGA, perceive, surface_to_center
from .simworld import (SimWorld, TrialRecord, WindField, advance_pendulum, simulate_execution,
                       workspace_contains)


class MissionState(str, enum.Enum):
    Navigate = "Navigate"
    InitialDetect = "InitialDetect"
    NbvMove = "NbvMove"
    Relocalize = "Relocalize"
    WorkspaceCheck = "WorkspaceCheck"
    PlanSequence = "PlanSequence"
    Execute = "Execute"
    Evaluate = "Evaluate"
    Reinit = "Reinit"
    OperatorIntervention = "OperatorIntervention"
    Done = "Done"


S = MissionState

TRANSITIONS = {
    S.Navigate: {S.InitialDetect},
    S.InitialDetect: {S.NbvMove, S.OperatorIntervention},
    S.NbvMove: {S.Relocalize},
    S.Relocalize: {S.WorkspaceCheck, S.OperatorIntervention},
    S.WorkspaceCheck: {S.PlanSequence, S.OperatorIntervention},
    S.PlanSequence: {S.Execute, S.Evaluate},
    S.Execute: {S.Evaluate},
    S.Evaluate: {S.Reinit, S.NbvMove},
    S.Reinit: {S.Done, S.Navigate},
    S.OperatorIntervention: {S.NbvMove, S.InitialDetect, S.Evaluate},
    S.Done: set(),
}


class Decision(str, enum.Enum):
    RetryNbv = "RetryNbv"
    NextTarget = "NextTarget"
    Done = "Done"


def check_transition(a, b):
    if b not in TRANSITIONS[a]:
        raise IllegalTransition(f"{a.value} -> {b.value} is not an allowed transition")


def evaluate_outcome(record, config, attempt=1, targets_remaining=0):
    """RetryNbv while a failed target has attempts left, else move on or finish."""
    if not record.success and attempt < config.max_attempts:
        return Decision.RetryNbv
    return Decision.NextTarget if targets_remaining > 0 else Decision.Done


# ---------------------------------------------------------------------------
# memoization


def _digest(*parts):
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray) or isinstance(p, (list, tuple)) and p and \
                isinstance(p[0], (float, int, np.floating)):
            h.update(np.ascontiguousarray(np.asarray(p, float)).tobytes())
        else:
            h.update(str(p).encode())
        h.update(b"|")
    return h.hexdigest()


@dataclass
class MissionCache:
    """Pure-function memo tables shared across missions of one batch.

    Keys are digests of the exact input bytes, so a hit returns what a fresh
    computation would have returned.
    """

    nbv: dict = field(default_factory=dict)
    plans: dict = field(default_factory=dict)
    summaries: dict = field(default_factory=dict)
    hits: int = 0
    misses: int = 0

    def get(self, table, key, fn):
        tab = getattr(self, table)
        if key in tab:
            self.hits += 1
            return tab[key]
        self.misses += 1
        val = fn()
        tab[key] = val
        return val


def reach_summaries(scenario, cache=None):
    """Reachable-point summaries of the dual arms in the carrier tool frame."""
    m = scenario.mission
    cache = cache if cache is not None else MissionCache()
    out = {}
    for name in ("left", "right"):
        ch = scenario.chains[name]
        key = _digest(ch.fingerprint(), m.reach_samples, m.reach_seed, m.reach_voxel)
        out[name] = cache.get("summaries", key, lambda ch=ch: sample_reachable_set(
            ch, m.reach_samples, m.reach_seed, m.reach_voxel))
    return out


# ---------------------------------------------------------------------------
# world


def body_pose(x, y, yaw):
    return Pose.from_rpy(0.0, 0.0, yaw, (x, y, 0.0))


@dataclass(eq=False)
class MissionWorld:
    """Everything the state machine reads and mutates during one mission."""

    scenario: object
    rng: np.random.Generator
    wind: WindField
    cache: MissionCache
    record_traj: bool = False
    tick: int = 0                       # simulated clock in dt ticks
    dt: float = 1e-3
    targets: list = field(default_factory=list)
    target_index: int = 0
    waypoint: int = 0
    body: tuple = (0.0, 0.0, 0.0)
    q_spot: np.ndarray = None
    q_left: np.ndarray = None
    q_right: np.ndarray = None
    attempt: int = 0
    interventions: int = 0
    estimate: np.ndarray = None         # world-frame fruit center estimate
    nbv_feasible: bool = True
    plan: list = None
    plan_failure: str | None = None
    intervention_reason: str | None = None
    last: TrialRecord = None            # outcome of the latest attempt on the current target
    outcomes: list = field(default_factory=list)
    noise_draws: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)

    @property
    def now(self):
        return self.tick * self.dt

    @property
    def target(self):
        return self.targets[self.target_index]

    def wait(self, seconds):
        """Advance the clock; the fruit keeps swinging under the wind."""
        n = int(round(seconds / self.dt))
        if n > 0:
            self.targets[self.target_index] = advance_pendulum(
                self.target, self.tick * self.dt, n, self.dt, self.wind)
            self.tick += n

    def chains_world(self):
        """World-frame chains for the current body pose and carrier configuration."""
        ch = self.scenario.chains
        bp = body_pose(*self.body)
        spot = ch["spot"].with_base(bp @ ch["spot"].base_pose)
        return mounted_chains({**ch, "spot": spot}, self.q_spot)

    def scene(self, chains=None):
        chains = chains or self.chains_world()
        return CollisionScene(self.scenario.grid, chains, self.scenario.self_pairs)

    def tool_pose(self):
        return forward_kinematics(self.chains_world()["spot"], self.q_spot)


def _new_world(scenario, seed, cache, record):
    m = scenario.mission
    rng = np.random.default_rng(seed)
    wind = WindField.draw(scenario.noise.wind_amplitude, rng)
    return MissionWorld(
        scenario=scenario, rng=rng, wind=wind, cache=cache, record_traj=record,
        targets=list(scenario.targets),
        body=m.navigation[0],
        q_spot=np.array(m.start_q_spot), q_left=np.array(m.stowed_left),
        q_right=np.array(m.stowed_right))


# ---------------------------------------------------------------------------
# localization


def _localize(world):
    """Fruit center estimate in the world frame, or None when nothing is seen."""
    sc = world.scenario
    m = sc.mission
    t = world.target
    if m.localization == "ground_truth":
        bx, by, _ = world.body
        if math.hypot(t.position[0] - bx, t.position[1] - by) > m.sensing_range:
            return None
        est = np.array(t.position, float)
    else:
        est = _perceive_fruit(world)
        if est is None:
            return None
    sigma = sc.noise.pose_noise_sigma
    if sigma > 0:
        noise = world.rng.normal(0.0, sigma, 3)
        world.noise_draws.append([float(x) for x in noise])
        est = est + noise
    return est


def _perceive_fruit(world):
    from .synthetic import camera_pose, objects_in_camera, render, world_fruit

    sc = world.scenario
    t = world.target
    cam = camera_pose(world.tool_pose())
    objs = objects_in_camera([world_fruit(t.position, t.fruit_radius)], cam)
    if objs[0].center[2] <= 0:
        return None
    frame = render(objs, DEPTH_VGA, COLOR_VGA, DEPTH_TO_COLOR, world.rng, sc.noise.depth_noise)
    if frame.detections.count == 0:
        return None
    try:
        ests = perceive(frame.depth, COLOR_VGA, frame.detections)
    except Exception:          # too few depth returns behaves like a missed detection
        return None
    if not ests:
        return None
    e = ests[0]
    c = surface_to_center(e, t.fruit_radius) if sc.mission.surface_correction else e.centroid
    return cam.transform_point(c)


# ---------------------------------------------------------------------------
# state handlers


def _navigate(world):
    m = world.scenario.mission
    world.body = m.navigation[min(world.waypoint, len(m.navigation) - 1)]
    world.q_spot = np.array(m.start_q_spot)
    world.wait(m.navigate_duration)
    return S.InitialDetect, [{"action": "navigate", "body": list(world.body)}]


def _initial_detect(world):
    world.wait(world.scenario.mission.detect_duration)
    est = _localize(world)
    if est is None:
        world.intervention_reason = "no-detection"
        return S.OperatorIntervention, [{"action": "detect", "found": False}]
    world.estimate = est
    world.attempt = 1
    return S.NbvMove, [{"action": "detect", "found": True, "estimate": est.tolist()}]


def _nbv_move(world):
    sc = world.scenario
    chains = world.chains_world()
    spot = chains["spot"]
    scene = world.scene(chains)
    target = Pose(tuple(world.estimate))
    key = _digest(spot.fingerprint(), world.estimate, world.q_spot, repr(sc.nbv), sc.fingerprint())
    sol = world.cache.get("nbv", key, lambda: plan_nbv(spot, scene, target, sc.nbv, world.q_spot))
    world.nbv_feasible = bool(sol.feasible)
    if sol.feasible:
        world.q_spot = np.array(sol.q, float)
    world.wait(sc.mission.nbv_move_duration)
    return S.Relocalize, [{"action": "nbv", "feasible": bool(sol.feasible),
                           "q_spot": [float(x) for x in world.q_spot],
                           "cost": float(sol.cost) if sol.feasible else None}]


def _relocalize(world):
    world.wait(world.scenario.mission.detect_duration)
    est = _localize(world)
    if est is None:
        world.intervention_reason = "lost-target"
        return S.OperatorIntervention, [{"action": "relocalize", "found": False}]
    world.estimate = est
    return S.WorkspaceCheck, [{"action": "relocalize", "found": True, "estimate": est.tolist()}]


def _workspace_check(world):
    sc = world.scenario
    summ = reach_summaries(sc, world.cache)
    tool = world.tool_pose()
    inv = tool.inverse()
    p = inv.transform_point(world.estimate)
    off = inv.rotation @ np.asarray(sc.sequence.peduncle_offset, float)
    inside = workspace_contains(summ, p, off)
    act = [{"action": "workspace", "inside": inside, "goal_tool_frame": p.tolist()}]
    if inside:
        return S.PlanSequence, act
    world.intervention_reason = "outside-workspace"
    return S.OperatorIntervention, act


def _plan_sequence(world):
    sc = world.scenario
    chains = world.chains_world()
    scene = world.scene(chains)
    key = _digest(world.estimate, world.q_spot, world.body, world.q_left, world.q_right,
                  sc.fingerprint())

    def solve():
        try:
            return plan_harvest_sequence(Pose(tuple(world.estimate)), world.q_left,
                                         world.q_right, scene, sc.sequence), None
        except PhaseInfeasible as exc:
            return None, (exc.phase, exc.cause)

    plan, fail = world.cache.get("plans", key, solve)
    if plan is None:
        world.plan = None
        world.plan_failure = f"{fail[0]}:{fail[1]}"
        world.last = TrialRecord(0, 0, sc.environment, {"plan": world.plan_failure}, False,
                                 "Infeasible", world.now)
        return S.Evaluate, [{"action": "plan", "feasible": False, "phase": fail[0],
                             "cause": fail[1]}]
    world.plan = plan
    world.plan_failure = None
    return S.Execute, [{"action": "plan", "feasible": True, "segments": [
        {"chain": s.chain, "phase": s.label, "t0": float(s.t_start), "t1": float(s.t_end)}
        for s in plan]}]


def _execute(world):
    sc = world.scenario
    chains = world.chains_world()
    sim = SimWorld(world.target, world.scene(chains), world.wind, world.dt)
    t0 = world.now
    rec = simulate_execution(world.plan, sim, sc.noise, sc.sequence, world.rng, t0,
                             world.record_traj, world.q_spot)
    if world.record_traj and rec.trajectory:
        world.trajectory.extend(rec.trajectory)
    world.targets[world.target_index] = rec.final_target
    world.tick = int(round(rec.wall_time / world.dt))
    world.last = rec
    # arms end where their retract segments end
    for s in world.plan:
        if s.label == "retract":
            setattr(world, "q_" + s.chain, np.array(s.q[-1]))
    return S.Evaluate, [{"action": "execute", "t0": t0, "t1": rec.wall_time,
                         "phases": dict(rec.phases), "success": rec.success}]


def _evaluate(world):
    sc = world.scenario
    remaining = len(world.targets) - world.target_index - 1
    dec = evaluate_outcome(world.last, sc.mission, world.attempt, remaining)
    act = [{"action": "evaluate", "success": world.last.success,
            "failure_cause": world.last.failure_cause, "decision": dec.value}]
    if dec is Decision.RetryNbv:
        world.attempt += 1
        return S.NbvMove, act
    world.outcomes.append((world.last, world.attempt))
    return S.Reinit, act


def _reinit(world):
    m = world.scenario.mission
    world.q_left = np.array(m.stowed_left)
    world.q_right = np.array(m.stowed_right)
    if not (np.array_equal(world.q_left, m.stowed_left)
            and np.array_equal(world.q_right, m.stowed_right)):
        raise IllegalTransition("reinit did not restore the stowed configuration")
    act = [{"action": "reinit", "q_left": list(m.stowed_left), "q_right": list(m.stowed_right)}]
    if world.target_index + 1 < len(world.targets):
        world.target_index += 1
        world.waypoint += 1
        return S.Navigate, act
    return S.Done, act


def _operator_intervention(world):
    m = world.scenario.mission
    world.interventions += 1
    reason = world.intervention_reason
    act = [{"action": "intervention", "reason": reason, "count": world.interventions}]
    if world.interventions > m.max_interventions:
        world.last = TrialRecord(0, 0, world.scenario.environment, {"intervention": reason},
                                 False, "Infeasible", world.now)
        world.attempt = max(world.attempt, m.max_attempts)
        return S.Evaluate, act
    # scripted operator response: drive the body so the fruit sits straight ahead
    t = world.target.position if reason == "no-detection" else world.estimate
    bx, by, _ = world.body
    yaw = math.atan2(t[1] - by, t[0] - bx)
    d = m.reposition_distance
    world.body = (float(t[0] - d * math.cos(yaw)), float(t[1] - d * math.sin(yaw)), float(yaw))
    world.q_spot = np.array(m.start_q_spot)
    act[0]["body"] = list(world.body)
    world.wait(m.navigate_duration)
    if reason == "no-detection":
        return S.InitialDetect, act
    return S.NbvMove, act


HANDLERS = {
    S.Navigate: _navigate,
    S.InitialDetect: _initial_detect,
    S.NbvMove: _nbv_move,
    S.Relocalize: _relocalize,
    S.WorkspaceCheck: _workspace_check,
    S.PlanSequence: _plan_sequence,
    S.Execute: _execute,
    S.Evaluate: _evaluate,
    S.Reinit: _reinit,
    S.OperatorIntervention: _operator_intervention,
}


def advance_mission(state, world, config=None):
    """Run one state's work; returns (next_state, actions). ``config`` defaults
    to the world's mission config and is accepted for symmetry with callers."""
    state = MissionState(state)
    if state is S.Done:
        raise IllegalTransition("mission already done")
    nxt, actions = HANDLERS[state](world)
    check_transition(state, nxt)
    return nxt, actions


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def run_mission(scenario, seed, trial_id=0, cache=None, record=False, max_steps=1000):
    """Play one full mission; returns a TrialRecord whose trace lists every transition."""
    cache = cache if cache is not None else MissionCache()
    world = _new_world(scenario, seed, cache, record)
    state = S.Navigate
    trace = []
    for _ in range(max_steps):
        if state is S.Done:
            break
        t_before = world.now
        nxt, actions = advance_mission(state, world)
        trace.append(_clean({"seq": len(trace), "t": round(t_before, 6), "state": state.value,
                             "next": nxt.value, "target": world.target_index,
                             "attempt": world.attempt, "actions": actions}))
        state = nxt
    else:
        raise IllegalTransition(f"mission did not finish within {max_steps} steps")

    outcomes = world.outcomes
    failed = [r for r, _ in outcomes if not r.success]
    last = outcomes[-1][0]
    rec = TrialRecord(
        trial_id=int(trial_id), seed=int(seed), environment=scenario.environment,
        phases=dict(last.phases), success=not failed,
        failure_cause=failed[0].failure_cause if failed else None,
        wall_time=world.now,
        noise_draws=_clean({"wind": {"amp": world.wind.amp.tolist(),
                                     "omega": world.wind.omega.tolist(),
                                     "phase": world.wind.phase.tolist()},
                            "pose": world.noise_draws,
                            "execution": [r.noise_draws for r, _ in outcomes]}),
        trace=trace, attempts=sum(a for _, a in outcomes), interventions=world.interventions)
    if record:
        rec.trajectory = world.trajectory
    return rec


def state_sequence(record):
    """Visited states in order, ending with Done."""
    seq = [e["state"] for e in record.trace]
    if record.trace:
        seq.append(record.trace[-1]["next"])
    return seq


def write_trace(path, records):
    """JSON lines, one transition event per line, trials in order."""
    with open(path, "w") as fh:
        for r in records:
            for e in r.trace:
                fh.write(json.dumps({"trial_id": r.trial_id, **e}, sort_keys=True) + "\n")


__all__ = ["MissionState", "TRANSITIONS", "Decision", "check_transition", "evaluate_outcome",
           "MissionCache", "MissionWorld", "advance_mission", "run_mission", "state_sequence",
           "write_trace", "reach_summaries"]
