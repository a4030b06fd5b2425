"""Harvest simulator: a fruit swinging on a taut cord, noisy execution of a
planned sequence, and seeded Monte Carlo trial batches.

The simulation clock advances in integer ticks of ``dt`` so event times and
trajectories are reproducible bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import StepOutOfRange
from .kincore import forward_kinematics

GRAVITY = K.GRAVITY
FAILURE_CAUSES = ("Infeasible", "MissedGrasp", "MissedHold", "Slip")
_NO_GUST = (np.zeros((0, 3)), np.zeros(0), np.zeros(0))


def spherical_to_cartesian(L, state):
    """Anchor-relative position and velocity; theta is measured from straight down."""
    th, ph, thd, phd = (float(x) for x in state)
    st, ct, sp, cp = math.sin(th), math.cos(th), math.sin(ph), math.cos(ph)
    r = L * np.array([st * cp, st * sp, -ct])
    v = L * (thd * np.array([ct * cp, ct * sp, st]) + phd * st * np.array([-sp, cp, 0.0]))
    return r, v


def cartesian_to_spherical(r, v, L):
    """Inverse of :func:`spherical_to_cartesian`. At theta = 0 the azimuth is
    taken from the velocity direction, so the state stays well defined."""
    r = np.asarray(r, float)
    v = np.asarray(v, float)
    th = math.acos(min(max(-r[2] / L, -1.0), 1.0))
    rho = math.hypot(r[0], r[1])
    if rho < 1e-12 * L:
        vh = math.hypot(v[0], v[1])
        ph = math.atan2(v[1], v[0]) if vh > 0 else 0.0
        return (th, ph, vh / L, 0.0)
    ph = math.atan2(r[1], r[0])
    phd = (r[0] * v[1] - r[1] * v[0]) / (rho * rho)
    ct, st = math.cos(th), math.sin(th)
    if abs(ct) >= abs(st):
        thd = ((r[0] * v[0] + r[1] * v[1]) / rho) / (L * ct)
    else:
        thd = v[2] / (L * st)
    return (th, ph, thd, phd)


@dataclass(frozen=True, eq=False)
class PendulumTarget:
    anchor: np.ndarray
    cord_length: float
    mass: float = 0.2
    damping: float = 0.0
    state: tuple = (0.0, 0.0, 0.0, 0.0)
    fruit_radius: float = 0.04

    def __post_init__(self):
        if not self.cord_length > 0:
            raise ValueError("cord_length must be positive")
        if not self.mass > 0 or self.damping < 0 or not self.fruit_radius > 0:
            raise ValueError("mass and fruit_radius must be positive, damping non-negative")
        object.__setattr__(self, "anchor", np.asarray(self.anchor, float).reshape(3))
        object.__setattr__(self, "state", tuple(float(x) for x in self.state))

    def cartesian(self):
        return spherical_to_cartesian(self.cord_length, self.state)

    def with_cartesian(self, r, v):
        st = cartesian_to_spherical(r, v, self.cord_length)
        out = PendulumTarget(self.anchor, self.cord_length, self.mass, self.damping, st,
                             self.fruit_radius)
        # keep the exact cartesian state to avoid round-trip drift between steps
        object.__setattr__(out, "_rv", (np.array(r, float), np.array(v, float)))
        return out

    def _cart(self):
        rv = self.__dict__.get("_rv")
        return rv if rv is not None else self.cartesian()

    @property
    def position(self):
        return self.anchor + self._cart()[0]

    @property
    def velocity(self):
        return self._cart()[1].copy()

    def energy(self):
        """Kinetic plus potential energy relative to the lowest point (J)."""
        r, v = self._cart()
        return 0.5 * self.mass * float(v @ v) + self.mass * GRAVITY * float(r[2] + self.cord_length)

    def peduncle_point(self, distance):
        """Point ``distance`` up the cord from the fruit center."""
        r, _ = self._cart()
        p = self.anchor + r
        return p - r * (distance / self.cord_length)

    def frozen(self):
        """Same position, zero velocity (the fruit is being held)."""
        r, _ = self._cart()
        return self.with_cartesian(r, np.zeros(3))

    def to_dict(self):
        return {"anchor": [float(x) for x in self.anchor], "cord_length": self.cord_length,
                "mass": self.mass, "damping": self.damping, "state": list(self.state),
                "fruit_radius": self.fruit_radius}

    @classmethod
    def from_dict(cls, d):
        return cls(d["anchor"], float(d["cord_length"]), float(d.get("mass", 0.2)),
                   float(d.get("damping", 0.0)), tuple(d.get("state", (0, 0, 0, 0))),
                   float(d.get("fruit_radius", 0.04)))

    @classmethod
    def hanging(cls, fruit_center, cord_length, **kw):
        """Fruit at rest directly below its anchor."""
        c = np.asarray(fruit_center, float)
        return cls(c + np.array([0.0, 0.0, cord_length]), cord_length, **kw)


@dataclass(frozen=True, eq=False)
class WindField:
    """Sum of sinusoidal gusts: a(t) = sum_k amp_k sin(omega_k t + phase_k)  (m/s^2)."""

    amp: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(0))
    phase: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def draw(cls, amplitude, rng, n_gusts=3, omega_range=(1.0, 6.0)):
        if amplitude <= 0:
            return cls()
        az = rng.uniform(0.0, 2 * math.pi, n_gusts)
        dirs = np.stack([np.cos(az), np.sin(az), np.zeros(n_gusts)], axis=1)
        amp = dirs * (amplitude / math.sqrt(n_gusts))
        return cls(amp, rng.uniform(*omega_range, n_gusts), rng.uniform(0.0, 2 * math.pi, n_gusts))

    def at(self, t):
        return (self.amp * np.sin(self.omega * t + self.phase)[:, None]).sum(axis=0)


@dataclass(frozen=True)
class NoiseModel:
    pose_noise_sigma: float = 0.0
    wind_amplitude: float = 0.0
    slip_probability: float = 0.0
    seed: int = 0
    depth_noise: float = 0.0

    def __post_init__(self):
        if min(self.pose_noise_sigma, self.wind_amplitude, self.slip_probability,
               self.depth_noise) < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.slip_probability > 1:
            raise ValueError("slip_probability must be <= 1")

    def to_dict(self):
        return {"pose_noise_sigma": self.pose_noise_sigma, "wind_amplitude": self.wind_amplitude,
                "slip_probability": self.slip_probability, "seed": self.seed,
                "depth_noise": self.depth_noise}

    @classmethod
    def from_dict(cls, d):
        return cls(**(d or {}))


# ---------------------------------------------------------------------------
# physics


def step_pendulum(target, dt, excitation=(0.0, 0.0, 0.0), t=0.0):
    """One RK4 step of the damped spherical pendulum under a constant excitation."""
    if not 0 < dt <= 0.01:
        raise StepOutOfRange(f"dt {dt} outside (0, 0.01]")
    r, v = target._cart()
    r, v = K.pendulum_advance(r, v, target.cord_length, target.damping, float(t), float(dt), 1,
                              np.asarray(excitation, float), *_NO_GUST)
    return target.with_cartesian(r, v)


def advance_pendulum(target, t0, n_steps, dt, wind=None, excitation=(0.0, 0.0, 0.0)):
    """Integrate ``n_steps`` ticks starting at absolute time ``t0``."""
    if n_steps <= 0:
        return target
    if not 0 < dt <= 0.01:
        raise StepOutOfRange(f"dt {dt} outside (0, 0.01]")
    w = wind or WindField()
    r, v = target._cart()
    r, v = K.pendulum_advance(r, v, target.cord_length, target.damping, float(t0), float(dt),
                              int(n_steps), np.asarray(excitation, float), w.amp, w.omega, w.phase)
    return target.with_cartesian(r, v)


def small_angle_period(L):
    return 2 * math.pi * math.sqrt(L / GRAVITY)


# ---------------------------------------------------------------------------
# execution


@dataclass(frozen=True, eq=False)
class SimWorld:
    target: PendulumTarget
    scene: object                     # CollisionScene with world-frame arm chains
    wind: WindField = field(default_factory=WindField)
    dt: float = 1e-3


@dataclass(eq=False)
class TrialRecord:
    trial_id: int
    seed: int
    environment: str
    phases: dict = field(default_factory=dict)
    success: bool = False
    failure_cause: str | None = None
    wall_time: float = 0.0
    noise_draws: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    attempts: int = 0
    interventions: int = 0
    trajectory: object = None
    final_target: object = None       # pendulum state when the sequence ends (not serialized)

    def __post_init__(self):
        if self.failure_cause is not None and self.failure_cause not in FAILURE_CAUSES:
            raise ValueError(f"unknown failure cause {self.failure_cause!r}")

    def check(self):
        assert self.success == (self.failure_cause is None)

    def to_dict(self):
        return {
            "trial_id": self.trial_id, "seed": self.seed, "environment": self.environment,
            "success": self.success, "failure_cause": self.failure_cause,
            "wall_time": self.wall_time, "phases": dict(self.phases),
            "attempts": self.attempts, "interventions": self.interventions,
            "noise_draws": self.noise_draws, "trace": list(self.trace),
        }

    CSV_FIELDS = ("trial_id", "seed", "environment", "success", "failure_cause", "wall_time",
                  "attempts", "interventions", "hold", "grasp", "detach")

    def csv_row(self):
        return [self.trial_id, self.seed, self.environment, int(self.success),
                self.failure_cause or "", f"{self.wall_time:.3f}", self.attempts,
                self.interventions, self.phases.get("hold", ""), self.phases.get("grasp", ""),
                self.phases.get("detach", "")]


def _phase_bounds(plan, label):
    segs = [s for s in plan if s.label == label]
    if not segs:
        raise ValueError(f"plan has no {label!r} segment")
    return min(s.t_start for s in segs), max(s.t_end for s in segs)


def joint_state(plan, chain, t, default):
    """Commanded joint vector of ``chain`` at sequence time t (holds between segments)."""
    segs = sorted((s for s in plan if s.chain == chain), key=lambda s: s.t_start)
    q = np.asarray(default, float)
    for s in segs:
        if t < s.t_start:
            break
        q = s.at(t)
    return q


def _ticks(t, dt):
    return int(round(t / dt))


def simulate_execution(plan, world, noise, spec, rng=None, t0=0.0, record=False,
                       q_spot=None, sample_dt=0.02):
    """Play a harvest plan against the swinging target.

    Hold succeeds iff the left tool is within ``hold_radius`` of the true
    peduncle point at the end of the left reach; a successful hold freezes
    the fruit. Grasp succeeds iff the right tool is within ``grasp_radius`` of
    the fruit center at the end of the right reach. Detach needs both and no
    slip (Bernoulli ``slip_probability``, drawn after the twist).
    Returns a TrialRecord (trial id/seed/environment left for the caller).
    """
    if rng is None:
        rng = np.random.default_rng(noise.seed)
    dt = world.dt
    chains = world.scene.chains
    left, right = chains["left"], chains["right"]
    _, t_hold = _phase_bounds(plan, "left-reach")
    _, t_grasp = _phase_bounds(plan, "right-reach")
    _, t_twist = _phase_bounds(plan, "twist")
    t_end = max(s.t_end for s in plan)
    q_left0 = next(s for s in plan if s.chain == "left").q[0]
    q_right0 = next(s for s in plan if s.chain == "right").q[0]
    ped_dist = float(np.linalg.norm(spec.peduncle_offset))

    tick0 = _ticks(t0, dt)
    events = {_ticks(t_hold, dt): "hold", _ticks(t_grasp, dt): "grasp", _ticks(t_twist, dt): "detach"}
    stops = set(events)
    stops.add(_ticks(t_end, dt))
    if record:
        n_samp = int(math.floor(t_end / sample_dt + 1e-9))
        stops.update(_ticks(k * sample_dt, dt) for k in range(n_samp + 1))
    target = world.target
    held = False
    phases = {}
    draws = {}
    rows = []
    tick = 0
    for stop in sorted(stops):
        if not held:
            target = advance_pendulum(target, (tick0 + tick) * dt, stop - tick, dt, world.wind)
        tick = stop
        t = stop * dt
        ev = events.get(stop)
        if ev == "hold":
            tool = forward_kinematics(left, joint_state(plan, "left", t, q_left0)).position
            err = float(np.linalg.norm(tool - target.peduncle_point(ped_dist)))
            ok = err <= spec.hold_radius
            phases["hold"] = "ok" if ok else "missed"
            draws["hold_error"] = err
            if ok:
                held = True
                target = target.frozen()
        elif ev == "grasp":
            tool = forward_kinematics(right, joint_state(plan, "right", t, q_right0)).position
            err = float(np.linalg.norm(tool - target.position))
            phases["grasp"] = "ok" if err <= spec.grasp_radius else "missed"
            draws["grasp_error"] = err
        elif ev == "detach":
            u = float(rng.random())
            draws["slip_u"] = u
            slip = u < noise.slip_probability
            ok = phases.get("hold") == "ok" and phases.get("grasp") == "ok" and not slip
            phases["detach"] = "ok" if ok else ("slip" if slip else "skipped")
        if record and stop * dt <= t_end + 1e-12:
            rows.append(_traj_row(plan, chains, t, t0, target, q_left0, q_right0, q_spot))

    if phases.get("grasp") != "ok":
        cause = "MissedGrasp"
    elif phases.get("hold") != "ok":
        cause = "MissedHold"
    elif phases.get("detach") != "ok":
        cause = "Slip"
    else:
        cause = None
    rec = TrialRecord(0, int(noise.seed), "", phases, cause is None, cause, t0 + t_end, draws)
    rec.final_target = target
    if record:
        rec.trajectory = rows
    return rec


def _traj_row(plan, chains, t, t0, target, q_left0, q_right0, q_spot):
    ql = joint_state(plan, "left", t, q_left0)
    qr = joint_state(plan, "right", t, q_right0)
    tw = joint_state(plan, "right_ee", t, [0.0])
    pl = forward_kinematics(chains["left"], ql)
    pr = forward_kinematics(chains["right"], qr)
    return {"t": t0 + t, "left": pl, "right": pr, "target": target.position.copy(),
            "q_left": ql, "q_right": qr, "twist": float(tw[0]),
            "q_spot": None if q_spot is None else np.asarray(q_spot, float)}


# ---------------------------------------------------------------------------
# workspace membership


def workspace_contains(summaries, point, offset=(0.0, 0.0, 0.10)):
    """True iff the right summary holds ``point`` and the left summary holds
    ``point + offset`` (both in the summaries' frame, voxel floor rule)."""
    p = np.asarray(point, float)
    return bool(summaries["right"].contains(p) and summaries["left"].contains(p + np.asarray(offset)))


# ---------------------------------------------------------------------------
# trial batches


def summarize(records):
    out = {}
    for r in records:
        e = out.setdefault(r.environment, {"trials": 0, "successes": 0,
                                           "failures": {c: 0 for c in FAILURE_CAUSES}})
        e["trials"] += 1
        e["successes"] += int(r.success)
        if r.failure_cause:
            e["failures"][r.failure_cause] += 1
    for e in out.values():
        e["success_rate"] = e["successes"] / e["trials"]
    return out


def run_trials(scenario, n, base_seed=0, cache=None, record=False):
    """Run ``n`` full missions with seeds base_seed + i; returns (records, summary)."""
    from .orchestrator import MissionCache, run_mission
    from .scenario import Scenario, load_scenario

    if n < 1:
        raise ValueError("n must be >= 1")
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    cache = cache if cache is not None else MissionCache()
    records = []
    for i in range(n):
        rec = run_mission(scenario, base_seed + i, trial_id=i, cache=cache, record=record)
        records.append(rec)
    return records, summarize(records)
