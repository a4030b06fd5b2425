"""Rigid poses, revolute serial chains, forward kinematics and iterative IK."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from . import _kernels as K
from .errors import DimensionMismatch, NotConverged, StepOutOfRange
from .geometry import Capsule, OccupancyGrid

POSITION_ONLY = (True, True, True, False, False, False)
FULL_POSE = (True, True, True, True, True, True)


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    R = np.asarray(R, float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def rpy_to_matrix(roll, pitch, yaw):
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return math.atan2(math.sin(a), math.cos(a))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: position in meters and unit quaternion (w, x, y, z)."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(3)
        q = np.array(self.orientation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("orientation quaternion must be finite and non-zero")
        q = q / n
        if q[0] < 0:
            q = -q
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, R, position=(0.0, 0.0, 0.0)):
        return cls(position, matrix_to_quat(R))

    @classmethod
    def from_rpy(cls, roll, pitch, yaw, position=(0.0, 0.0, 0.0)):
        return cls.from_matrix(rpy_to_matrix(roll, pitch, yaw), position)

    @classmethod
    def from_axis_angle(cls, axis, angle, position=(0.0, 0.0, 0.0)):
        axis = np.asarray(axis, float)
        axis = axis / np.linalg.norm(axis)
        h = 0.5 * angle
        return cls(position, np.r_[math.cos(h), math.sin(h) * axis])

    @property
    def rotation(self):
        return quat_to_matrix(self.orientation)

    def rpy(self):
        """(roll, pitch, yaw), Z-Y-X convention."""
        return tuple(float(a) for a in K.rpy_from_R(self.rotation))

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.position
        return T

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return Pose(self.position + self.rotation @ other.position,
                        quat_multiply(self.orientation, other.orientation))
        return NotImplemented

    def inverse(self):
        Rt = self.rotation.T
        w, x, y, z = self.orientation
        return Pose(-Rt @ self.position, [w, -x, -y, -z])

    def transform_point(self, point):
        return self.rotation @ np.asarray(point, float) + self.position

    def to_dict(self):
        return {"pos": [float(x) for x in self.position], "quat": [float(x) for x in self.orientation]}

    @classmethod
    def from_dict(cls, d):
        if d is None:
            return cls()
        if "rpy" in d:
            return cls.from_rpy(*d["rpy"], position=d.get("pos", (0, 0, 0)))
        return cls(d.get("pos", (0.0, 0.0, 0.0)), d.get("quat", (1.0, 0.0, 0.0, 0.0)))

    def __repr__(self):
        r, p, y = self.rpy()
        x0, x1, x2 = self.position
        return f"Pose(pos=({x0:.4f}, {x1:.4f}, {x2:.4f}), rpy=({r:.4f}, {p:.4f}, {y:.4f}))"


# ---------------------------------------------------------------------------
# chains


@dataclass(frozen=True, eq=False)
class JointSpec:
    axis: np.ndarray
    origin_offset: Pose
    limit_lo: float
    limit_hi: float

    def __post_init__(self):
        a = np.asarray(self.axis, float).reshape(3)
        n = np.linalg.norm(a)
        if n == 0:
            raise ValueError("joint axis must be non-zero")
        object.__setattr__(self, "axis", a / n)
        if not self.limit_lo < self.limit_hi:
            raise ValueError("joint limits must satisfy lo < hi")


@dataclass(frozen=True, eq=False)
class ChainSpec:
    """Serial chain of revolute joints.

    Tool pose = base_pose * prod_k(origin_offset_k * Rot(axis_k, q_k)) * tool_offset.
    ``mount`` names the chain whose tool frame ``base_pose`` is expressed in.
    """

    name: str
    base_pose: Pose
    joints: tuple
    tool_offset: Pose = field(default_factory=Pose)
    capsules: tuple = ()
    mount: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "capsules", tuple(self.capsules))

    @property
    def n_joints(self):
        return len(self.joints)

    @cached_property
    def lower(self):
        return np.array([j.limit_lo for j in self.joints])

    @cached_property
    def upper(self):
        return np.array([j.limit_hi for j in self.joints])

    @cached_property
    def arrays(self):
        """Packed arrays consumed by the compiled kernels."""
        n = self.n_joints
        off_R = np.empty((n, 3, 3))
        off_p = np.empty((n, 3))
        axes = np.empty((n, 3))
        for k, j in enumerate(self.joints):
            off_R[k] = j.origin_offset.rotation
            off_p[k] = j.origin_offset.position
            axes[k] = j.axis
        return (self.base_pose.rotation, np.array(self.base_pose.position), off_R, off_p, axes,
                self.tool_offset.rotation, np.array(self.tool_offset.position))

    @cached_property
    def reach(self):
        """Upper bound on the distance from the first joint origin to the tool."""
        return float(sum(np.linalg.norm(j.origin_offset.position) for j in self.joints[1:])
                     + np.linalg.norm(self.tool_offset.position))

    def admissible(self, q, margin=0.0):
        q = np.asarray(q, float)
        return bool(np.all(q >= self.lower + margin) and np.all(q <= self.upper - margin))

    def clip(self, q):
        return np.clip(np.asarray(q, float), self.lower, self.upper)

    def with_base(self, base_pose):
        return replace(self, base_pose=base_pose)

    def mounted_on(self, parent_tool_pose):
        """Copy with the base expressed in the parent's frame (mount resolved)."""
        return replace(self, base_pose=parent_tool_pose @ self.base_pose, mount=None)

    def check_q(self, q):
        q = np.asarray(q, dtype=float).reshape(-1)
        if q.shape[0] != self.n_joints:
            raise DimensionMismatch(
                f"chain {self.name!r} has {self.n_joints} joints, got {q.shape[0]} values")
        if not np.all(np.isfinite(q)):
            raise ValueError("joint values must be finite")
        return q

    def to_dict(self):
        d = {
            "name": self.name,
            "base_pose": self.base_pose.to_dict(),
            "joints": [{"axis": [float(x) for x in j.axis], "offset": j.origin_offset.to_dict(),
                        "lo": j.limit_lo, "hi": j.limit_hi} for j in self.joints],
            "tool_offset": self.tool_offset.to_dict(),
        }
        if self.capsules:
            d["capsules"] = [c.to_dict() for c in self.capsules]
        if self.mount:
            d["mount"] = self.mount
        return d

    @classmethod
    def from_dict(cls, d):
        joints = [JointSpec(j["axis"], Pose.from_dict(j.get("offset")), float(j["lo"]), float(j["hi"]))
                  for j in d["joints"]]
        caps = [Capsule.from_dict(c) for c in d.get("capsules", [])]
        return cls(d["name"], Pose.from_dict(d.get("base_pose")), joints,
                   Pose.from_dict(d.get("tool_offset")), caps, d.get("mount"))

    def fingerprint(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def load_chains(path=None):
    """Chains keyed by name from a JSON file ({"chains": [...]} or a bare list/object)."""
    if path is None:
        text = resources.files("trimanual.data").joinpath("chains.json").read_text()
    else:
        text = Path(path).read_text()
    data = json.loads(text)
    if isinstance(data, dict) and "chains" in data:
        data = data["chains"]
    if isinstance(data, dict):
        data = [data]
    return {c.name: c for c in (ChainSpec.from_dict(d) for d in data)}


def planar_chain(lengths, name="planar", limit=math.pi):
    """Planar chain of z-axis revolute joints with links along x (test fixture helper)."""
    joints = []
    prev = 0.0
    for L in lengths:
        joints.append(JointSpec((0, 0, 1), Pose((prev, 0, 0)), -limit, limit))
        prev = L
    return ChainSpec(name, Pose(), joints, Pose((prev, 0, 0)))


# ---------------------------------------------------------------------------
# operations


def forward_kinematics(chain, q):
    q = chain.check_q(q)
    R, p = K.fk_tool(*chain.arrays, q)
    return Pose.from_matrix(R, p)


def link_frames(chain, q):
    """Rotation matrices (n+1, 3, 3) and origins (n+1, 3); the last entry is the tool."""
    q = chain.check_q(q)
    return K.fk_frames(*chain.arrays, q)


def fk_positions(chain, Q):
    """Tool positions for a batch of joint vectors (N, n)."""
    Q = np.ascontiguousarray(np.atleast_2d(Q), dtype=float)
    if Q.shape[1] != chain.n_joints:
        raise DimensionMismatch("batch width does not match joint count")
    _, ps = K.fk_tool_batch(*chain.arrays, Q)
    return ps


def fk_batch(chain, Q):
    Q = np.ascontiguousarray(np.atleast_2d(Q), dtype=float)
    if Q.shape[1] != chain.n_joints:
        raise DimensionMismatch("batch width does not match joint count")
    return K.fk_tool_batch(*chain.arrays, Q)


def jacobian_numeric(chain, q, h=1e-6):
    """6xn central-difference Jacobian; rows are (dx, dy, dz, wx, wy, wz) per radian,
    the angular rows being world-frame rotation-vector rates."""
    if not 0 < h <= 1e-2:
        raise StepOutOfRange(f"finite-difference step {h} outside (0, 1e-2]")
    q = chain.check_q(q)
    return K.jacobian(*chain.arrays, q, float(h))


@dataclass(frozen=True)
class IkConfig:
    damping: float = 0.05
    step_clamp: float = 0.2
    tol_pos: float = 1e-4
    tol_rot: float = 1e-3
    max_iters: int = 200
    fd_step: float = 1e-6


def _mask_array(mask):
    if isinstance(mask, int):
        mask = [(mask >> i) & 1 for i in range(6)]
    m = np.asarray([bool(x) for x in mask], dtype=np.bool_)
    if m.shape != (6,):
        raise ValueError("mask must select among 6 pose components (x, y, z, roll, pitch, yaw)")
    return m


def ik_solve(chain, target, seed, mask=FULL_POSE, cfg=IkConfig()):
    """Run damped least squares; returns (q, converged, iterations, pos_res, rot_res).

    Rotation components of the mask select world-frame rotation-vector axes.
    """
    seed = chain.check_q(seed)
    q, it, pr, rr, ok = K.dls_ik(*chain.arrays, chain.lower, chain.upper, seed,
                                 target.rotation, np.array(target.position), _mask_array(mask),
                                 cfg.damping, cfg.step_clamp, cfg.tol_pos, cfg.tol_rot,
                                 int(cfg.max_iters), cfg.fd_step)
    return q, bool(ok), int(it), float(pr), float(rr)


def ik_damped_ls(chain, target, seed, mask=FULL_POSE, cfg=IkConfig()):
    q, ok, it, pr, rr = ik_solve(chain, target, seed, mask, cfg)
    if not ok:
        raise NotConverged(it, pr, q=q, rot_residual=rr)
    return q


# ---------------------------------------------------------------------------
# reachable sets


@dataclass(frozen=True, eq=False)
class ReachableSet:
    chain_name: str
    points: np.ndarray
    summary: OccupancyGrid

    def contains(self, point):
        """Voxel-membership test; a point on a voxel face belongs to the voxel
        on its upper side (floor rule)."""
        return bool(self.summary.is_occupied(np.asarray(point, float).reshape(1, 3))[0])


def sample_reachable_set(chain, n, seed=0, voxel_size=0.02):
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    Q = rng.uniform(chain.lower, chain.upper, size=(int(n), chain.n_joints))
    pts = fk_positions(chain, Q)
    lo = np.floor(pts.min(axis=0) / voxel_size) * voxel_size
    idx = np.floor((pts - lo) / voxel_size).astype(np.int64)
    dims = tuple(int(d) for d in idx.max(axis=0) + 1)
    occ = np.zeros((dims[2], dims[1], dims[0]), bool)
    occ[idx[:, 2], idx[:, 1], idx[:, 0]] = True
    return ReachableSet(chain.name, pts, OccupancyGrid(lo, voxel_size, dims, occ))
