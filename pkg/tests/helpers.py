"""Chain fixtures shared by several test modules."""
import math

import numpy as np

from trimanual.kincore import ChainSpec, JointSpec, Pose


def random_chain(rng, n=None, name="rand"):
    """Random serial chain with arbitrary axes, offsets and base pose."""
    n = n or int(rng.integers(1, 8))
    joints = []
    for _ in range(n):
        axis = rng.normal(size=3)
        off = Pose(rng.uniform(-0.3, 0.3, 3), _rand_quat(rng))
        lo = rng.uniform(-3.0, -0.5)
        joints.append(JointSpec(axis, off, lo, lo + rng.uniform(1.0, 5.5)))
    return ChainSpec(name, Pose(rng.uniform(-1, 1, 3), _rand_quat(rng)), joints,
                     Pose(rng.uniform(-0.2, 0.2, 3), _rand_quat(rng)))


def _rand_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def ypp_chain():
    """Reduced 3-DOF carrier: base yaw, shoulder pitch, elbow pitch; level tool at q = 0."""
    h = math.pi / 2
    return ChainSpec("ypp", Pose((0.0, 0.0, 0.5)), [
        JointSpec((0, 0, 1), Pose(), -math.pi, math.pi),
        JointSpec((0, 1, 0), Pose((0.0, 0.0, 0.1)), -h, h),
        JointSpec((0, 1, 0), Pose((0.4, 0.0, 0.0)), -h, h),
    ], Pose((0.4, 0.0, 0.0)))
