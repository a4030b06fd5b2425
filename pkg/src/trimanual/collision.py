"""Voxel-map obstacle checks and capsule self-collision checks.

Capsules are posed by forward kinematics and tested against occupied voxels by
exact segment-to-box distance; declared capsule pairs are tested by
segment-to-segment distance. Paths are checked at discrete joint-space
waypoints, so a "free" path verdict is only as good as the step resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyPointSet, StepOutOfRange, UnknownChain
from .geometry import Capsule, OccupancyGrid
from . import _collide as C

__all__ = [
    "Capsule", "OccupancyGrid", "CollisionScene", "CollisionResult", "grid_from_points",
    "config_in_collision", "path_in_collision", "posed_capsules", "waypoint_count",
]

DEFAULT_VOXEL = 0.02
DEFAULT_INFLATION = 0.01
DEFAULT_PATH_STEP = 0.05
_EPS = 1e-9


def grid_from_points(points, voxel_size=DEFAULT_VOXEL, inflation=DEFAULT_INFLATION):
    """Occupy every voxel whose closed box lies within ``inflation`` of a point."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyPointSet("cannot build a grid from zero points")
    if not voxel_size > 0 or inflation < 0:
        raise ValueError("voxel_size must be > 0 and inflation >= 0")
    s = float(voxel_size)
    lo_idx = np.floor((pts.min(axis=0) - inflation) / s).astype(np.int64) - 1
    hi_idx = np.floor((pts.max(axis=0) + inflation) / s).astype(np.int64) + 1
    origin = lo_idx * s
    dims = tuple(int(d) for d in hi_idx - lo_idx + 1)
    occ = np.zeros((dims[2], dims[1], dims[0]), bool)

    reach = int(math.ceil(inflation / s)) + 1
    rng = np.arange(-reach, reach + 1)
    offs = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    base = np.floor((pts - origin) / s).astype(np.int64)
    for chunk in range(0, len(pts), 4096):
        p = pts[chunk:chunk + 4096]
        b = base[chunk:chunk + 4096]
        cand = b[:, None, :] + offs[None, :, :]                      # (P, O, 3)
        box_lo = origin + cand * s
        gap = np.maximum(np.maximum(box_lo - p[:, None, :], p[:, None, :] - (box_lo + s)), 0.0)
        hit = np.einsum("poi,poi->po", gap, gap) <= inflation * inflation
        idx = cand[hit]
        ok = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
        idx = idx[ok]
        occ[idx[:, 2], idx[:, 1], idx[:, 0]] = True
    return OccupancyGrid(origin, s, dims, occ)


@dataclass(frozen=True, eq=False)
class CollisionScene:
    """Obstacle grid plus the chains (keyed by name) and self-collision pairs to test.

    Pairs are (chain_a, capsule_i, chain_b, capsule_j); adjacent capsules of the
    same chain are rejected at construction.
    """

    grid: OccupancyGrid | None
    chains: dict
    self_pairs: tuple = ()

    def __post_init__(self):
        pairs = tuple((str(a), int(i), str(b), int(j)) for a, i, b, j in self.self_pairs)
        for a, i, b, j in pairs:
            if a == b and abs(i - j) <= 1:
                raise ValueError(f"self pair ({a},{i},{b},{j}) names adjacent capsules")
        object.__setattr__(self, "self_pairs", pairs)
        object.__setattr__(self, "chains", dict(self.chains))

    def with_chains(self, **chains):
        merged = dict(self.chains)
        merged.update(chains)
        return CollisionScene(self.grid, merged, self.self_pairs)

    def to_dict(self):
        return {
            "grid": None if self.grid is None else self.grid.to_dict(),
            "self_pairs": [list(p) for p in self.self_pairs],
        }

    @classmethod
    def from_dict(cls, d, chains):
        grid = None
        if d.get("grid"):
            grid = OccupancyGrid.from_dict(d["grid"])
        elif d.get("obstacle_points"):
            op = d["obstacle_points"]
            grid = grid_from_points(op["points"], op.get("voxel_size", DEFAULT_VOXEL),
                                    op.get("inflation", DEFAULT_INFLATION))
        return cls(grid, chains, tuple(tuple(p) for p in d.get("self_pairs", [])))


@dataclass(frozen=True)
class CollisionResult:
    colliding: bool
    kind: str | None = None          # "voxel" or "self"
    detail: tuple = field(default=())

    def __bool__(self):
        return self.colliding


FREE = CollisionResult(False)


def _capsule_arrays(chain):
    arr = chain.__dict__.get("_capsule_arrays")
    if arr is None:
        caps = chain.capsules
        arr = (np.array([c.joint for c in caps], np.int64).reshape(-1),
               np.array([c.a for c in caps], float).reshape(-1, 3),
               np.array([c.b for c in caps], float).reshape(-1, 3),
               np.array([c.radius for c in caps], float).reshape(-1))
        chain.__dict__["_capsule_arrays"] = arr
    return arr


def posed_capsules(chain, q):
    """World endpoints (m, 3), (m, 3) and radii (m,) of a chain's capsules."""
    q = chain.check_q(q)
    cj, ca, cb, radii = _capsule_arrays(chain)
    A, B = C.pose_capsules(*chain.arrays, q, cj, ca, cb)
    return A, B, radii


def posed_capsules_batch(chain, Q):
    """Capsule endpoints for a batch of configurations: (N, m, 3) twice, radii (m,)."""
    Q = np.ascontiguousarray(np.atleast_2d(Q), dtype=float)
    cj, ca, cb, radii = _capsule_arrays(chain)
    A, B = C.pose_capsules_batch(*chain.arrays, Q, cj, ca, cb)
    return A, B, radii


def _point_segment_dist(P, a, b):
    ab = b - a
    L2 = float(ab @ ab)
    if L2 == 0.0:
        return np.linalg.norm(P - a, axis=-1)
    t = np.clip(((P - a) @ ab) / L2, 0.0, 1.0)
    return np.linalg.norm(P - (a + t[..., None] * ab), axis=-1)


def _box_dist2(x, lo, hi):
    g = np.maximum(np.maximum(lo - x, x - hi), 0.0)
    return np.einsum("...i,...i->...", g, g)


def segment_aabb_distance(a, b, lo, hi, iters=90):
    """Distance from segment ab to each box [lo_k, hi_k].

    The squared distance to a convex set is convex along the segment, so a
    ternary search on the segment parameter converges to the minimum.
    """
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    ab = b - a
    t0 = np.zeros(len(lo))
    t1 = np.ones(len(lo))
    for _ in range(iters):
        m1 = t0 + (t1 - t0) / 3.0
        m2 = t1 - (t1 - t0) / 3.0
        f1 = _box_dist2(a + m1[:, None] * ab, lo, hi)
        f2 = _box_dist2(a + m2[:, None] * ab, lo, hi)
        left = f1 < f2
        t1 = np.where(left, m2, t1)
        t0 = np.where(left, t0, m1)
    tm = 0.5 * (t0 + t1)
    best = np.minimum(_box_dist2(a + tm[:, None] * ab, lo, hi),
                      np.minimum(_box_dist2(a, lo, hi), _box_dist2(b, lo, hi)))
    return np.sqrt(best)


def segment_segment_distance(p1, q1, p2, q2):
    """Closest distance between segments p1q1 and p2q2."""
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = float(d1 @ d1)
    e = float(d2 @ d2)
    f = float(d2 @ r)
    if a <= 1e-15 and e <= 1e-15:
        return float(np.linalg.norm(r))
    if a <= 1e-15:
        s = 0.0
        t = min(max(f / e, 0.0), 1.0)
    else:
        c = float(d1 @ r)
        if e <= 1e-15:
            t = 0.0
            s = min(max(-c / a, 0.0), 1.0)
        else:
            b = float(d1 @ d2)
            denom = a * e - b * b
            s = min(max((b * f - c * e) / denom, 0.0), 1.0) if denom > 1e-15 else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t = 0.0
                s = min(max(-c / a, 0.0), 1.0)
            elif t > 1.0:
                t = 1.0
                s = min(max((b - c) / a, 0.0), 1.0)
    return float(np.linalg.norm((p1 + d1 * s) - (p2 + d2 * t)))


def _capsule_hits_grid(grid, a, b, r):
    ix, iy, iz = C.capsule_grid_hit(grid.origin, float(grid.voxel_size), grid.occupancy,
                                    np.asarray(a, float), np.asarray(b, float), float(r), _EPS)
    return None if ix < 0 else (int(ix), int(iy), int(iz))


def _check_posed(scene, posed):
    grid = scene.grid
    if grid is not None and grid.n_occupied:
        for name, (A, B, radii) in posed.items():
            for m in range(len(radii)):
                v = _capsule_hits_grid(grid, A[m], B[m], radii[m])
                if v is not None:
                    return CollisionResult(True, "voxel", (name, m, v))
    for a, i, b, j in scene.self_pairs:
        if a not in posed or b not in posed:
            continue
        Aa, Ba, ra = posed[a]
        Ab, Bb, rb = posed[b]
        if C.seg_seg_dist(Aa[i], Ba[i], Ab[j], Bb[j]) <= ra[i] + rb[j] + _EPS:
            return CollisionResult(True, "self", (a, i, b, j))
    return FREE


def config_in_collision(scene, assignments):
    """Test the assigned chains against the grid and the declared self pairs.

    Chains absent from ``assignments`` are ignored, as are pairs involving them.
    Returns a truthy :class:`CollisionResult` naming the first offending
    (chain, capsule, voxel) or self pair.
    """
    posed = {}
    for name, q in assignments.items():
        if name not in scene.chains:
            raise UnknownChain(name)
        posed[name] = posed_capsules(scene.chains[name], q)
    return _check_posed(scene, posed)


def first_collision(scene, batch):
    """Index of the first colliding row of a batch of simultaneous configurations.

    ``batch`` maps chain name -> (N, n) array (all with N rows) or a single
    joint vector held fixed. Returns (index, CollisionResult) or None.
    """
    posed = {}
    N = 1
    for name, Q in batch.items():
        if name not in scene.chains:
            raise UnknownChain(name)
        Q = np.asarray(Q, float)
        if Q.ndim == 1:
            posed[name] = (True, posed_capsules(scene.chains[name], Q))
        else:
            posed[name] = (False, posed_capsules_batch(scene.chains[name], Q))
            N = max(N, len(Q))
    for k in range(N):
        cur = {}
        for name, (fixed, (A, B, r)) in posed.items():
            cur[name] = (A, B, r) if fixed else (A[k], B[k], r)
        hit = _check_posed(scene, cur)
        if hit:
            return k, hit
    return None


def waypoint_count(q_from, q_to, step):
    span = float(np.max(np.abs(np.asarray(q_to, float) - np.asarray(q_from, float)), initial=0.0))
    return int(math.ceil(span / step - 1e-9)) + 1 if span > 0 else 1


def path_waypoints(q_from, q_to, step):
    q_from = np.asarray(q_from, float)
    q_to = np.asarray(q_to, float)
    n = waypoint_count(q_from, q_to, step)
    if n == 1:
        return q_from[None, :].copy()
    f = np.linspace(0.0, 1.0, n)[:, None]
    W = q_from + f * (q_to - q_from)
    W[-1] = q_to
    return W


def path_in_collision(scene, chain, q_from, q_to, step=DEFAULT_PATH_STEP, others=None):
    """Linear joint-space path check at ceil(|dq|_inf / step) + 1 waypoints.

    ``others`` fixes the configuration of any other chains that should take
    part in the check (e.g. the opposite arm for self pairs).
    """
    if not 0 < step <= 0.1:
        raise StepOutOfRange(f"path step {step} outside (0, 0.1]")
    if chain not in scene.chains:
        raise UnknownChain(chain)
    c = scene.chains[chain]
    q_from = c.check_q(q_from)
    q_to = c.check_q(q_to)
    batch = dict(others or {})
    batch[chain] = path_waypoints(q_from, q_to, step)
    return first_collision(scene, batch) is not None


def paths_in_collision(scene, moves, step=DEFAULT_PATH_STEP, others=None):
    """Simultaneous linear motion of several chains sampled on a shared clock.

    ``moves`` maps chain name -> (q_from, q_to). The sample count is the largest
    per-chain waypoint count, so no chain moves more than ``step`` between samples.
    """
    if not 0 < step <= 0.1:
        raise StepOutOfRange(f"path step {step} outside (0, 0.1]")
    n = max(waypoint_count(a, b, step) for a, b in moves.values())
    f = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    f = f[:, None]
    batch = dict(others or {})
    for name, (a, b) in moves.items():
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        W = a + f * (b - a)
        if n > 1:
            W[-1] = b
        batch[name] = W
    return first_collision(scene, batch) is not None
