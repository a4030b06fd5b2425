"""Compiled capsule posing and distance kernels backing the collision module."""
import math

import numpy as np
from numba import njit

from ._kernels import fk_frames, mv3


@njit(cache=True)
def pose_capsules(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q, cj, ca, cb):
    """World endpoints of every capsule; cj = -1 attaches to the chain base."""
    Rs, ps = fk_frames(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q)
    m = cj.shape[0]
    A = np.empty((m, 3))
    B = np.empty((m, 3))
    for i in range(m):
        if cj[i] < 0:
            R = base_R
            p = base_p
        else:
            R = Rs[cj[i]]
            p = ps[cj[i]]
        A[i] = mv3(R, ca[i]) + p
        B[i] = mv3(R, cb[i]) + p
    return A, B


@njit(cache=True)
def pose_capsules_batch(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, Q, cj, ca, cb):
    N = Q.shape[0]
    m = cj.shape[0]
    A = np.empty((N, m, 3))
    B = np.empty((N, m, 3))
    for k in range(N):
        a, b = pose_capsules(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, Q[k], cj, ca, cb)
        A[k] = a
        B[k] = b
    return A, B


@njit(cache=True)
def seg_seg_dist(p1, q1, p2, q2):
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.dot(d1, d1)
    e = np.dot(d2, d2)
    f = np.dot(d2, r)
    if a <= 1e-15 and e <= 1e-15:
        return math.sqrt(np.dot(r, r))
    if a <= 1e-15:
        s = 0.0
        t = min(max(f / e, 0.0), 1.0)
    else:
        c = np.dot(d1, r)
        if e <= 1e-15:
            t = 0.0
            s = min(max(-c / a, 0.0), 1.0)
        else:
            b = np.dot(d1, d2)
            denom = a * e - b * b
            s = min(max((b * f - c * e) / denom, 0.0), 1.0) if denom > 1e-15 else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t = 0.0
                s = min(max(-c / a, 0.0), 1.0)
            elif t > 1.0:
                t = 1.0
                s = min(max((b - c) / a, 0.0), 1.0)
    w = (p1 + d1 * s) - (p2 + d2 * t)
    return math.sqrt(np.dot(w, w))


@njit(cache=True)
def _box_d2(x0, x1, x2, lo, hi):
    d = 0.0
    g = max(lo[0] - x0, x0 - hi[0], 0.0)
    d += g * g
    g = max(lo[1] - x1, x1 - hi[1], 0.0)
    d += g * g
    g = max(lo[2] - x2, x2 - hi[2], 0.0)
    d += g * g
    return d


@njit(cache=True)
def seg_box_dist2(a, b, lo, hi):
    """Squared segment-to-box distance by ternary search (convex along the segment)."""
    t0 = 0.0
    t1 = 1.0
    for _ in range(80):
        m1 = t0 + (t1 - t0) / 3.0
        m2 = t1 - (t1 - t0) / 3.0
        f1 = _box_d2(a[0] + m1 * (b[0] - a[0]), a[1] + m1 * (b[1] - a[1]), a[2] + m1 * (b[2] - a[2]), lo, hi)
        f2 = _box_d2(a[0] + m2 * (b[0] - a[0]), a[1] + m2 * (b[1] - a[1]), a[2] + m2 * (b[2] - a[2]), lo, hi)
        if f1 < f2:
            t1 = m2
        else:
            t0 = m1
    tm = 0.5 * (t0 + t1)
    best = _box_d2(a[0] + tm * (b[0] - a[0]), a[1] + tm * (b[1] - a[1]), a[2] + tm * (b[2] - a[2]), lo, hi)
    best = min(best, _box_d2(a[0], a[1], a[2], lo, hi), _box_d2(b[0], b[1], b[2], lo, hi))
    return best


@njit(cache=True)
def capsule_grid_hit(origin, s, occ, a, b, r, eps):
    """First occupied voxel (ix, iy, iz) within r of segment ab, or (-1, -1, -1)."""
    nz, ny, nx = occ.shape
    dims = (nx, ny, nz)
    i0 = np.empty(3, np.int64)
    i1 = np.empty(3, np.int64)
    for k in range(3):
        lo = min(a[k], b[k]) - r
        hi = max(a[k], b[k]) + r
        i0[k] = max(int(math.floor((lo - origin[k]) / s)), 0)
        i1[k] = min(int(math.floor((hi - origin[k]) / s)), dims[k] - 1)
        if i1[k] < i0[k]:
            return -1, -1, -1
    ab = b - a
    L2 = np.dot(ab, ab)
    half_diag = 0.5 * math.sqrt(3.0) * s
    lo_b = np.empty(3)
    hi_b = np.empty(3)
    c = np.empty(3)
    for iz in range(i0[2], i1[2] + 1):
        for iy in range(i0[1], i1[1] + 1):
            for ix in range(i0[0], i1[0] + 1):
                if not occ[iz, iy, ix]:
                    continue
                lo_b[0] = origin[0] + ix * s
                lo_b[1] = origin[1] + iy * s
                lo_b[2] = origin[2] + iz * s
                for k in range(3):
                    hi_b[k] = lo_b[k] + s
                    c[k] = lo_b[k] + 0.5 * s
                if L2 > 0.0:
                    t = min(max(np.dot(c - a, ab) / L2, 0.0), 1.0)
                else:
                    t = 0.0
                w = c - (a + t * ab)
                dc = math.sqrt(np.dot(w, w))
                if dc <= r:
                    return ix, iy, iz
                if dc > r + half_diag + eps:
                    continue
                if math.sqrt(seg_box_dist2(a, b, lo_b, hi_b)) <= r + eps:
                    return ix, iy, iz
    return -1, -1, -1
