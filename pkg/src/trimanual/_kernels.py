"""Compiled numeric kernels for chain kinematics, the iterative solvers and the
pendulum integrator.

Chains are passed around as a tuple of packed arrays (see ``ChainSpec.arrays``):

    base_R (3,3), base_p (3,), off_R (n,3,3), off_p (n,3), axes (n,3),
    tool_R (3,3), tool_p (3,), lo (n,), hi (n,)

Everything here is pure and allocation-light; the Python layer owns validation.
"""
import math

import numpy as np
from numba import njit

GRAVITY = 9.81


@njit(cache=True)
def mm3(A, B):
    C = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            C[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]
    return C


@njit(cache=True)
def mv3(A, v):
    out = np.empty(3)
    for i in range(3):
        out[i] = A[i, 0] * v[0] + A[i, 1] * v[1] + A[i, 2] * v[2]
    return out


@njit(cache=True)
def mmT3(A, B):
    """A @ B.T"""
    C = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            C[i, j] = A[i, 0] * B[j, 0] + A[i, 1] * B[j, 1] + A[i, 2] * B[j, 2]
    return C


@njit(cache=True)
def rodrigues(axis, angle):
    c = math.cos(angle)
    s = math.sin(angle)
    C = 1.0 - c
    x, y, z = axis[0], axis[1], axis[2]
    R = np.empty((3, 3))
    R[0, 0] = c + x * x * C
    R[0, 1] = x * y * C - z * s
    R[0, 2] = x * z * C + y * s
    R[1, 0] = y * x * C + z * s
    R[1, 1] = c + y * y * C
    R[1, 2] = y * z * C - x * s
    R[2, 0] = z * x * C - y * s
    R[2, 1] = z * y * C + x * s
    R[2, 2] = c + z * z * C
    return R


@njit(cache=True)
def rot_log(R):
    """Rotation vector of R (axis * angle), robust near 0 and pi."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    cos_a = (tr - 1.0) * 0.5
    if cos_a > 1.0:
        cos_a = 1.0
    elif cos_a < -1.0:
        cos_a = -1.0
    angle = math.acos(cos_a)
    w = np.empty(3)
    w[0] = R[2, 1] - R[1, 2]
    w[1] = R[0, 2] - R[2, 0]
    w[2] = R[1, 0] - R[0, 1]
    if angle < 1e-6:
        # first-order: log(R) ~ vee(R - R^T) / 2
        return 0.5 * w
    if math.pi - angle > 1e-6:
        return w * (angle / (2.0 * math.sin(angle)))
    # near pi: axis from the symmetric part
    out = np.empty(3)
    xx = max((R[0, 0] + 1.0) * 0.5, 0.0)
    yy = max((R[1, 1] + 1.0) * 0.5, 0.0)
    zz = max((R[2, 2] + 1.0) * 0.5, 0.0)
    if xx >= yy and xx >= zz:
        x = math.sqrt(xx)
        y = (R[0, 1] + R[1, 0]) / (4.0 * x)
        z = (R[0, 2] + R[2, 0]) / (4.0 * x)
    elif yy >= zz:
        y = math.sqrt(yy)
        x = (R[0, 1] + R[1, 0]) / (4.0 * y)
        z = (R[1, 2] + R[2, 1]) / (4.0 * y)
    else:
        z = math.sqrt(zz)
        x = (R[0, 2] + R[2, 0]) / (4.0 * z)
        y = (R[1, 2] + R[2, 1]) / (4.0 * z)
    n = math.sqrt(x * x + y * y + z * z)
    out[0] = x / n
    out[1] = y / n
    out[2] = z / n
    # choose the sign consistent with the antisymmetric part
    if out[0] * w[0] + out[1] * w[1] + out[2] * w[2] < 0.0:
        out[:] = -out
    return out * angle


@njit(cache=True)
def rpy_from_R(R):
    """Z-Y-X Euler angles (roll, pitch, yaw) with R = Rz(yaw) Ry(pitch) Rx(roll)."""
    out = np.empty(3)
    sp = -R[2, 0]
    if sp > 1.0:
        sp = 1.0
    elif sp < -1.0:
        sp = -1.0
    out[1] = math.asin(sp)
    out[0] = math.atan2(R[2, 1], R[2, 2])
    out[2] = math.atan2(R[1, 0], R[0, 0])
    return out


@njit(cache=True)
def wrap(a):
    return math.atan2(math.sin(a), math.cos(a))


# ---------------------------------------------------------------------------
# forward kinematics


@njit(cache=True)
def fk_tool(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q):
    R = base_R.copy()
    p = base_p.copy()
    for k in range(q.shape[0]):
        p = p + mv3(R, off_p[k])
        R = mm3(mm3(R, off_R[k]), rodrigues(axes[k], q[k]))
    return mm3(R, tool_R), p + mv3(R, tool_p)


@njit(cache=True)
def fk_frames(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q):
    """Frames after every joint (indices 0..n-1) plus the tool frame (index n)."""
    n = q.shape[0]
    Rs = np.empty((n + 1, 3, 3))
    ps = np.empty((n + 1, 3))
    R = base_R.copy()
    p = base_p.copy()
    for k in range(n):
        p = p + mv3(R, off_p[k])
        R = mm3(mm3(R, off_R[k]), rodrigues(axes[k], q[k]))
        Rs[k] = R
        ps[k] = p
    Rs[n] = mm3(R, tool_R)
    ps[n] = p + mv3(R, tool_p)
    return Rs, ps


@njit(cache=True)
def fk_tool_batch(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, Q):
    N = Q.shape[0]
    Rs = np.empty((N, 3, 3))
    ps = np.empty((N, 3))
    for i in range(N):
        R, p = fk_tool(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, Q[i])
        Rs[i] = R
        ps[i] = p
    return Rs, ps


@njit(cache=True)
def fk_pos(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q):
    R, p = fk_tool(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q)
    return p


@njit(cache=True)
def jacobian(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q, h):
    """Central-difference 6xn Jacobian; rotation rows use log(R+ R-^T)/(2h)."""
    n = q.shape[0]
    J = np.empty((6, n))
    for k in range(n):
        qp = q.copy()
        qm = q.copy()
        qp[k] += h
        qm[k] -= h
        Rp, pp = fk_tool(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, qp)
        Rm, pm = fk_tool(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, qm)
        w = rot_log(mmT3(Rp, Rm))
        for i in range(3):
            J[i, k] = (pp[i] - pm[i]) / (2.0 * h)
            J[3 + i, k] = w[i] / (2.0 * h)
    return J


@njit(cache=True)
def jacobian_pos(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q, h):
    n = q.shape[0]
    J = np.empty((3, n))
    for k in range(n):
        qp = q.copy()
        qm = q.copy()
        qp[k] += h
        qm[k] -= h
        pp = fk_pos(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, qp)
        pm = fk_pos(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, qm)
        for i in range(3):
            J[i, k] = (pp[i] - pm[i]) / (2.0 * h)
    return J


@njit(cache=True)
def fk_pos_jac(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q):
    """Tool position and its analytic 3xn Jacobian (axis_k x (p_tool - o_k))."""
    n = q.shape[0]
    Rs, ps = fk_frames(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q)
    p = ps[n]
    J = np.empty((3, n))
    for k in range(n):
        a = mv3(Rs[k], axes[k])
        r0 = p[0] - ps[k, 0]
        r1 = p[1] - ps[k, 1]
        r2 = p[2] - ps[k, 2]
        J[0, k] = a[1] * r2 - a[2] * r1
        J[1, k] = a[2] * r0 - a[0] * r2
        J[2, k] = a[0] * r1 - a[1] * r0
    return p, J


@njit(cache=True)
def fk_jac6(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q):
    """Tool pose and analytic 6xn Jacobian (world-frame angular rows = joint axes)."""
    n = q.shape[0]
    Rs, ps = fk_frames(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q)
    p = ps[n]
    J = np.empty((6, n))
    for k in range(n):
        a = mv3(Rs[k], axes[k])
        r0 = p[0] - ps[k, 0]
        r1 = p[1] - ps[k, 1]
        r2 = p[2] - ps[k, 2]
        J[0, k] = a[1] * r2 - a[2] * r1
        J[1, k] = a[2] * r0 - a[0] * r2
        J[2, k] = a[0] * r1 - a[1] * r0
        J[3, k] = a[0]
        J[4, k] = a[1]
        J[5, k] = a[2]
    return Rs[n], p, J


@njit(cache=True)
def solve_spd3(A, b):
    """Solve a symmetric positive definite 3x3 system by Cholesky."""
    l00 = math.sqrt(A[0, 0])
    l10 = A[1, 0] / l00
    l20 = A[2, 0] / l00
    l11 = math.sqrt(A[1, 1] - l10 * l10)
    l21 = (A[2, 1] - l20 * l10) / l11
    l22 = math.sqrt(A[2, 2] - l20 * l20 - l21 * l21)
    y0 = b[0] / l00
    y1 = (b[1] - l10 * y0) / l11
    y2 = (b[2] - l20 * y0 - l21 * y1) / l22
    x = np.empty(3)
    x[2] = y2 / l22
    x[1] = (y1 - l21 * x[2]) / l11
    x[0] = (y0 - l10 * x[1] - l20 * x[2]) / l00
    return x


@njit(cache=True)
def clip(q, lo, hi):
    out = q.copy()
    for i in range(q.shape[0]):
        if out[i] < lo[i]:
            out[i] = lo[i]
        elif out[i] > hi[i]:
            out[i] = hi[i]
    return out


@njit(cache=True)
def clamp_step(dq, step_max):
    m = 0.0
    for i in range(dq.shape[0]):
        a = abs(dq[i])
        if a > m:
            m = a
    if m > step_max:
        return dq * (step_max / m)
    return dq


@njit(cache=True)
def pose_error(R, p, Rt, pt):
    e = np.empty(6)
    w = rot_log(mmT3(Rt, R))
    for i in range(3):
        e[i] = pt[i] - p[i]
        e[3 + i] = w[i]
    return e


@njit(cache=True)
def _masked_norms(e, mask):
    sp = 0.0
    sr = 0.0
    for i in range(3):
        if mask[i]:
            sp += e[i] * e[i]
        if mask[3 + i]:
            sr += e[3 + i] * e[3 + i]
    return math.sqrt(sp), math.sqrt(sr)


@njit(cache=True)
def dls_ik(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, lo, hi,
           q_seed, Rt, pt, mask, lam, step_max, tol_pos, tol_rot, max_iters, h):
    """Damped least-squares IK with per-step clamping into the joint limits.

    The damping ``lam`` applies in full while the masked error exceeds 5 cm
    and shrinks in proportion to it below that.

    Returns (q, iterations, pos_residual, rot_residual, converged).
    """
    n = q_seed.shape[0]
    m = 0
    for i in range(6):
        if mask[i]:
            m += 1
    rows = np.empty(m, dtype=np.int64)
    j = 0
    for i in range(6):
        if mask[i]:
            rows[j] = i
            j += 1
    q = clip(q_seed, lo, hi)
    pos_err = 0.0
    rot_err = 0.0
    for it in range(max_iters + 1):
        R, p, J = fk_jac6(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q)
        e = pose_error(R, p, Rt, pt)
        pos_err, rot_err = _masked_norms(e, mask)
        if pos_err <= tol_pos and rot_err <= tol_rot:
            return q, it, pos_err, rot_err, True
        if it == max_iters:
            break
        Jm = np.empty((m, n))
        em = np.empty(m)
        for a in range(m):
            em[a] = e[rows[a]]
            for b in range(n):
                Jm[a, b] = J[rows[a], b]
        # damping fades with the error so the last iterations are Gauss-Newton
        en = 0.0
        for a in range(m):
            en += em[a] * em[a]
        lam2 = lam * lam * min(1.0, math.sqrt(en) / 0.05) + 1e-10
        A = Jm @ Jm.T
        for a in range(m):
            A[a, a] += lam2
        y = np.linalg.solve(A, em)
        dq = clamp_step(Jm.T @ y, step_max)
        q = clip(q + dq, lo, hi)
    return q, max_iters, pos_err, rot_err, False


# ---------------------------------------------------------------------------
# min-displacement reach


@njit(cache=True)
def project_ball(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, lo, hi,
                 q, goal, tol, shrink, max_iter, mu, step_max, h):
    """Gauss-Newton minimum-norm correction until |fk(q) - goal| <= tol."""
    for it in range(max_iter):
        p, J = fk_pos_jac(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q)
        d = p - goal
        nd = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
        if nd <= tol:
            return q, True
        delta = d * (tol * shrink / nd) - d
        A = J @ J.T
        for a in range(3):
            A[a, a] += mu * mu
        dq = clamp_step(J.T @ solve_spd3(A, delta), step_max)
        q = clip(q + dq, lo, hi)
    p = fk_pos(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q)
    d = p - goal
    return q, math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) <= tol


@njit(cache=True)
def min_displacement_descent(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, lo, hi,
                             q_start, q0, goal, tol, max_outer, h, alpha_min=1e-7):
    """Projected descent on |q - q0|^2 over {q : |fk(q) - goal| <= tol}.

    Alternates a step toward q0 with a projection back onto the goal ball;
    a step is accepted only if it lowers the displacement cost.
    Returns (q, ok).
    """
    q, ok = project_ball(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, lo, hi,
                         q_start, goal, tol, 0.999, 100, 1e-4, 0.2, h)
    if not ok:
        return q, False
    diff = q - q0
    cost = np.dot(diff, diff)
    alpha = 1.0
    for it in range(max_outer):
        trial = clip(q + alpha * (q0 - q), lo, hi)
        trial, ok = project_ball(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, lo, hi,
                                 trial, goal, tol, 0.999, 30, 1e-4, 0.2, h)
        if ok:
            diff = trial - q0
            c = np.dot(diff, diff)
            if c < cost - 1e-15:
                q = trial
                cost = c
                alpha = min(1.0, alpha * 2.0)
                continue
        alpha *= 0.5
        if alpha < alpha_min:
            break
    return q, True


# ---------------------------------------------------------------------------
# next-best-view refinement


@njit(cache=True)
def nbv_residual(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q,
                 goal_p, goal_rpy, sqrt_a, sqrt_b, yaw_free):
    R, p = fk_tool(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q)
    rpy = rpy_from_R(R)
    m = 5 if yaw_free else 6
    r = np.empty(m)
    for i in range(3):
        r[i] = sqrt_a * (p[i] - goal_p[i])
    r[3] = sqrt_b * wrap(rpy[0] - goal_rpy[0])
    r[4] = sqrt_b * wrap(rpy[1] - goal_rpy[1])
    if not yaw_free:
        r[5] = sqrt_b * wrap(rpy[2] - goal_rpy[2])
    return r


@njit(cache=True)
def project_standoff(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, lo, hi,
                     q, goal_p, d_min, d_max, max_iter, h):
    """Move the tool radially until d_min <= |p - goal| <= d_max."""
    for it in range(max_iter):
        p, J = fk_pos_jac(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q)
        d = p - goal_p
        s = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
        if d_min <= s <= d_max:
            return q, True
        if s < 1e-12:
            return q, False
        if s < d_min:
            target = d_min * (1.0 + 1e-9) + 1e-12
        else:
            target = d_max * (1.0 - 1e-9)
        g = (d / s) @ J
        # joints pinned at a limit in the push direction cannot help
        sgn = 1.0 if target > s else -1.0
        for k in range(g.shape[0]):
            if (sgn * g[k] > 0.0 and q[k] >= hi[k]) or (sgn * g[k] < 0.0 and q[k] <= lo[k]):
                g[k] = 0.0
        gg = np.dot(g, g)
        if gg < 1e-16:
            return q, False
        q = clip(q + g * ((target - s) / gg), lo, hi)
    p = fk_pos(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q)
    d = p - goal_p
    s = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    return q, d_min <= s <= d_max


@njit(cache=True)
def nbv_refine(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, lo, hi,
               q_start, goal_p, goal_rpy, weight_pos, weight_rot, yaw_free, d_min,
               d_max, max_iters, h):
    """Levenberg-Marquardt descent on the weighted view cost with the standoff
    constraint enforced by projection after every trial step.

    Returns (q, cost, ok); ok is False when no standoff-feasible iterate exists.
    """
    sqrt_a = math.sqrt(weight_pos)
    sqrt_b = math.sqrt(weight_rot)
    n = q_start.shape[0]
    q, ok = project_standoff(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, lo, hi,
                             q_start, goal_p, d_min, d_max, 50, h)
    if not ok:
        return q, np.inf, False
    r = nbv_residual(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q,
                     goal_p, goal_rpy, sqrt_a, sqrt_b, yaw_free)
    cost = np.dot(r, r)
    m = r.shape[0]
    mu = 1e-3
    for it in range(max_iters):
        J = np.empty((m, n))
        for k in range(n):
            qp = q.copy()
            qm = q.copy()
            qp[k] += h
            qm[k] -= h
            rp = nbv_residual(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, qp,
                              goal_p, goal_rpy, sqrt_a, sqrt_b, yaw_free)
            rm = nbv_residual(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, qm,
                              goal_p, goal_rpy, sqrt_a, sqrt_b, yaw_free)
            for i in range(m):
                J[i, k] = (rp[i] - rm[i]) / (2.0 * h)
        g = J.T @ r
        H = J.T @ J
        improved = False
        while mu < 1e8:
            A = H.copy()
            for i in range(n):
                A[i, i] += mu
            dq = clamp_step(-np.linalg.solve(A, g), 0.3)
            trial = clip(q + dq, lo, hi)
            trial, ok = project_standoff(base_R, base_p, off_R, off_p, axes, tool_R, tool_p,
                                         lo, hi, trial, goal_p, d_min, d_max, 50, h)
            if ok:
                rt = nbv_residual(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, trial,
                                  goal_p, goal_rpy, sqrt_a, sqrt_b, yaw_free)
                ct = np.dot(rt, rt)
                if ct < cost:
                    gain = cost - ct
                    q = trial
                    r = rt
                    cost = ct
                    mu = max(mu / 3.0, 1e-9)
                    improved = gain > 1e-15 * max(cost, 1.0)
                    break
            mu *= 4.0
        if not improved:
            break
    return q, cost, True


# ---------------------------------------------------------------------------
# spherical pendulum (taut cord, cartesian state relative to the anchor)


@njit(cache=True)
def _pendulum_accel(r, v, L, damping, t, exc_const, gust_amp, gust_omega, gust_phase):
    a = np.empty(3)
    a[0] = exc_const[0] - damping * v[0]
    a[1] = exc_const[1] - damping * v[1]
    a[2] = exc_const[2] - damping * v[2] - GRAVITY
    for k in range(gust_omega.shape[0]):
        s = math.sin(gust_omega[k] * t + gust_phase[k])
        a[0] += gust_amp[k, 0] * s
        a[1] += gust_amp[k, 1] * s
        a[2] += gust_amp[k, 2] * s
    lam = -(r[0] * a[0] + r[1] * a[1] + r[2] * a[2]
            + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) / (L * L)
    return a + lam * r


@njit(cache=True)
def pendulum_advance(r, v, L, damping, t0, dt, n_steps, exc_const, gust_amp, gust_omega, gust_phase):
    """RK4 over n_steps; the state is re-projected onto the cord sphere after each step."""
    r = r.copy()
    v = v.copy()
    t = t0
    for i in range(n_steps):
        a1 = _pendulum_accel(r, v, L, damping, t, exc_const, gust_amp, gust_omega, gust_phase)
        r2 = r + 0.5 * dt * v
        v2 = v + 0.5 * dt * a1
        a2 = _pendulum_accel(r2, v2, L, damping, t + 0.5 * dt, exc_const, gust_amp, gust_omega, gust_phase)
        r3 = r + 0.5 * dt * v2
        v3 = v + 0.5 * dt * a2
        a3 = _pendulum_accel(r3, v3, L, damping, t + 0.5 * dt, exc_const, gust_amp, gust_omega, gust_phase)
        r4 = r + dt * v3
        v4 = v + dt * a3
        a4 = _pendulum_accel(r4, v4, L, damping, t + dt, exc_const, gust_amp, gust_omega, gust_phase)
        r = r + (dt / 6.0) * (v + 2.0 * v2 + 2.0 * v3 + v4)
        v = v + (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        nr = math.sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2])
        r = r * (L / nr)
        radial = (v[0] * r[0] + v[1] * r[1] + v[2] * r[2]) / (L * L)
        v = v - radial * r
        t = t0 + (i + 1) * dt
    return r, v



@njit(cache=True)
def _constraint_derivs(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q, goal, h2):
    """e = fk_pos(q) - goal, position Jacobian J and the Hessian of c(q) = |e|^2."""
    n = q.shape[0]
    e = fk_pos(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, q) - goal
    J = np.empty((3, n))
    qa = q.copy()
    for a in range(n):
        qa[a] = q[a] + h2
        fp = fk_pos(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, qa)
        qa[a] = q[a] - h2
        fm = fk_pos(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, qa)
        qa[a] = q[a]
        J[:, a] = (fp - fm) / (2.0 * h2)
    H = 2.0 * (J.T @ J)
    f0 = e + goal
    for a in range(n):
        for b in range(a, n):
            if a == b:
                qa[a] = q[a] + h2
                fp = fk_pos(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, qa)
                qa[a] = q[a] - h2
                fm = fk_pos(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, qa)
                qa[a] = q[a]
                d2 = (fp - 2.0 * f0 + fm) / (h2 * h2)
            else:
                qa[a] = q[a] + h2
                qa[b] = q[b] + h2
                fpp = fk_pos(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, qa)
                qa[b] = q[b] - h2
                fpm = fk_pos(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, qa)
                qa[a] = q[a] - h2
                fmm = fk_pos(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, qa)
                qa[b] = q[b] + h2
                fmp = fk_pos(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, qa)
                qa[a] = q[a]
                qa[b] = q[b]
                d2 = (fpp - fpm - fmp + fmm) / (4.0 * h2 * h2)
            s = 2.0 * np.dot(e, d2)
            H[a, b] += s
            if a != b:
                H[b, a] += s
    return e, J, H


@njit(cache=True)
def min_displacement_newton(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, lo, hi,
                            q_start, q0, goal, tol, max_outer, h):
    """Minimize |q - q0|^2 on {q : |fk(q) - goal| <= tol} by Newton steps on the KKT system.

    The constraint is treated as active (the caller handles feasible q0).
    Newton steps use the exact Lagrangian Hessian (finite-difference
    curvature of the constraint); each trial is re-projected onto the goal
    ball and kept only if it lowers the cost, with a tangent-plane gradient
    step as fallback. Joints resting on a limit are frozen for the step.
    Returns (q, ok).
    """
    n = q_start.shape[0]
    q, ok = project_ball(base_R, base_p, off_R, off_p, axes, tool_R, tool_p, lo, hi,
                         q_start, goal, tol, 0.999, 100, 1e-4, 0.2, h)
    if not ok:
        return q, False
    diff = q - q0
    cost = np.dot(diff, diff)
    r2 = (0.999 * tol) ** 2
    for it in range(max_outer):
        e, J, Hc = _constraint_derivs(base_R, base_p, off_R, off_p, axes, tool_R, tool_p,
                                      q, goal, 1e-4)
        gc = 2.0 * (J.T @ e)
        c = np.dot(e, e) - r2
        free = np.ones(n, np.bool_)
        for j in range(n):
            if (q[j] <= lo[j] and q0[j] < q[j]) or (q[j] >= hi[j] and q0[j] > q[j]):
                free[j] = False
        gg = 0.0
        for j in range(n):
            if free[j]:
                gg += gc[j] * gc[j]
        mu = 0.0
        if gg > 1e-18:
            for j in range(n):
                if free[j]:
                    mu -= gc[j] * (q[j] - q0[j])
            mu /= gg
        mu = max(mu, 0.0)
        # KKT system restricted to free joints
        m = 0
        for j in range(n):
            if free[j]:
                m += 1
        K = np.zeros((m + 1, m + 1))
        rhs = np.zeros(m + 1)
        ia = 0
        for a in range(n):
            if not free[a]:
                continue
            ib = 0
            for b in range(n):
                if not free[b]:
                    continue
                K[ia, ib] = mu * Hc[a, b] + (1.0 if a == b else 0.0)
                ib += 1
            K[ia, m] = gc[a]
            K[m, ia] = gc[a]
            rhs[ia] = -((q[a] - q0[a]) + mu * gc[a])
            ia += 1
        rhs[m] = -c
        stat = 0.0
        for a in range(m):
            stat += rhs[a] * rhs[a]
        if math.sqrt(stat) < 1e-10 * (1.0 + math.sqrt(cost)):
            break
        dq = np.zeros(n)
        newton_ok = True
        if gg > 1e-18:
            sol = np.linalg.solve(K, rhs)
            ia = 0
            for a in range(n):
                if free[a]:
                    dq[a] = sol[ia]
                    ia += 1
        else:
            newton_ok = False
        improved = False
        for attempt in range(2):
            if attempt == 1 or not newton_ok:
                d = q0 - q
                for j in range(n):
                    if not free[j]:
                        d[j] = 0.0
                if gg > 1e-18:
                    dg = 0.0
                    for j in range(n):
                        if free[j]:
                            dg += d[j] * gc[j]
                    if dg > 0:
                        for j in range(n):
                            if free[j]:
                                d[j] -= dg / gg * gc[j]
                dq = d
            alpha = 1.0
            while alpha > 1e-3:
                trial = clip(q + clamp_step(alpha * dq, 0.5), lo, hi)
                trial, okp = project_ball(base_R, base_p, off_R, off_p, axes, tool_R, tool_p,
                                          lo, hi, trial, goal, tol, 0.999, 30, 1e-4, 0.2, h)
                if okp:
                    dd = trial - q0
                    ct = np.dot(dd, dd)
                    if ct < cost - 1e-15:
                        gain = cost - ct
                        q = trial
                        cost = ct
                        improved = True
                        break
                alpha *= 0.5
            if improved:
                break
        if not improved or gain < 1e-13 * (1.0 + cost):
            break
    return q, True
