"""Hot numeric kernels.

Everything here is written in a scalar/loop style that numba compiles well.
With ``OVERACT_DISABLE_JIT=1`` the very same functions run as plain Python
on numpy arrays, which is the reference path used by the benchmark.

Tire parameters are passed as a packed array ``tp = [r_dyn, B, C, D, mu,
eps_v]`` and per-tire normal loads ``fz`` (length 4).
"""
import math

import numpy as np

from ._jit import njit

# ---------------------------------------------------------------------------
# tire model
# ---------------------------------------------------------------------------


@njit
def tire_force(omega, delta, vx, vy, fz, tp):
    """Combined-slip simplified Magic Formula, body-frame force of one tire."""
    r_dyn, b, c, d, mu, eps_v = tp[0], tp[1], tp[2], tp[3], tp[4], tp[5]
    cd = math.cos(delta)
    sd = math.sin(delta)
    vtx = cd * vx + sd * vy
    vty = -sd * vx + cd * vy
    wr = omega * r_dyn
    den = max(abs(wr), abs(vtx), eps_v)
    sx = (wr - vtx) / den
    sy = -vty / den
    slip = math.sqrt(sx * sx + sy * sy)
    if slip == 0.0:
        return 0.0, 0.0
    mag = mu * fz * d * math.sin(c * math.atan(b * slip))
    ftx = mag * sx / slip
    fty = mag * sy / slip
    return cd * ftx - sd * fty, sd * ftx + cd * fty


@njit
def tire_peak_ratio(c):
    # largest value of sin(C * atan(B s)) over s >= 0
    if c >= 1.0:
        return 1.0
    return math.sin(c * math.pi / 2.0)


@njit
def _slip_consistent(wx, wy, vx, vy, d, eps_v, tol):
    wn = math.sqrt(wx * wx + wy * wy)
    if wn > 0.0:
        proj = abs((wx * vx + wy * vy) / wn)
    else:
        proj = 0.0
    den = max(wn, proj, eps_v)
    return abs(den - d) <= tol * max(1.0, d)


@njit
def tire_force_inverse(fx, fy, vx, vy, fz, tp, eps_inv, delta_hint, delta_max):
    """Steering angle and wheel speed that make one tire produce (fx, fy).

    Returns ``(delta, omega, flags)``; bit 0 of ``flags`` marks force
    clipping, bit 1 marks that no consistent slip branch was found or the
    steering limit was hit.
    """
    r_dyn, b, c, d, mu, eps_v = tp[0], tp[1], tp[2], tp[3], tp[4], tp[5]
    flags = 0
    fmax = mu * fz * d
    fmag = math.sqrt(fx * fx + fy * fy)
    ratio = fmag / fmax
    rmax = (1.0 - eps_inv) * tire_peak_ratio(c)
    if ratio > rmax:
        ratio = rmax
        flags |= 1
    if fmag > 0.0:
        fhx = fx / fmag
        fhy = fy / fmag
        slip = math.tan(math.asin(ratio) / c) / b
    else:
        fhx = 0.0
        fhy = 0.0
        slip = 0.0

    # The body-frame slip vector is (w - v) / den with w = omega r_dyn e_delta,
    # so w = v + den * slip * fhat; den is fixed by one of three branches.
    vv = vx * vx + vy * vy
    vn = math.sqrt(vv)
    cpar = fhx * vx + fhy * vy
    found = False
    wx = vx
    wy = vy
    # branch A: den = |omega r_dyn| (driving / cornering)
    a2 = 1.0 - slip * slip
    if a2 > 0.0:
        rho = (slip * cpar + math.sqrt(slip * slip * cpar * cpar + a2 * vv)) / a2
        if rho >= eps_v:
            tx = vx + rho * slip * fhx
            ty = vy + rho * slip * fhy
            if _slip_consistent(tx, ty, vx, vy, rho, eps_v, 1e-9):
                wx, wy, found = tx, ty, True
    # branch B: den = |e_delta . v| (braking), root of a quartic in (0, |v|]
    if not found and vn >= eps_v:
        s2 = slip * slip
        lo = 0.0
        hi = vn
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            p = (s2 * mid ** 4 + 2.0 * slip * cpar * mid ** 3
                 + (vv - s2 * cpar * cpar) * mid ** 2
                 - 2.0 * vv * slip * cpar * mid - vv * vv)
            if p < 0.0:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * vn:
                break
        dd = 0.5 * (lo + hi)
        if dd >= eps_v:
            tx = vx + dd * slip * fhx
            ty = vy + dd * slip * fhy
            if _slip_consistent(tx, ty, vx, vy, dd, eps_v, 1e-8):
                wx, wy, found = tx, ty, True
    # branch C: den = eps_v (near standstill)
    if not found:
        tx = vx + eps_v * slip * fhx
        ty = vy + eps_v * slip * fhy
        if _slip_consistent(tx, ty, vx, vy, eps_v, eps_v, 1e-9):
            wx, wy, found = tx, ty, True
    if not found:
        flags |= 2

    wn = math.sqrt(wx * wx + wy * wy)
    if wn < 1e-12:
        delta = delta_hint
        if delta > delta_max:
            delta = delta_max
        elif delta < -delta_max:
            delta = -delta_max
        return delta, 0.0, flags
    base = math.atan2(wy, wx)
    best = 0.0
    best_omega = 0.0
    best_cost = 1e300
    have = False
    for k in range(-1, 2):
        cand = base + k * math.pi
        if cand <= -math.pi or cand > math.pi:
            continue
        if abs(cand) > delta_max + 1e-12:
            continue
        cost = abs(cand - delta_hint)
        if cost < best_cost:
            best_cost = cost
            best = cand
            best_omega = wn / r_dyn if k == 0 else -wn / r_dyn
            have = True
    if not have:
        # steering limit: keep the admissible representation closest to w
        flags |= 2
        cand = base
        if cand > math.pi / 2.0:
            cand -= math.pi
        elif cand <= -math.pi / 2.0:
            cand += math.pi
        if cand > delta_max:
            cand = delta_max
        elif cand < -delta_max:
            cand = -delta_max
        best = cand
        best_omega = (wx * math.cos(cand) + wy * math.sin(cand)) / r_dyn
    return best, best_omega, flags


@njit
def tire_forces(deltas, omegas, vxy, fz, tp):
    out = np.empty(8)
    for i in range(4):
        fx, fy = tire_force(omegas[i], deltas[i], vxy[2 * i], vxy[2 * i + 1], fz[i], tp)
        out[2 * i] = fx
        out[2 * i + 1] = fy
    return out


@njit
def tire_setpoints(fxy, vxy, fz, tp, eps_inv, delta_hint, delta_max):
    deltas = np.empty(4)
    omegas = np.empty(4)
    flags = np.empty(4, dtype=np.int64)
    for i in range(4):
        d, w, f = tire_force_inverse(fxy[2 * i], fxy[2 * i + 1], vxy[2 * i], vxy[2 * i + 1],
                                     fz[i], tp, eps_inv, delta_hint[i], delta_max)
        deltas[i] = d
        omegas[i] = w
        flags[i] = f
    return deltas, omegas, flags


# ---------------------------------------------------------------------------
# plant: planar rigid body driven by four tires
# ---------------------------------------------------------------------------


@njit
def body_accel(vx, vy, yr, deltas, omegas, G, m, jz, fz, tp):
    fxs = 0.0
    fys = 0.0
    mzs = 0.0
    for i in range(4):
        cx = 2 * i
        cy = 2 * i + 1
        vix = G[0, cx] * vx + G[1, cx] * vy + G[2, cx] * yr
        viy = G[0, cy] * vx + G[1, cy] * vy + G[2, cy] * yr
        fx, fy = tire_force(omegas[i], deltas[i], vix, viy, fz[i], tp)
        fxs += G[0, cx] * fx + G[0, cy] * fy
        fys += G[1, cx] * fx + G[1, cy] * fy
        mzs += G[2, cx] * fx + G[2, cy] * fy
    return fxs / m, fys / m, mzs / jz


@njit
def plant_rhs(state, deltas, omegas, G, m, jz, fz, tp):
    psi = state[2]
    vx = state[3]
    vy = state[4]
    yr = state[5]
    ax, ay, al = body_accel(vx, vy, yr, deltas, omegas, G, m, jz, fz, tp)
    cp = math.cos(psi)
    sp = math.sin(psi)
    out = np.empty(6)
    out[0] = cp * vx - sp * vy
    out[1] = sp * vx + cp * vy
    out[2] = yr
    out[3] = vy * yr + ax
    out[4] = -vx * yr + ay
    out[5] = al
    return out


@njit
def plant_rk4(state, deltas, omegas, G, m, jz, fz, tp, dt):
    k1 = plant_rhs(state, deltas, omegas, G, m, jz, fz, tp)
    k2 = plant_rhs(state + 0.5 * dt * k1, deltas, omegas, G, m, jz, fz, tp)
    k3 = plant_rhs(state + 0.5 * dt * k2, deltas, omegas, G, m, jz, fz, tp)
    k4 = plant_rhs(state + dt * k3, deltas, omegas, G, m, jz, fz, tp)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit
def step_setpoints(v0, a_dd, G, G_plus, f_null, m, jz, fz, tp, eps_inv, delta_hint, delta_max, dt, iters, tol):
    """Tire setpoints held over one plant step that realize the body acceleration a_dd.

    The wrench m*a_dd is allocated and inverted through the tire model at the
    predicted mid-step velocity, then corrected by simulating the step: the
    tire forces are stiff at low speed, so the mid-step guess alone can be far
    off.  Returns (deltas, omegas, flags, wrench_acceleration, residual).
    """
    state = np.zeros(6)
    state[3] = v0[0]
    state[4] = v0[1]
    state[5] = v0[2]
    adj = a_dd.copy()
    fd = np.empty(3)
    vmid = np.empty(3)
    target = np.empty(3)
    # desired mean derivative over the step, with the Coriolis terms at mid-step
    vmid[:] = v0
    for _ in range(2):
        target[0] = vmid[1] * vmid[2] + a_dd[0]
        target[1] = -vmid[0] * vmid[2] + a_dd[1]
        target[2] = a_dd[2]
        vmid[:] = v0 + 0.5 * dt * target
    deltas = np.zeros(4)
    omegas = np.zeros(4)
    flags = np.zeros(4, dtype=np.int64)
    hint = delta_hint.copy()
    vxy = G.T @ vmid
    res = 0.0
    used = adj.copy()
    prev_adj = np.empty(3)
    prev_ach = np.empty(3)
    ach = np.empty(3)
    gain = np.ones(3)
    for it in range(max(iters, 1)):
        used[:] = adj
        fd[0] = m * adj[0]
        fd[1] = m * adj[1]
        fd[2] = jz * adj[2]
        fxy = G_plus @ fd + f_null
        deltas, omegas, flags = tire_setpoints(fxy, vxy, fz, tp, eps_inv, hint, delta_max)
        if iters <= 1:
            break
        nxt = plant_rk4(state, deltas, omegas, G, m, jz, fz, tp, dt)
        res = 0.0
        for i in range(3):
            ach[i] = (nxt[3 + i] - v0[i]) / dt
            res = max(res, abs(target[i] - ach[i]))
        if res <= tol:
            break
        # per-axis secant estimate of how strongly the step responds
        if it > 0:
            for i in range(3):
                da = adj[i] - prev_adj[i]
                if abs(da) > 1e-12:
                    gain[i] = min(max((ach[i] - prev_ach[i]) / da, 0.05), 2.0)
        prev_adj[:] = adj
        prev_ach[:] = ach
        for i in range(3):
            adj[i] += (target[i] - ach[i]) / gain[i]
        hint[:] = deltas
    return deltas, omegas, flags, used, res


@njit
def pose_rk4(pose, vx, vy, yr, dt):
    """Integrate the pose kinematics for a constant body velocity over dt."""
    out = pose.copy()
    k = np.empty((4, 3))
    p = pose.copy()
    for j in range(4):
        if j == 1 or j == 2:
            h = 0.5 * dt
        else:
            h = dt
        if j > 0:
            for i in range(3):
                p[i] = pose[i] + h * k[j - 1, i]
        cp = math.cos(p[2])
        sp = math.sin(p[2])
        k[j, 0] = cp * vx - sp * vy
        k[j, 1] = sp * vx + cp * vy
        k[j, 2] = yr
    for i in range(3):
        out[i] = pose[i] + dt / 6.0 * (k[0, i] + 2.0 * k[1, i] + 2.0 * k[2, i] + k[3, i])
    return out


# ---------------------------------------------------------------------------
# planning model: x = (x, y, psi, v_x, psi_dot), u = (a_x, psi_ddot)
# ---------------------------------------------------------------------------


@njit
def _plan_f(x, u, f, jx, ju):
    cp = math.cos(x[2])
    sp = math.sin(x[2])
    v = x[3]
    f[0] = v * cp
    f[1] = v * sp
    f[2] = x[4]
    f[3] = u[0]
    f[4] = u[1]
    jx[:, :] = 0.0
    jx[0, 2] = -v * sp
    jx[0, 3] = cp
    jx[1, 2] = v * cp
    jx[1, 3] = sp
    jx[2, 4] = 1.0
    ju[:, :] = 0.0
    ju[3, 0] = 1.0
    ju[4, 1] = 1.0


@njit
def plan_rk4_jac(x, u, dt):
    """One RK4 step of the planning model and the exact Jacobians of that map."""
    nx = 5
    nu = 2
    ks = np.empty((4, nx))
    dkx = np.empty((4, nx, nx))
    dku = np.empty((4, nx, nu))
    jx = np.empty((nx, nx))
    ju = np.empty((nx, nu))
    xs = np.empty(nx)
    dxs = np.empty((nx, nx))
    dus = np.empty((nx, nu))
    f = np.empty(nx)
    hs = (0.0, 0.5 * dt, 0.5 * dt, dt)
    for j in range(4):
        h = hs[j]
        if j == 0:
            xs[:] = x
            dxs[:, :] = np.eye(nx)
            dus[:, :] = 0.0
        else:
            xs[:] = x + h * ks[j - 1]
            dxs[:, :] = np.eye(nx) + h * dkx[j - 1]
            dus[:, :] = h * dku[j - 1]
        _plan_f(xs, u, f, jx, ju)
        ks[j] = f
        dkx[j] = jx @ dxs
        dku[j] = jx @ dus + ju
    xn = x + dt / 6.0 * (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3])
    a = np.eye(nx) + dt / 6.0 * (dkx[0] + 2.0 * dkx[1] + 2.0 * dkx[2] + dkx[3])
    bm = dt / 6.0 * (dku[0] + 2.0 * dku[1] + 2.0 * dku[2] + dku[3])
    return xn, a, bm


@njit
def plan_linearize(x0, us, dt):
    """Roll the planning model out from x0 under us and linearize every step.

    Returns states (N, 5), A (N-1, 5, 5), B (N-1, 5, 2) and the affine
    offsets c with x[k+1] = A x[k] + B u[k] + c along the rollout.
    """
    n_u = us.shape[0]
    xs = np.empty((n_u + 1, 5))
    a_all = np.empty((n_u, 5, 5))
    b_all = np.empty((n_u, 5, 2))
    c_all = np.empty((n_u, 5))
    xs[0] = x0
    for k in range(n_u):
        xn, a, bm = plan_rk4_jac(xs[k], us[k], dt)
        xs[k + 1] = xn
        a_all[k] = a
        b_all[k] = bm
        c_all[k] = xn - a @ xs[k] - bm @ us[k]
    return xs, a_all, b_all, c_all


@njit
def plan_rollout(x0, us, dt, substeps):
    """Fine rollout of the planning model: us held over each dt, split in substeps."""
    n_u = us.shape[0]
    out = np.empty((n_u * substeps + 1, 5))
    out[0] = x0
    h = dt / substeps
    f = np.empty(5)
    jx = np.empty((5, 5))
    ju = np.empty((5, 2))
    x = x0.copy()
    idx = 0
    for k in range(n_u):
        u = us[k]
        for _ in range(substeps):
            _plan_f(x, u, f, jx, ju)
            k1 = f.copy()
            _plan_f(x + 0.5 * h * k1, u, f, jx, ju)
            k2 = f.copy()
            _plan_f(x + 0.5 * h * k2, u, f, jx, ju)
            k3 = f.copy()
            _plan_f(x + h * k3, u, f, jx, ju)
            k4 = f.copy()
            x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            idx += 1
            out[idx] = x
    return out


# ---------------------------------------------------------------------------
# tracking MPC model: x_c = (x_e, y_e, psi_e, v_ox, v_oy, psi_dot_o), u = a_o
# reference velocity (v_xr, v_yr, psi_dot_r) varies linearly across a step
# ---------------------------------------------------------------------------


@njit
def _mpc_f(x, u, vr, f, jx, ju):
    xe, ye, pe, vox, voy, ro = x[0], x[1], x[2], x[3], x[4], x[5]
    vxr, vyr, rr = vr[0], vr[1], vr[2]
    rd = rr + ro
    cpe = math.cos(pe)
    spe = math.sin(pe)
    f[0] = rd * ye - vox - vxr + vxr * cpe - vyr * spe
    f[1] = -rd * xe - vyr - voy + vxr * spe + vyr * cpe
    f[2] = -ro
    f[3] = u[0] + rd * (vyr + voy) - rr * vyr
    f[4] = u[1] - rd * (vxr + vox) + rr * vxr
    f[5] = u[2]
    jx[:, :] = 0.0
    jx[0, 1] = rd
    jx[0, 2] = -vxr * spe - vyr * cpe
    jx[0, 3] = -1.0
    jx[0, 5] = ye
    jx[1, 0] = -rd
    jx[1, 2] = vxr * cpe - vyr * spe
    jx[1, 4] = -1.0
    jx[1, 5] = -xe
    jx[2, 5] = -1.0
    jx[3, 4] = rd
    jx[3, 5] = vyr + voy
    jx[4, 3] = -rd
    jx[4, 5] = -(vxr + vox)
    ju[:, :] = 0.0
    ju[3, 0] = 1.0
    ju[4, 1] = 1.0
    ju[5, 2] = 1.0


@njit
def mpc_rhs(x, u, vr):
    f = np.empty(6)
    jx = np.empty((6, 6))
    ju = np.empty((6, 3))
    _mpc_f(x, u, vr, f, jx, ju)
    return f, jx, ju


@njit
def mpc_rk4_jac(x, u, vr0, vr1, dt):
    nx = 6
    nu = 3
    ks = np.empty((4, nx))
    dkx = np.empty((4, nx, nx))
    dku = np.empty((4, nx, nu))
    jx = np.empty((nx, nx))
    ju = np.empty((nx, nu))
    xs = np.empty(nx)
    dxs = np.empty((nx, nx))
    dus = np.empty((nx, nu))
    f = np.empty(nx)
    vr = np.empty(3)
    hs = (0.0, 0.5 * dt, 0.5 * dt, dt)
    ws = (0.0, 0.5, 0.5, 1.0)
    for j in range(4):
        h = hs[j]
        vr[:] = (1.0 - ws[j]) * vr0 + ws[j] * vr1
        if j == 0:
            xs[:] = x
            dxs[:, :] = np.eye(nx)
            dus[:, :] = 0.0
        else:
            xs[:] = x + h * ks[j - 1]
            dxs[:, :] = np.eye(nx) + h * dkx[j - 1]
            dus[:, :] = h * dku[j - 1]
        _mpc_f(xs, u, vr, f, jx, ju)
        ks[j] = f
        dkx[j] = jx @ dxs
        dku[j] = jx @ dus + ju
    xn = x + dt / 6.0 * (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3])
    a = np.eye(nx) + dt / 6.0 * (dkx[0] + 2.0 * dkx[1] + 2.0 * dkx[2] + dkx[3])
    bm = dt / 6.0 * (dku[0] + 2.0 * dku[1] + 2.0 * dku[2] + dku[3])
    return xn, a, bm


@njit
def mpc_linearize(x0, us, vrefs, dt):
    n_u = us.shape[0]
    xs = np.empty((n_u + 1, 6))
    a_all = np.empty((n_u, 6, 6))
    b_all = np.empty((n_u, 6, 3))
    c_all = np.empty((n_u, 6))
    xs[0] = x0
    for k in range(n_u):
        xn, a, bm = mpc_rk4_jac(xs[k], us[k], vrefs[k], vrefs[k + 1], dt)
        xs[k + 1] = xn
        a_all[k] = a
        b_all[k] = bm
        c_all[k] = xn - a @ xs[k] - bm @ us[k]
    return xs, a_all, b_all, c_all


# ---------------------------------------------------------------------------
# structured interior point for box-constrained linear-quadratic OCPs
#
#   min  sum_k 1/2 x_k'Q_k x_k + q_k'x_k + 1/2 u_k'R_k u_k + r_k'u_k
#   s.t. x_{k+1} = A_k x_k + B_k u_k + c_k,  x_0 given
#        xlb_k <= x_k <= xub_k (k >= 1),  ulb_k <= u_k <= uub_k
#
# Mehrotra predictor-corrector; each Newton system is solved by a Riccati
# recursion, the factorization is shared between predictor and corrector.
# ---------------------------------------------------------------------------


@njit
def _mm(a, b, out, at):
    """out = a @ b, or a.T @ b when at is set, without temporaries."""
    rows = a.shape[1] if at else a.shape[0]
    inner = a.shape[0] if at else a.shape[1]
    for i in range(rows):
        for j in range(b.shape[1]):
            t = 0.0
            for k in range(inner):
                t += (a[k, i] if at else a[i, k]) * b[k, j]
            out[i, j] = t


@njit
def _mv(a, x, out, at):
    """out = a @ x, or a.T @ x when at is set."""
    rows = a.shape[1] if at else a.shape[0]
    inner = a.shape[0] if at else a.shape[1]
    for i in range(rows):
        t = 0.0
        for k in range(inner):
            t += (a[k, i] if at else a[i, k]) * x[k]
        out[i] = t


@njit
def _chol_inplace(a, n):
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= a[j, k] * a[j, k]
        if s <= 0.0:
            return False
        a[j, j] = math.sqrt(s)
        for i in range(j + 1, n):
            t = a[i, j]
            for k in range(j):
                t -= a[i, k] * a[j, k]
            a[i, j] = t / a[j, j]
        for i in range(j):
            a[i, j] = 0.0
    return True


@njit
def _chol_solve_vec(lm, b, n):
    y = b.copy()
    for i in range(n):
        t = y[i]
        for k in range(i):
            t -= lm[i, k] * y[k]
        y[i] = t / lm[i, i]
    for i in range(n - 1, -1, -1):
        t = y[i]
        for k in range(i + 1, n):
            t -= lm[k, i] * y[k]
        y[i] = t / lm[i, i]
    return y


@njit
def _ocp_rollout(x0, us, a, bm, c):
    n = us.shape[0]
    xs = np.empty((n + 1, x0.shape[0]))
    xs[0] = x0
    tv = np.empty(x0.shape[0])
    for k in range(n):
        _mv(a[k], xs[k], xs[k + 1], False)
        _mv(bm[k], us[k], tv, False)
        xs[k + 1] += tv + c[k]
    return xs


@njit
def ocp_stationarity(xs, us, a, bm, Q, q, R, r, lxl, lxu, lul, luu):
    """Reduced gradient in u (Lagrangian stationarity after eliminating x)."""
    n = us.shape[0]
    nx = xs.shape[1]
    nu = us.shape[1]
    eta = np.zeros(nx)
    gx = np.empty(nx)
    tv = np.empty(nx)
    tu = np.empty(nu)
    tu2 = np.empty(nu)
    grad = np.empty(us.shape)
    for k in range(n, 0, -1):
        _mv(Q[k], xs[k], gx, False)
        if k < n:
            _mv(a[k], eta, tv, True)
        else:
            tv[:] = 0.0
        for i in range(nx):
            eta[i] = gx[i] + q[k, i] - lxl[k, i] + lxu[k, i] + tv[i]
        km = k - 1
        _mv(R[km], us[km], tu, False)
        _mv(bm[km], eta, tu2, True)
        for i in range(nu):
            grad[km, i] = tu[i] + r[km, i] - lul[km, i] + luu[km, i] + tu2[i]
    return grad


@njit
def ocp_ipm(a, bm, c, Q, q, R, r, xlb, xub, ulb, uub, x0, u_init, tol, max_iter):
    """Returns (u, x, lxl, lxu, lul, luu, status, iterations, merit_history).

    status: 0 optimal, 1 iteration/deadline limit, 2 infeasible.
    """
    n = u_init.shape[0]
    nx = x0.shape[0]
    nu = u_init.shape[1]
    big = 1e19

    mxl = np.zeros((n + 1, nx))
    mxu = np.zeros((n + 1, nx))
    mul = np.zeros((n, nu))
    muu = np.zeros((n, nu))
    m_tot = 0
    for k in range(1, n + 1):
        for i in range(nx):
            if xlb[k, i] > -big:
                mxl[k, i] = 1.0
                m_tot += 1
            if xub[k, i] < big:
                mxu[k, i] = 1.0
                m_tot += 1
    for k in range(n):
        for i in range(nu):
            if ulb[k, i] > -big:
                mul[k, i] = 1.0
                m_tot += 1
            if uub[k, i] < big:
                muu[k, i] = 1.0
                m_tot += 1

    us = u_init.copy()
    for k in range(n):
        for i in range(nu):
            lo = ulb[k, i]
            hi = uub[k, i]
            if mul[k, i] > 0.0 and muu[k, i] > 0.0:
                marg = min(1e-2, 0.25 * (hi - lo))
                us[k, i] = min(max(us[k, i], lo + marg), hi - marg)
            elif mul[k, i] > 0.0:
                us[k, i] = max(us[k, i], lo + 1e-2)
            elif muu[k, i] > 0.0:
                us[k, i] = min(us[k, i], hi - 1e-2)
    xs = _ocp_rollout(x0, us, a, bm, c)

    s_floor = 1e-2
    sxl = np.ones((n + 1, nx))
    sxu = np.ones((n + 1, nx))
    sul = np.ones((n, nu))
    suu = np.ones((n, nu))
    lxl = np.zeros((n + 1, nx))
    lxu = np.zeros((n + 1, nx))
    lul = np.zeros((n, nu))
    luu = np.zeros((n, nu))
    mu0 = 1e-1
    for k in range(1, n + 1):
        for i in range(nx):
            if mxl[k, i] > 0.0:
                sxl[k, i] = max(xs[k, i] - xlb[k, i], s_floor)
                lxl[k, i] = mu0 / sxl[k, i]
            if mxu[k, i] > 0.0:
                sxu[k, i] = max(xub[k, i] - xs[k, i], s_floor)
                lxu[k, i] = mu0 / sxu[k, i]
    for k in range(n):
        for i in range(nu):
            if mul[k, i] > 0.0:
                sul[k, i] = max(us[k, i] - ulb[k, i], s_floor)
                lul[k, i] = mu0 / sul[k, i]
            if muu[k, i] > 0.0:
                suu[k, i] = max(uub[k, i] - us[k, i], s_floor)
                luu[k, i] = mu0 / suu[k, i]

    # per-stage factorization storage
    lmats = np.zeros((n, nu, nu))
    kmats = np.zeros((n, nu, nx))
    hux = np.zeros((nu, nx))
    huu = np.zeros((nu, nu))
    p_mat = np.zeros((nx, nx))
    p_new = np.zeros((nx, nx))
    pa = np.zeros((nx, nx))
    pb = np.zeros((nx, nu))
    hk = np.zeros((nx, nx))
    hcol = np.zeros(nu)
    tv = np.zeros(nx)
    tu = np.zeros(nu)
    # work arrays
    rpxl = np.zeros((n + 1, nx))
    rpxu = np.zeros((n + 1, nx))
    rpul = np.zeros((n, nu))
    rpuu = np.zeros((n, nu))
    rcxl = np.zeros((n + 1, nx))
    rcxu = np.zeros((n + 1, nx))
    rcul = np.zeros((n, nu))
    rcuu = np.zeros((n, nu))
    dx = np.zeros((n + 1, nx))
    du = np.zeros((n, nu))
    dsxl = np.zeros((n + 1, nx))
    dsxu = np.zeros((n + 1, nx))
    dsul = np.zeros((n, nu))
    dsuu = np.zeros((n, nu))
    dlxl = np.zeros((n + 1, nx))
    dlxu = np.zeros((n + 1, nx))
    dlul = np.zeros((n, nu))
    dluu = np.zeros((n, nu))
    gxh = np.zeros((n + 1, nx))
    guh = np.zeros((n, nu))
    kvec = np.zeros((n, nu))

    merit_hist = np.zeros(max_iter + 1)
    status = 1
    it = 0
    stall = 0
    prev_rp = 1e300
    prev_lmax = 0.0
    while True:
        # residuals
        rp_max = 0.0
        comp_sum = 0.0
        comp_max = 0.0
        lmax = 0.0
        for k in range(1, n + 1):
            for i in range(nx):
                if mxl[k, i] > 0.0:
                    rpxl[k, i] = xlb[k, i] - xs[k, i] + sxl[k, i]
                    rp_max = max(rp_max, abs(rpxl[k, i]))
                    cpl = sxl[k, i] * lxl[k, i]
                    comp_sum += cpl
                    comp_max = max(comp_max, cpl)
                    lmax = max(lmax, lxl[k, i])
                if mxu[k, i] > 0.0:
                    rpxu[k, i] = xs[k, i] - xub[k, i] + sxu[k, i]
                    rp_max = max(rp_max, abs(rpxu[k, i]))
                    cpl = sxu[k, i] * lxu[k, i]
                    comp_sum += cpl
                    comp_max = max(comp_max, cpl)
                    lmax = max(lmax, lxu[k, i])
        for k in range(n):
            for i in range(nu):
                if mul[k, i] > 0.0:
                    rpul[k, i] = ulb[k, i] - us[k, i] + sul[k, i]
                    rp_max = max(rp_max, abs(rpul[k, i]))
                    cpl = sul[k, i] * lul[k, i]
                    comp_sum += cpl
                    comp_max = max(comp_max, cpl)
                    lmax = max(lmax, lul[k, i])
                if muu[k, i] > 0.0:
                    rpuu[k, i] = us[k, i] - uub[k, i] + suu[k, i]
                    rp_max = max(rp_max, abs(rpuu[k, i]))
                    cpl = suu[k, i] * luu[k, i]
                    comp_sum += cpl
                    comp_max = max(comp_max, cpl)
                    lmax = max(lmax, luu[k, i])
        grad = ocp_stationarity(xs, us, a, bm, Q, q, R, r, lxl, lxu, lul, luu)
        rd_max = 0.0
        for k in range(n):
            for i in range(nu):
                rd_max = max(rd_max, abs(grad[k, i]))
        mu = comp_sum / m_tot if m_tot > 0 else 0.0
        merit_hist[it] = max(rp_max, rd_max)
        if rp_max <= tol and rd_max <= tol and comp_max <= tol:
            status = 0
            break
        if it >= max_iter:
            status = 1
            break
        if rp_max > 1e-4 and rp_max >= 0.999 * prev_rp and lmax > prev_lmax:
            stall += 1
        else:
            stall = 0
        if stall >= 10:
            status = 2
            break
        prev_rp = rp_max
        prev_lmax = lmax

        # factorization of the barrier-augmented LQ problem
        p_mat[:, :] = Q[n]
        for i in range(nx):
            p_mat[i, i] += mxl[n, i] * lxl[n, i] / sxl[n, i] + mxu[n, i] * lxu[n, i] / sxu[n, i]
        fact_ok = True
        for k in range(n - 1, -1, -1):
            _mm(p_mat, bm[k], pb, False)
            _mm(p_mat, a[k], pa, False)
            _mm(bm[k], pb, huu, True)
            _mm(bm[k], pa, hux, True)
            for i in range(nu):
                for j in range(nu):
                    huu[i, j] += R[k, i, j]
                huu[i, i] += mul[k, i] * lul[k, i] / sul[k, i] + muu[k, i] * luu[k, i] / suu[k, i]
            if not _chol_inplace(huu, nu):
                fact_ok = False
                break
            lmats[k] = huu
            for j in range(nx):
                for i in range(nu):
                    hcol[i] = hux[i, j]
                col = _chol_solve_vec(huu, hcol, nu)
                for i in range(nu):
                    kmats[k, i, j] = -col[i]
            if k >= 1:
                _mm(a[k], pa, p_new, True)
                _mm(hux, kmats[k], hk, True)
                for i in range(nx):
                    for j in range(nx):
                        p_new[i, j] += Q[k, i, j] + hk[i, j]
                    p_new[i, i] += mxl[k, i] * lxl[k, i] / sxl[k, i] + mxu[k, i] * lxu[k, i] / sxu[k, i]
                for i in range(nx):
                    for j in range(nx):
                        p_mat[i, j] = 0.5 * (p_new[i, j] + p_new[j, i])
        if not fact_ok:
            status = 2
            break

        for phase in range(2):
            if phase == 0:
                for k in range(1, n + 1):
                    for i in range(nx):
                        rcxl[k, i] = sxl[k, i] * lxl[k, i] * mxl[k, i]
                        rcxu[k, i] = sxu[k, i] * lxu[k, i] * mxu[k, i]
                for k in range(n):
                    for i in range(nu):
                        rcul[k, i] = sul[k, i] * lul[k, i] * mul[k, i]
                        rcuu[k, i] = suu[k, i] * luu[k, i] * muu[k, i]
            # linear terms of the Newton LQ problem
            for k in range(1, n + 1):
                _mv(Q[k], xs[k], tv, False)
                for i in range(nx):
                    v = tv[i] + q[k, i]
                    if mxl[k, i] > 0.0:
                        v += -lxl[k, i] + (rcxl[k, i] - lxl[k, i] * rpxl[k, i]) / sxl[k, i]
                    if mxu[k, i] > 0.0:
                        v += lxu[k, i] - (rcxu[k, i] - lxu[k, i] * rpxu[k, i]) / sxu[k, i]
                    gxh[k, i] = v
            for k in range(n):
                _mv(R[k], us[k], tu, False)
                for i in range(nu):
                    v = tu[i] + r[k, i]
                    if mul[k, i] > 0.0:
                        v += -lul[k, i] + (rcul[k, i] - lul[k, i] * rpul[k, i]) / sul[k, i]
                    if muu[k, i] > 0.0:
                        v += luu[k, i] - (rcuu[k, i] - luu[k, i] * rpuu[k, i]) / suu[k, i]
                    guh[k, i] = v
            p_vec = gxh[n].copy()
            for k in range(n - 1, -1, -1):
                _mv(bm[k], p_vec, tu, True)
                for i in range(nu):
                    hcol[i] = guh[k, i] + tu[i]
                kk = _chol_solve_vec(lmats[k], hcol, nu)
                for i in range(nu):
                    kvec[k, i] = -kk[i]
                if k >= 1:
                    _mv(a[k], p_vec, tv, True)
                    _mv(kmats[k], hcol, p_vec, True)
                    for i in range(nx):
                        p_vec[i] += gxh[k, i] + tv[i]
            dx[0, :] = 0.0
            for k in range(n):
                _mv(kmats[k], dx[k], tu, False)
                for i in range(nu):
                    du[k, i] = tu[i] + kvec[k, i]
                _mv(a[k], dx[k], tv, False)
                _mv(bm[k], du[k], dx[k + 1], False)
                for i in range(nx):
                    dx[k + 1, i] += tv[i]
            # slack and multiplier directions
            for k in range(1, n + 1):
                for i in range(nx):
                    if mxl[k, i] > 0.0:
                        dsxl[k, i] = -rpxl[k, i] + dx[k, i]
                        dlxl[k, i] = (-rcxl[k, i] + lxl[k, i] * rpxl[k, i] - lxl[k, i] * dx[k, i]) / sxl[k, i]
                    if mxu[k, i] > 0.0:
                        dsxu[k, i] = -rpxu[k, i] - dx[k, i]
                        dlxu[k, i] = (-rcxu[k, i] + lxu[k, i] * rpxu[k, i] + lxu[k, i] * dx[k, i]) / sxu[k, i]
            for k in range(n):
                for i in range(nu):
                    if mul[k, i] > 0.0:
                        dsul[k, i] = -rpul[k, i] + du[k, i]
                        dlul[k, i] = (-rcul[k, i] + lul[k, i] * rpul[k, i] - lul[k, i] * du[k, i]) / sul[k, i]
                    if muu[k, i] > 0.0:
                        dsuu[k, i] = -rpuu[k, i] - du[k, i]
                        dluu[k, i] = (-rcuu[k, i] + luu[k, i] * rpuu[k, i] + luu[k, i] * du[k, i]) / suu[k, i]
            # step to the boundary
            amax = 1.0
            for k in range(1, n + 1):
                for i in range(nx):
                    if mxl[k, i] > 0.0:
                        if dsxl[k, i] < 0.0:
                            amax = min(amax, -sxl[k, i] / dsxl[k, i])
                        if dlxl[k, i] < 0.0:
                            amax = min(amax, -lxl[k, i] / dlxl[k, i])
                    if mxu[k, i] > 0.0:
                        if dsxu[k, i] < 0.0:
                            amax = min(amax, -sxu[k, i] / dsxu[k, i])
                        if dlxu[k, i] < 0.0:
                            amax = min(amax, -lxu[k, i] / dlxu[k, i])
            for k in range(n):
                for i in range(nu):
                    if mul[k, i] > 0.0:
                        if dsul[k, i] < 0.0:
                            amax = min(amax, -sul[k, i] / dsul[k, i])
                        if dlul[k, i] < 0.0:
                            amax = min(amax, -lul[k, i] / dlul[k, i])
                    if muu[k, i] > 0.0:
                        if dsuu[k, i] < 0.0:
                            amax = min(amax, -suu[k, i] / dsuu[k, i])
                        if dluu[k, i] < 0.0:
                            amax = min(amax, -luu[k, i] / dluu[k, i])
            if phase == 0:
                if m_tot == 0:
                    break
                mu_aff = 0.0
                for k in range(1, n + 1):
                    for i in range(nx):
                        if mxl[k, i] > 0.0:
                            mu_aff += (sxl[k, i] + amax * dsxl[k, i]) * (lxl[k, i] + amax * dlxl[k, i])
                        if mxu[k, i] > 0.0:
                            mu_aff += (sxu[k, i] + amax * dsxu[k, i]) * (lxu[k, i] + amax * dlxu[k, i])
                for k in range(n):
                    for i in range(nu):
                        if mul[k, i] > 0.0:
                            mu_aff += (sul[k, i] + amax * dsul[k, i]) * (lul[k, i] + amax * dlul[k, i])
                        if muu[k, i] > 0.0:
                            mu_aff += (suu[k, i] + amax * dsuu[k, i]) * (luu[k, i] + amax * dluu[k, i])
                mu_aff /= m_tot
                sigma = (mu_aff / mu) ** 3 if mu > 0.0 else 0.0
                for k in range(1, n + 1):
                    for i in range(nx):
                        if mxl[k, i] > 0.0:
                            rcxl[k, i] += dsxl[k, i] * dlxl[k, i] - sigma * mu
                        if mxu[k, i] > 0.0:
                            rcxu[k, i] += dsxu[k, i] * dlxu[k, i] - sigma * mu
                for k in range(n):
                    for i in range(nu):
                        if mul[k, i] > 0.0:
                            rcul[k, i] += dsul[k, i] * dlul[k, i] - sigma * mu
                        if muu[k, i] > 0.0:
                            rcuu[k, i] += dsuu[k, i] * dluu[k, i] - sigma * mu
        alpha = 1.0 if m_tot == 0 else min(1.0, 0.995 * amax)
        for k in range(n):
            for i in range(nu):
                us[k, i] += alpha * du[k, i]
                sul[k, i] += alpha * dsul[k, i] * mul[k, i]
                suu[k, i] += alpha * dsuu[k, i] * muu[k, i]
                lul[k, i] += alpha * dlul[k, i] * mul[k, i]
                luu[k, i] += alpha * dluu[k, i] * muu[k, i]
        for k in range(1, n + 1):
            for i in range(nx):
                xs[k, i] += alpha * dx[k, i]
                sxl[k, i] += alpha * dsxl[k, i] * mxl[k, i]
                sxu[k, i] += alpha * dsxu[k, i] * mxu[k, i]
                lxl[k, i] += alpha * dlxl[k, i] * mxl[k, i]
                lxu[k, i] += alpha * dlxu[k, i] * mxu[k, i]
        it += 1
    return us, xs, lxl, lxu, lul, luu, status, it, merit_hist[: it + 1]
