"""Convex QP solving with KKT certificates.

Two solvers share the same primal-dual interior-point scheme (Mehrotra
predictor-corrector):

* :func:`solve` handles a general dense :class:`QpProblem`
  ``min 1/2 z'Hz + g'z  s.t.  A_eq z = b_eq,  A_in z <= b_in``.
* :func:`solve_ocp` handles box-constrained linear-quadratic optimal control
  problems.  The dynamics stay eliminated (every iterate is an exact rollout)
  and the Newton systems are solved stage-wise by a Riccati recursion, which
  keeps the cost linear in the horizon length.

Every solution carries residuals from an evaluator that does not share code
with the solver internals.
"""
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kernels

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"
_STATUS = {0: OPTIMAL, 1: MAX_ITER, 2: INFEASIBLE}

BIG = 1e20
CENTRALITY = 1e-2


@dataclass
class KktResiduals:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    def max(self):
        return max(self.stationarity, self.primal, self.dual, self.complementarity)

    def ok(self, tol):
        return self.max() < tol


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    A_in: np.ndarray = None
    b_in: np.ndarray = None
    z0: np.ndarray = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        self.g = np.asarray(self.g, dtype=float).reshape(n)
        if self.A_eq is None:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        if self.A_in is None:
            self.A_in = np.zeros((0, n))
            self.b_in = np.zeros(0)
        self.A_eq = np.asarray(self.A_eq, dtype=float).reshape(-1, n)
        self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        self.A_in = np.asarray(self.A_in, dtype=float).reshape(-1, n)
        self.b_in = np.asarray(self.b_in, dtype=float).reshape(-1)
        if self.z0 is not None:
            self.z0 = np.asarray(self.z0, dtype=float).reshape(n)
        if self.H.shape != (n, n):
            raise ValueError("H must be square")
        if self.A_eq.shape[0] != self.b_eq.shape[0] or self.A_in.shape[0] != self.b_in.shape[0]:
            raise ValueError("constraint dimensions are inconsistent")
        if not np.allclose(self.H, self.H.T, rtol=0.0, atol=1e-12):
            raise ValueError("H must be symmetric")
        if n:
            lam_min = np.linalg.eigvalsh(self.H)[0]
            if lam_min < -1e-9 * max(1.0, np.abs(self.H).max()):
                raise ValueError(f"H is not positive semidefinite (min eigenvalue {lam_min:.3e})")

    @property
    def n(self):
        return self.H.shape[0]

    def objective(self, z):
        return float(0.5 * z @ self.H @ z + self.g @ z)

    def to_json(self):
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return json.dumps({
            "format": "overact-qp", "version": 1,
            "H": arr(self.H), "g": arr(self.g),
            "A_eq": arr(self.A_eq), "b_eq": arr(self.b_eq),
            "A_in": arr(self.A_in), "b_in": arr(self.b_in),
            "z0": arr(self.z0),
        })

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.get("format") != "overact-qp":
            raise ValueError("not a QP dump")
        n = len(d["g"])
        return cls(H=np.array(d["H"], dtype=float).reshape(n, n), g=d["g"],
                   A_eq=np.array(d["A_eq"], dtype=float).reshape(-1, n), b_eq=d["b_eq"],
                   A_in=np.array(d["A_in"], dtype=float).reshape(-1, n), b_in=d["b_in"],
                   z0=d["z0"])


@dataclass
class QpSolution:
    z: np.ndarray
    nu: np.ndarray
    lam: np.ndarray
    status: str
    kkt: KktResiduals
    iterations: int
    solve_time: float
    merit: np.ndarray = field(repr=False, default=None)
    objective: float = float("nan")

    @property
    def optimal(self):
        return self.status == OPTIMAL


def kkt_residuals(problem, z, nu, lam):
    """Independent KKT evaluation of a candidate primal-dual point."""
    z = np.asarray(z, dtype=float)
    stat = problem.H @ z + problem.g
    if problem.A_eq.size:
        stat = stat + problem.A_eq.T @ nu
    if problem.A_in.size:
        stat = stat + problem.A_in.T @ lam
    primal = 0.0
    if problem.A_eq.size:
        primal = float(np.max(np.abs(problem.A_eq @ z - problem.b_eq)))
    comp = 0.0
    dual = 0.0
    if problem.A_in.size:
        slack = problem.b_in - problem.A_in @ z
        primal = max(primal, float(np.max(np.maximum(-slack, 0.0))))
        dual = float(np.max(np.maximum(-lam, 0.0)))
        comp = float(np.max(np.abs(lam * slack)))
    return KktResiduals(float(np.max(np.abs(stat))) if stat.size else 0.0, primal, dual, comp)


def solve(problem, tol=1e-6, max_iter=100, deadline=None, z0=None):
    """Dense primal-dual interior point.  ``deadline`` is a wall-clock budget in seconds."""
    t0 = time.perf_counter()
    H, g = problem.H, problem.g
    Ae, be, Ai, bi = problem.A_eq, problem.b_eq, problem.A_in, problem.b_in
    n, p, m = problem.n, Ae.shape[0], Ai.shape[0]
    # semidefinite H: regularise the Newton matrix (not the residuals, so the solution is unchanged)
    reg = 1e-9 if n and np.linalg.eigvalsh(H)[0] < 1e-10 else 0.0
    itol = 1e-2 * tol
    h_shift = 1e-13 * (1.0 + np.max(np.abs(np.diag(H)), initial=0.0))

    z = np.zeros(n)
    if z0 is None:
        z0 = problem.z0
    if z0 is not None:
        z = np.array(z0, dtype=float)
    nu = np.zeros(p)
    s = np.maximum(bi - Ai @ z, 1.0)
    lam = np.ones(m)

    merit = []
    status = MAX_ITER
    best = None
    prev_rp = np.inf
    prev_lmax = 0.0
    stall = 0
    it = 0
    timed_out = False
    while True:
        rd = H @ z + g + Ae.T @ nu + Ai.T @ lam
        re = Ae @ z - be
        ri = Ai @ z + s - bi
        rp = max(np.max(np.abs(re), initial=0.0), np.max(np.abs(ri), initial=0.0))
        rdn = np.max(np.abs(rd), initial=0.0)
        comp = s * lam
        mu = comp.mean() if m else 0.0
        merit.append(max(rp, rdn))
        score = max(rp, rdn, np.max(comp, initial=0.0))
        if best is None or score < best[0]:
            best = (score, z.copy(), nu.copy(), lam.copy())
        # stationarity cannot get below roundoff in H z + g, so it is measured relative to that scale
        d_scale = 1.0 + max(np.max(np.abs(g), initial=0.0), np.max(np.abs(H @ z), initial=0.0))
        if rp <= itol and rdn <= itol * d_scale and np.max(comp, initial=0.0) <= itol:
            status = OPTIMAL
            break
        if deadline is not None and time.perf_counter() - t0 > deadline:
            status = MAX_ITER
            timed_out = True
            break
        if it >= max_iter:
            status = MAX_ITER
            break
        lmax = np.max(lam, initial=0.0)
        if rp > 1e-4 and rp >= 0.999 * prev_rp and lmax > prev_lmax:
            stall += 1
        else:
            stall = 0
        if stall >= 10:
            status = INFEASIBLE
            break
        prev_rp, prev_lmax = rp, lmax

        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            w = lam / s
        if not np.all(np.isfinite(w)):
            # the barrier weights overflowed: past what double precision can resolve
            status = MAX_ITER
            break
        hbar = H + (Ai.T * w) @ Ai
        # shift against zero pivots.  With singular H only the barrier terms bound the
        # conditioning, so the shift follows them; otherwise it follows H, since a shift that
        # large would perturb the step by more than the tolerance near the solution
        hbar[np.diag_indices(n)] += reg + (1e-13 * np.max(np.abs(np.diag(hbar)), initial=0.0) if reg else h_shift)
        kkt = np.zeros((n + p, n + p))
        kkt[:n, :n] = hbar
        kkt[:n, n:] = Ae.T
        kkt[n:, :n] = Ae
        kkt[n:, n:] -= 1e-12 * np.eye(p)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(kkt, check_finite=False)
            if np.min(np.abs(np.diag(lu[0]))) == 0.0:
                # cancellation under huge weights: fall back to a shift scaled by them
                kkt[np.diag_indices(n)] += 1e-13 * np.max(np.abs(np.diag(hbar)))
                lu = scipy.linalg.lu_factor(kkt, check_finite=False)

        def reduced(r_d, r_e, r_i, r_c):
            rhs = np.concatenate([-r_d - Ai.T @ ((-r_c + lam * r_i) / s), -r_e])
            sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
            dz, dnu = sol[:n], sol[n:]
            ds = -r_i - Ai @ dz
            dl = (-r_c - lam * ds) / s
            return dz, dnu, ds, dl

        def newton(rc):
            dz, dnu, ds, dl = reduced(rd, re, ri, rc)
            # one step of iterative refinement on the unreduced system: the condensed
            # matrix loses precision as lam/s grows near the solution
            e_d = H @ dz + Ae.T @ dnu + Ai.T @ dl + rd
            e_e = Ae @ dz + re
            e_i = Ai @ dz + ds + ri
            e_c = lam * ds + s * dl + rc
            cz, cnu, cs, cl = reduced(e_d, e_e, e_i, e_c)
            return dz + cz, dnu + cnu, ds + cs, dl + cl

        inside = m > 0 and np.min(comp) >= CENTRALITY * mu

        def centred_step(dz, dnu, ds, dl):
            # step to the boundary, shortened to stay in a wide neighbourhood of the central path
            a = min(1.0, 0.99 * max_step(ds, dl))
            if not inside:
                return a
            for _ in range(20):
                pair = (s + a * ds) * (lam + a * dl)
                if np.min(pair) >= CENTRALITY * np.mean(pair):
                    break
                a *= 0.8
            return a

        def max_step(ds, dl):
            a = 1.0
            neg = ds < 0
            if np.any(neg):
                a = min(a, np.min(-s[neg] / ds[neg]))
            neg = dl < 0
            if np.any(neg):
                a = min(a, np.min(-lam[neg] / dl[neg]))
            return a

        dz, dnu, ds, dl = newton(comp)
        if m:
            a_aff = max_step(ds, dl)
            mu_aff = np.mean((s + a_aff * ds) * (lam + a_aff * dl))
            sigma = (mu_aff / mu) ** 3
            dz, dnu, ds, dl = newton(comp + ds * dl - sigma * mu)
            alpha = centred_step(dz, dnu, ds, dl)
            if alpha < 0.1:
                # the corrector can cycle (one pair s_i lam_i collapsing, then recovering);
                # a plain centring step restores progress
                dz, dnu, ds, dl = newton(comp - 0.5 * mu)
                alpha = centred_step(dz, dnu, ds, dl)
        else:
            alpha = 1.0
        if not (np.all(np.isfinite(dz)) and np.all(np.isfinite(dl)) and np.all(np.isfinite(dnu))):
            status = MAX_ITER
            break
        z = z + alpha * dz
        nu = nu + alpha * dnu
        s = s + alpha * ds
        lam = lam + alpha * dl
        it += 1

    if status == MAX_ITER:
        _, z, nu, lam = best
    kkt = kkt_residuals(problem, z, nu, lam)
    if m and not timed_out and status in (OPTIMAL, MAX_ITER):
        # re-solve on the active set the iterate points at; kept only if it certifies better
        polished = _polish(problem, lam > bi - Ai @ z)
        if polished is not None:
            k2 = kkt_residuals(problem, *polished)
            if k2.max() < kkt.max():
                (z, nu, lam), kkt = polished, k2
                if kkt.ok(tol):
                    status = OPTIMAL
    if status == OPTIMAL and not kkt.ok(tol):
        status = MAX_ITER
    return QpSolution(z=z, nu=nu, lam=lam, status=status, kkt=kkt, iterations=it,
                      solve_time=time.perf_counter() - t0, merit=np.array(merit),
                      objective=problem.objective(z))


def _polish(problem, active):
    """Solve the equality-constrained problem on a guessed active set; None if it is not optimal."""
    H, g = problem.H, problem.g
    Ae, Aa = problem.A_eq, problem.A_in[active]
    n, p, q = problem.n, Ae.shape[0], Aa.shape[0]
    kkt = np.zeros((n + p + q, n + p + q))
    kkt[:n, :n] = H
    kkt[:n, n:n + p] = Ae.T
    kkt[:n, n + p:] = Aa.T
    kkt[n:n + p, :n] = Ae
    kkt[n + p:, :n] = Aa
    rhs = np.concatenate([-g, problem.b_eq, problem.b_in[active]])
    sol = scipy.linalg.lstsq(kkt, rhs, check_finite=False)[0]
    z, nu = sol[:n], sol[n:n + p]
    lam = np.zeros(problem.A_in.shape[0])
    lam[active] = sol[n + p:]
    if not np.all(np.isfinite(sol)) or np.any(lam < 0.0):
        return None
    if np.any(problem.A_in @ z > problem.b_in + 1e-12 * (1.0 + np.abs(problem.b_in))):
        return None
    return z, nu, lam


# ---------------------------------------------------------------------------
# box-constrained optimal control problems
# ---------------------------------------------------------------------------


@dataclass
class OcpProblem:
    """x[k+1] = A[k] x[k] + B[k] u[k] + c[k] for k < N-1, x[0] = x0 fixed.

    Stage costs 1/2 x'Q[k]x + q[k]'x (k = 1..N-1) and 1/2 u'R[k]u + r[k]'u.
    Bounds xlb/xub have shape (N, nx) (row 0 is ignored), ulb/uub (N-1, nu);
    use +-inf for absent bounds.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    Q: np.ndarray
    q: np.ndarray
    R: np.ndarray
    r: np.ndarray
    x0: np.ndarray
    xlb: np.ndarray
    xub: np.ndarray
    ulb: np.ndarray
    uub: np.ndarray

    @property
    def horizon(self):
        return self.Q.shape[0]

    def rollout(self, u):
        # plain numpy on purpose: the KKT audit must not share code with the solver
        x = np.empty((u.shape[0] + 1, self.x0.shape[0]))
        x[0] = self.x0
        bu = np.einsum("kij,kj->ki", self.B, u) + self.c
        for k in range(u.shape[0]):
            x[k + 1] = self.A[k] @ x[k] + bu[k]
        return x

    def objective(self, u):
        x = self.rollout(u)
        jx = 0.5 * np.einsum("ki,kij,kj->", x[1:], self.Q[1:], x[1:]) + np.sum(self.q[1:] * x[1:])
        ju = 0.5 * np.einsum("ki,kij,kj->", u, self.R, u) + np.sum(self.r * u)
        return float(jx + ju)


@dataclass
class OcpSolution:
    u: np.ndarray
    x: np.ndarray
    lam_x: np.ndarray
    lam_u: np.ndarray
    status: str
    iterations: int
    kkt: KktResiduals
    merit: np.ndarray = field(repr=False, default=None)

    @property
    def optimal(self):
        return self.status == OPTIMAL


def _finite_or_big(a):
    return np.clip(np.nan_to_num(np.asarray(a, dtype=float), posinf=BIG, neginf=-BIG), -BIG, BIG)


def ocp_kkt_residuals(prob, u, lam_x, lam_u):
    """KKT residuals of an OCP candidate.

    ``lam_x`` (N, nx) and ``lam_u`` (N-1, nu) are signed bound multipliers:
    positive entries act on upper bounds, negative entries on lower bounds.
    The state trajectory is recomputed here from ``u``.
    """
    x = prob.rollout(u)
    xlb, xub = np.asarray(prob.xlb, float), np.asarray(prob.xub, float)
    ulb, uub = np.asarray(prob.ulb, float), np.asarray(prob.uub, float)
    n_u = u.shape[0]
    # adjoint sweep for the reduced gradient
    gx = np.einsum("kij,kj->ki", prob.Q, x) + prob.q + lam_x
    costate = np.zeros(x.shape[1])
    lam = np.empty((n_u, x.shape[1]))
    for k in range(n_u, 0, -1):
        costate = gx[k] + (prob.A[k].T @ costate if k < n_u else 0.0)
        lam[k - 1] = costate
    grad = np.einsum("kij,kj->ki", prob.R, u) + prob.r + lam_u + np.einsum("kji,kj->ki", prob.B, lam)
    viol_x = np.maximum(np.maximum(xlb[1:] - x[1:], x[1:] - xub[1:]), 0.0)
    viol_u = np.maximum(np.maximum(ulb - u, u - uub), 0.0)
    primal = max(float(viol_x.max(initial=0.0)), float(viol_u.max(initial=0.0)))

    def comp_and_dual(lam, z, lb, ub):
        lam_up = np.maximum(lam, 0.0)
        lam_lo = np.maximum(-lam, 0.0)
        # a multiplier without a matching finite bound is dual infeasible
        dual = max(float(np.max(np.where(np.isfinite(ub), 0.0, lam_up), initial=0.0)),
                   float(np.max(np.where(np.isfinite(lb), 0.0, lam_lo), initial=0.0)))
        gap_up = np.where(np.isfinite(ub), ub - z, 0.0)
        gap_lo = np.where(np.isfinite(lb), z - lb, 0.0)
        comp = float(np.max(np.abs(lam_up * gap_up) + np.abs(lam_lo * gap_lo), initial=0.0))
        return comp, dual

    cx, dx = comp_and_dual(lam_x[1:], x[1:], xlb[1:], xub[1:])
    cu, du = comp_and_dual(lam_u, u, ulb, uub)
    return KktResiduals(float(np.max(np.abs(grad), initial=0.0)), primal, max(dx, du), max(cx, cu))


def solve_ocp(prob, u_init=None, tol=1e-6, max_iter=50):
    n_u = prob.horizon - 1
    nu = prob.B.shape[2]
    if u_init is None:
        u_init = np.zeros((n_u, nu))
    out = kernels.ocp_ipm(prob.A, prob.B, prob.c, prob.Q, prob.q, prob.R, prob.r,
                          _finite_or_big(prob.xlb), _finite_or_big(prob.xub),
                          _finite_or_big(prob.ulb), _finite_or_big(prob.uub),
                          np.asarray(prob.x0, dtype=float), np.asarray(u_init, dtype=float),
                          1e-2 * tol, max_iter)
    u, x, lxl, lxu, lul, luu, code, iters, merit = out
    lam_x = lxu - lxl
    lam_u = luu - lul
    status = _STATUS[int(code)]
    kkt = ocp_kkt_residuals(prob, u, lam_x, lam_u)
    if status == OPTIMAL and not kkt.ok(tol):
        status = MAX_ITER
    return OcpSolution(u=u, x=x, lam_x=lam_x, lam_u=lam_u, status=status, iterations=int(iters),
                       kkt=kkt, merit=merit)


def condense(prob):
    """Eliminate the states and return the equivalent dense :class:`QpProblem` in u."""
    n = prob.horizon
    nx = prob.x0.shape[0]
    nu = prob.B.shape[2]
    nz = (n - 1) * nu
    # x[k] = S[k] z + w[k]
    S = np.zeros((n, nx, nz))
    w = np.zeros((n, nx))
    w[0] = prob.x0
    for k in range(n - 1):
        S[k + 1] = prob.A[k] @ S[k]
        S[k + 1][:, k * nu:(k + 1) * nu] += prob.B[k]
        w[k + 1] = prob.A[k] @ w[k] + prob.c[k]
    H = scipy.linalg.block_diag(*prob.R)
    g = prob.r.reshape(-1).copy()
    rows, rhs = [], []
    for k in range(1, n):
        H = H + S[k].T @ prob.Q[k] @ S[k]
        g = g + S[k].T @ (prob.Q[k] @ w[k] + prob.q[k])
        for i in range(nx):
            if np.isfinite(prob.xub[k, i]):
                rows.append(S[k][i])
                rhs.append(prob.xub[k, i] - w[k, i])
            if np.isfinite(prob.xlb[k, i]):
                rows.append(-S[k][i])
                rhs.append(w[k, i] - prob.xlb[k, i])
    eye = np.eye(nz)
    ub = prob.uub.reshape(-1)
    lb = prob.ulb.reshape(-1)
    for j in range(nz):
        if np.isfinite(ub[j]):
            rows.append(eye[j])
            rhs.append(ub[j])
        if np.isfinite(lb[j]):
            rows.append(-eye[j])
            rhs.append(-lb[j])
    H = 0.5 * (H + H.T)
    a_in = np.array(rows) if rows else None
    b_in = np.array(rhs) if rows else None
    return QpProblem(H=H, g=g, A_in=a_in, b_in=b_in)
