"""Dense primal-dual interior-point solver for :class:`~acopf_escape.model.NlpProblem`.

Problem form::

    min f(x)  s.t.  h(x) = 0,  g(x) <= 0,  lb <= x <= ub

Inequalities get slacks ``g(x) + s = 0, s >= 0``.  Each iteration solves the
condensed primal-dual system with an LDL^T factorization whose inertia is
corrected by diagonal regularization.  Steps are accepted by a filter line
search with one second-order correction; a feasibility restoration phase
takes over when the line search stalls.

Duals follow the Lagrangian ``f + y_eq . h + y_ineq . g - z . (bound terms)``,
so ``y_ineq >= 0`` and, for the ACOPF balance rows of :mod:`model`, ``y_eq``
is the marginal price.  Duals are always reported for the unscaled problem.

At a converged point the reduced Hessian on the active set is checked; if
it has a negative eigenvalue (a saddle or a maximum that the first-order
test accepted) the solver restarts from both sides of the negative
curvature direction and keeps the best local optimum.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import lapack, null_space

from .model import NlpProblem

__all__ = ["SolveOptions", "SolveOutcome", "Status", "kkt_residual", "minimize", "write_trace_csv"]

_EPS = np.finfo(float).eps


class Status(str, Enum):
    LOCAL_OPTIMAL = "LocalOptimal"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"
    NUMERIC_FAILURE = "NumericFailure"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class SolveOptions:
    """Solver settings.

    ``tol`` bounds the unscaled KKT residual (see :func:`kkt_residual`).
    ``escapes`` is the number of negative-curvature restarts allowed; 0
    returns the first KKT point found.  ``max_step`` caps how far a variable
    without bounds (an angle, typically) moves in one iteration, which keeps
    iterates inside the basin they start in.
    """

    tol: float = 1e-4
    max_iter: int = 500
    mu_init: float = 0.1
    mu_min: float = 1e-11
    mu_linear: float = 0.2
    mu_superlinear: float = 1.5
    barrier_tol_factor: float = 10.0
    tau_min: float = 0.99
    bound_push: float = 1e-2
    reg_first: float = 1e-4
    reg_min: float = 1e-20
    reg_max: float = 1e40
    jac_reg: float = 1e-8
    scaling: bool = True
    scaling_max_gradient: float = 100.0
    escapes: int = 2
    escape_step: float = 0.3
    max_step: float = 0.5
    record_trace: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not self.max_step > 0:
            raise ValueError("max_step must be positive")
        if not 0 < self.mu_linear < 1:
            raise ValueError("mu_linear must lie in (0, 1)")


@dataclass
class SolveOutcome:
    status: Status
    primal: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    bound_duals: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    trace: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status is Status.LOCAL_OPTIMAL


# ---------------------------------------------------------------------------
# KKT residual (unscaled, public)

def _estimate_bound_duals(problem, x, stat, lb, ub):
    # a bound multiplier can only absorb stationarity of the right sign at an active bound
    scale = 1.0 + np.abs(x)
    at_lb = np.isfinite(lb) & (x - lb <= 1e-6 * scale)
    at_ub = np.isfinite(ub) & (ub - x <= 1e-6 * scale)
    z = np.zeros_like(x)
    z[at_lb & (stat > 0)] = stat[at_lb & (stat > 0)]
    z[at_ub & (stat < 0)] = stat[at_ub & (stat < 0)]
    return z


def kkt_residual(problem: NlpProblem, primal, eq_duals, ineq_duals, bound_duals=None) -> float:
    """Max of stationarity, primal infeasibility, dual infeasibility and complementarity.

    ``bound_duals`` holds ``z = z_lower - z_upper`` per variable.  If omitted
    it is estimated from the stationarity residual at active bounds.
    """
    x = np.asarray(primal, float)
    y = np.asarray(eq_duals, float).reshape(-1)
    w = np.asarray(ineq_duals, float).reshape(-1)
    if x.shape != (problem.n_vars,) or y.size != problem.n_eq or w.size != problem.n_ineq:
        raise ValueError("dimension mismatch in kkt_residual")
    lb, ub = np.asarray(problem.lb, float), np.asarray(problem.ub, float)
    stat = np.asarray(problem.gradient(x), float).copy()
    h = problem.eval_eq(x)
    g = problem.eval_ineq(x)
    if problem.n_eq:
        stat += problem.eval_eq_jac(x).T @ y
    if problem.n_ineq:
        stat += problem.eval_ineq_jac(x).T @ w
    z = _estimate_bound_duals(problem, x, stat, lb, ub) if bound_duals is None \
        else np.asarray(bound_duals, float)
    stat = stat - z
    zl, zu = np.maximum(z, 0.0), np.maximum(-z, 0.0)
    parts = [np.abs(stat)]
    parts.append(np.abs(h))
    parts.append(np.maximum(g, 0.0))
    parts.append(np.maximum(lb - x, 0.0)[np.isfinite(lb)])
    parts.append(np.maximum(x - ub, 0.0)[np.isfinite(ub)])
    parts.append(np.maximum(-w, 0.0))
    parts.append(np.abs(w * g))
    with np.errstate(invalid="ignore"):
        parts.append(np.where(zl > 0, zl * np.abs(x - lb), 0.0))
        parts.append(np.where(zu > 0, zu * np.abs(ub - x), 0.0))
    return float(max((np.max(p) if p.size else 0.0) for p in parts))


# ---------------------------------------------------------------------------
# problem wrapper: fixed-variable elimination and scaling

class _Scaled:
    def __init__(self, problem: NlpProblem, x0, opts: SolveOptions):
        self.p = problem
        lb = np.asarray(problem.lb, float)
        ub = np.asarray(problem.ub, float)
        if np.any(lb > ub):
            raise ValueError("inconsistent bounds (lb > ub)")
        self.fixed = np.isfinite(lb) & (lb == ub)
        self.free = np.flatnonzero(~self.fixed)
        self.x_full = np.where(self.fixed, lb, np.asarray(x0, float))
        self.lb, self.ub = lb[self.free], ub[self.free]
        self.n = self.free.size
        self.me, self.mi = problem.n_eq, problem.n_ineq
        self.obj_scale = 1.0
        self.eq_scale = np.ones(self.me)
        self.ineq_scale = np.ones(self.mi)
        if opts.scaling:
            x = self.x_full[self.free]
            cap = opts.scaling_max_gradient
            gn = np.max(np.abs(self.grad(x)), initial=0.0)
            self.obj_scale = min(1.0, cap / gn) if gn > 0 else 1.0
            if self.me:
                rn = np.max(np.abs(self.jac_eq(x)), axis=1, initial=0.0)
                self.eq_scale = np.where(rn > cap, cap / np.maximum(rn, 1e-300), 1.0)
            if self.mi:
                rn = np.max(np.abs(self.jac_ineq(x)), axis=1, initial=0.0)
                self.ineq_scale = np.where(rn > cap, cap / np.maximum(rn, 1e-300), 1.0)

    def full(self, x):
        out = self.x_full.copy()
        out[self.free] = x
        return out

    # raw (unscaled) evaluations on free variables
    def obj(self, x):
        return float(self.p.objective(self.full(x)))

    def grad(self, x):
        return np.asarray(self.p.gradient(self.full(x)), float)[self.free]

    def eq(self, x):
        return self.p.eval_eq(self.full(x))

    def ineq(self, x):
        return self.p.eval_ineq(self.full(x))

    def jac_eq(self, x):
        return self.p.eval_eq_jac(self.full(x))[:, self.free]

    def jac_ineq(self, x):
        return self.p.eval_ineq_jac(self.full(x))[:, self.free]

    def hess(self, x, y_eq, y_ineq, obj_factor):
        hf = self.p.hessian(self.full(x), y_eq, y_ineq, obj_factor)
        return np.asarray(hf, float)[np.ix_(self.free, self.free)]


# ---------------------------------------------------------------------------
# linear algebra

def _inertia(lu, piv):
    n = lu.shape[0]
    pos = neg = zero = 0
    tiny = 1e-20 * max(1.0, float(np.max(np.abs(np.diag(lu)), initial=0.0)))
    k = 0
    while k < n:
        if piv[k] > 0:
            d = lu[k, k]
            eigs = (d,)
            k += 1
        else:
            a, b, c = lu[k, k], lu[k + 1, k], lu[k + 1, k + 1]
            mid, rad = 0.5 * (a + c), math.hypot(0.5 * (a - c), b)
            eigs = (mid + rad, mid - rad)
            k += 2
        for e in eigs:
            if abs(e) <= tiny:
                zero += 1
            elif e > 0:
                pos += 1
            else:
                neg += 1
    return pos, neg, zero


def _equilibrate(k, sweeps=3):
    # symmetric Ruiz scaling; a congruence, so the inertia is unchanged
    d = np.ones(k.shape[0])
    a = np.abs(k)
    for _ in range(sweeps):
        r = np.max(d[:, None] * a * d[None, :], axis=1)
        r[r == 0] = 1.0
        d /= np.sqrt(r)
    return d


class _Kkt:
    """Inertia-corrected factorization of the condensed primal-dual matrix."""

    def __init__(self, opts: SolveOptions):
        self.opts = opts
        self.last_delta = 0.0

    def factor(self, w, sigma_x, sigma_s, jh, jg, mu):
        """Factor [[W + Sx + dw, Jh', Jg'], [Jh, -dc, 0], [Jg, 0, -(Ss+dw)^-1 - dc]]."""
        o = self.opts
        n, me, mi = w.shape[0], jh.shape[0], jg.shape[0]
        m = me + mi
        base = np.zeros((n + m, n + m))
        base[:n, :n] = w + np.diag(sigma_x)
        base[n:n + me, :n] = jh
        base[n + me:, :n] = jg
        base[:n, n:n + me] = jh.T
        base[:n, n + me:] = jg.T
        dw, dc = 0.0, 0.0
        first = True
        while True:
            k = base.copy()
            k[np.arange(n), np.arange(n)] += dw
            if mi:
                idx = np.arange(n + me, n + m)
                k[idx, idx] = -1.0 / (sigma_s + dw)
            if m:
                idx = np.arange(n, n + m)
                k[idx, idx] -= dc
            d = _equilibrate(k)
            lu, piv, info = lapack.dsytrf(d[:, None] * k * d[None, :], lower=1)
            if info >= 0:
                pos, neg, zero = _inertia(lu, piv)
                if info == 0 and pos == n and neg == m and zero == 0:
                    self.lu, self.piv, self.d, self.n, self.me, self.mi = lu, piv, d, n, me, mi
                    self.sigma_s, self.dw = sigma_s, dw
                    if dw > 0:
                        self.last_delta = dw
                    return True
                if (zero > 0 or neg < m) and dc == 0.0:
                    # rank-deficient constraint Jacobian
                    dc = o.jac_reg * mu ** 0.25
                    continue
            if first:
                dw = o.reg_first if self.last_delta == 0.0 else max(o.reg_min, self.last_delta / 3.0)
                first = False
            else:
                dw *= 100.0 if self.last_delta == 0.0 else 8.0
            if dw > o.reg_max:
                return False

    def solve(self, r_x, r_s, r_h, r_g):
        """Newton step for residuals (dual x, dual s, eq, ineq); returns dx, ds, dyh, dyg."""
        rhs = np.concatenate([-r_x, -r_h, -(r_g + (-r_s) / (self.sigma_s + self.dw))
                              if self.mi else np.zeros(0)])
        sol, info = lapack.dsytrs(self.lu, self.piv, self.d * rhs, lower=1)
        sol = self.d * sol
        n, me = self.n, self.me
        dx, dyh, dyg = sol[:n], sol[n:n + me], sol[n + me:]
        ds = (-r_s - dyg) / (self.sigma_s + self.dw) if self.mi else np.zeros(0)
        return dx, ds, dyh, dyg


def _fraction_to_boundary(v, dv, tau):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


# ---------------------------------------------------------------------------
# the interior-point loop

class _State:
    __slots__ = ("x", "s", "yh", "yg", "zl", "zu", "zs")

    def __init__(self, x, s, yh, yg, zl, zu, zs):
        self.x, self.s, self.yh, self.yg, self.zl, self.zu, self.zs = x, s, yh, yg, zl, zu, zs

    def copy(self):
        return _State(*(getattr(self, a).copy() for a in self.__slots__))


class _Ipm:
    # filter line search constants
    GAMMA_THETA = 1e-5
    GAMMA_PHI = 1e-8
    DELTA = 1.0
    S_THETA = 1.1
    S_PHI = 2.3
    ETA_PHI = 1e-8
    KAPPA_SIGMA = 1e10
    # restoration hands back only after a large cut in violation; small cuts
    # from far-off starts just re-enter restoration a few iterations later
    RESTO_REDUCTION = 0.01

    def __init__(self, sp: _Scaled, opts: SolveOptions, stop=None):
        self.sp, self.o = sp, opts
        self.stop = stop  # set for a restoration phase, which is never nested
        self.has_l = np.isfinite(sp.lb)
        self.has_u = np.isfinite(sp.ub)
        self.unbounded = ~self.has_l & ~self.has_u
        self.kkt = _Kkt(opts)
        self.trace = []

    # scaled evaluations -------------------------------------------------
    def evaluate(self, x):
        sp = self.sp
        return dict(
            f=sp.obj_scale * sp.obj(x),
            grad=sp.obj_scale * sp.grad(x),
            h=sp.eq_scale * sp.eq(x) if sp.me else np.zeros(0),
            g=sp.ineq_scale * sp.ineq(x) if sp.mi else np.zeros(0),
            jh=sp.eq_scale[:, None] * sp.jac_eq(x) if sp.me else np.zeros((0, sp.n)),
            jg=sp.ineq_scale[:, None] * sp.jac_ineq(x) if sp.mi else np.zeros((0, sp.n)),
        )

    def dist(self, x):
        dl = np.where(self.has_l, x - np.where(self.has_l, self.sp.lb, 0.0), 1.0)
        du = np.where(self.has_u, np.where(self.has_u, self.sp.ub, 0.0) - x, 1.0)
        return dl, du

    def barrier(self, f, x, s, mu):
        dl, du = self.dist(x)
        if np.any(dl[self.has_l] <= 0) or np.any(du[self.has_u] <= 0) or np.any(s <= 0):
            return math.inf
        return (f - mu * (np.sum(np.log(dl[self.has_l])) + np.sum(np.log(du[self.has_u]))
                          + np.sum(np.log(s))))

    def infeas(self, ev, s):
        return float(np.sum(np.abs(ev["h"])) + np.sum(np.abs(ev["g"] + s)))

    # multipliers -------------------------------------------------------
    def ls_multipliers(self, ev, st):
        n, me, mi = self.sp.n, self.sp.me, self.sp.mi
        m = me + mi
        if m == 0:
            return np.zeros(0), np.zeros(0)
        a = np.zeros((n + mi + m, n + mi + m))
        a[:n + mi, :n + mi] = np.eye(n + mi)
        jac = np.zeros((m, n + mi))
        jac[:me, :n] = ev["jh"]
        jac[me:, :n] = ev["jg"]
        jac[me:, n:] = np.eye(mi)
        a[n + mi:, :n + mi] = jac
        a[:n + mi, n + mi:] = jac.T
        rhs = np.concatenate([-(ev["grad"] - st.zl + st.zu), st.zs, np.zeros(m)])
        try:
            sol = np.linalg.lstsq(a, rhs, rcond=None)[0]
        except np.linalg.LinAlgError:
            return np.zeros(me), np.ones(mi)
        y = sol[n + mi:]
        if np.max(np.abs(y), initial=0.0) > 1e3:
            return np.zeros(me), np.ones(mi)
        return y[:me], np.maximum(y[me:], 1e-2) if mi else np.zeros(0)

    # unscaled quantities -------------------------------------------------
    def unscaled_duals(self, st):
        sp = self.sp
        yh = st.yh * sp.eq_scale / sp.obj_scale
        yg = st.yg * sp.ineq_scale / sp.obj_scale
        z = (np.where(self.has_l, st.zl, 0.0) - np.where(self.has_u, st.zu, 0.0)) / sp.obj_scale
        return yh, yg, z

    def full_bound_duals(self, x_free, yh, yg, z_free):
        sp = self.sp
        x = sp.full(x_free)
        stat = np.asarray(sp.p.gradient(x), float).copy()
        if sp.me:
            stat += sp.p.eval_eq_jac(x).T @ yh
        if sp.mi:
            stat += sp.p.eval_ineq_jac(x).T @ yg
        z = stat.copy()  # fixed variables absorb their whole stationarity
        z[sp.free] = z_free
        return z

    def official(self, st):
        yh, yg, z = self.unscaled_duals(st)
        zf = self.full_bound_duals(st.x, yh, yg, z)
        res = kkt_residual(self.sp.p, self.sp.full(st.x), yh, yg, zf)
        return res, yh, yg, zf

    # main loop ----------------------------------------------------------
    def initial_state(self):
        sp, o = self.sp, self.o
        x = sp.x_full[sp.free].astype(float)
        if not np.all(np.isfinite(x)):
            raise ValueError("start point must be finite")
        # push strictly inside the bounds
        lo, hi = sp.lb, sp.ub
        both = self.has_l & self.has_u
        p_l = np.where(self.has_l, o.bound_push * np.maximum(1.0, np.abs(np.where(self.has_l, lo, 0))), 0)
        p_u = np.where(self.has_u, o.bound_push * np.maximum(1.0, np.abs(np.where(self.has_u, hi, 0))), 0)
        width = np.where(both, np.where(both, hi, 0) - np.where(both, lo, 0), np.inf)
        p_l = np.minimum(p_l, o.bound_push * width)
        p_u = np.minimum(p_u, o.bound_push * width)
        x = np.where(self.has_l, np.maximum(x, np.where(self.has_l, lo, 0) + p_l), x)
        x = np.where(self.has_u, np.minimum(x, np.where(self.has_u, hi, 0) - p_u), x)
        ev = self.evaluate(x)
        s = np.maximum(-ev["g"], o.bound_push) if sp.mi else np.zeros(0)
        zl = np.where(self.has_l, 1.0, 0.0)
        zu = np.where(self.has_u, 1.0, 0.0)
        zs = np.ones(sp.mi)
        st = _State(x, s, np.zeros(sp.me), np.zeros(sp.mi), zl, zu, zs)
        st.yh, st.yg = self.ls_multipliers(ev, st)
        return st, ev

    def run(self):
        o, sp = self.o, self.sp
        st, ev = self.initial_state()
        mu = o.mu_init
        tau = max(o.tau_min, 1.0 - mu)
        theta0 = self.infeas(ev, st.s)
        theta_max = 1e4 * max(1.0, theta0)
        theta_min = 1e-4 * max(1.0, theta0)
        filt: list[tuple[float, float]] = []
        best = None  # (residual, state) of the best iterate so far
        status = Status.MAX_ITER
        it = 0
        while True:
            res, *_ = self.official(st)
            if best is None or res < best[0]:
                best = (res, st.copy())
            if o.record_trace:
                self.trace.append({"iteration": it, "objective": ev["f"] / sp.obj_scale,
                                   "kkt_residual": res, "barrier": mu})
            if res <= o.tol:
                status = Status.LOCAL_OPTIMAL
                break
            if self.stop is not None and self.stop(st):
                return "stopped", st
            if it >= o.max_iter:
                break
            # barrier update
            while mu > o.mu_min and self.barrier_error(ev, st, mu) <= o.barrier_tol_factor * mu:
                mu = max(o.mu_min, min(o.mu_linear * mu, mu ** o.mu_superlinear))
                tau = max(o.tau_min, 1.0 - mu)
                filt = []
            it += 1
            step = self.step(ev, st, mu, tau, filt, theta_max, theta_min)
            if step is None:
                rest = None if self.stop is not None else self.restore(st, ev, mu, filt)
                if rest is None:
                    status = Status.INFEASIBLE
                    break
                st, ev = rest
                continue
            if step == "numeric":
                status = Status.NUMERIC_FAILURE
                break
            st, ev = step
        if status is not Status.LOCAL_OPTIMAL:
            st = best[1]
        res, yh, yg, zf = self.official(st)
        return status, st, res, yh, yg, zf, it

    def barrier_error(self, ev, st, mu):
        dl, du = self.dist(st.x)
        dual_x = ev["grad"] + ev["jh"].T @ st.yh + ev["jg"].T @ st.yg - st.zl + st.zu
        dual_s = st.yg - st.zs
        comp = [np.abs(dl * st.zl - mu)[self.has_l], np.abs(du * st.zu - mu)[self.has_u],
                np.abs(st.s * st.zs - mu)]
        n_mult = st.yh.size + st.yg.size
        z_sum = np.sum(st.zl) + np.sum(st.zu) + np.sum(st.zs)
        s_max = 100.0
        s_d = max(s_max, (np.sum(np.abs(st.yh)) + np.sum(np.abs(st.yg)) + z_sum)
                  / max(1, n_mult + self.has_l.sum() + self.has_u.sum() + st.s.size)) / s_max
        s_c = max(s_max, z_sum / max(1, self.has_l.sum() + self.has_u.sum() + st.s.size)) / s_max
        parts = [
            np.max(np.abs(np.concatenate([dual_x, dual_s])), initial=0.0) / s_d,
            np.max(np.abs(np.concatenate([ev["h"], ev["g"] + st.s])), initial=0.0),
            max((np.max(c, initial=0.0) for c in comp), default=0.0) / s_c,
        ]
        return float(max(parts))

    def step(self, ev, st, mu, tau, filt, theta_max, theta_min):
        sp = self.sp
        dl, du = self.dist(st.x)
        sig_x = np.where(self.has_l, st.zl / dl, 0.0) + np.where(self.has_u, st.zu / du, 0.0)
        sig_s = st.zs / st.s if sp.mi else np.zeros(0)
        w = sp.hess(st.x, st.yh * sp.eq_scale, st.yg * sp.ineq_scale, sp.obj_scale)
        if not np.all(np.isfinite(w)):
            return "numeric"
        if not self.kkt.factor(w, sig_x, sig_s, ev["jh"], ev["jg"], mu):
            return "numeric"
        grad_phi_x = ev["grad"] - np.where(self.has_l, mu / dl, 0.0) + np.where(self.has_u, mu / du, 0.0)
        grad_phi_s = -mu / st.s if sp.mi else np.zeros(0)
        r_x = grad_phi_x + ev["jh"].T @ st.yh + ev["jg"].T @ st.yg
        r_s = grad_phi_s + st.yg
        c_h, c_g = ev["h"], ev["g"] + st.s
        dx, ds, dyh, dyg = self.kkt.solve(r_x, r_s, c_h, c_g)
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(ds))):
            return "numeric"
        dzl = np.where(self.has_l, mu / dl - st.zl - st.zl / dl * dx, 0.0)
        dzu = np.where(self.has_u, mu / du - st.zu + st.zu / du * dx, 0.0)
        dzs = mu / st.s - st.zs - st.zs / st.s * ds if sp.mi else np.zeros(0)

        a_max = min(_fraction_to_boundary(dl[self.has_l], dx[self.has_l], tau),
                    _fraction_to_boundary(du[self.has_u], -dx[self.has_u], tau),
                    _fraction_to_boundary(st.s, ds, tau))
        dx_norm = float(np.max(np.abs(dx[self.unbounded]), initial=0.0))
        if dx_norm * a_max > self.o.max_step:
            a_max = self.o.max_step / dx_norm
        a_z = min(_fraction_to_boundary(st.zl[self.has_l], dzl[self.has_l], tau),
                  _fraction_to_boundary(st.zu[self.has_u], dzu[self.has_u], tau),
                  _fraction_to_boundary(st.zs, dzs, tau))

        theta = self.infeas(ev, st.s)
        phi = self.barrier(ev["f"], st.x, st.s, mu)
        gphi_d = float(grad_phi_x @ dx + (grad_phi_s @ ds if sp.mi else 0.0))
        tiny = np.max(np.abs(dx) / (1.0 + np.abs(st.x)), initial=0.0) < 10 * _EPS and \
            np.max(np.abs(ds) / (1.0 + st.s), initial=0.0) < 10 * _EPS
        a_min = self._alpha_min(gphi_d, theta, theta_min)

        alpha = a_max
        accepted = None
        first = True
        while True:
            x_t, s_t = st.x + alpha * dx, st.s + alpha * ds
            ev_t = self.evaluate(x_t)
            theta_t = self.infeas(ev_t, s_t)
            phi_t = self.barrier(ev_t["f"], x_t, s_t, mu)
            kind = self._acceptable(theta, phi, theta_t, phi_t, alpha, gphi_d, filt, theta_max, theta_min)
            if kind or tiny:
                accepted = (x_t, s_t, ev_t, alpha, kind or "tiny")
                break
            if first and theta_t >= theta and np.isfinite(phi_t):
                soc = self._second_order(st, alpha, c_h, c_g, ev_t, s_t, r_x, r_s, dl, du, tau, mu,
                                         theta, phi, gphi_d, filt, theta_max, theta_min)
                if soc is not None:
                    accepted = (soc[0], soc[1], soc[2], alpha, soc[3])
                    break
            first = False
            alpha *= 0.5
            if alpha < a_min:
                return None
        x_t, s_t, ev_t, alpha, kind = accepted
        if kind != "armijo":
            filt.append(((1 - self.GAMMA_THETA) * theta, phi - self.GAMMA_PHI * theta))
        new = _State(x_t, s_t, st.yh + alpha * dyh, st.yg + alpha * dyg,
                     st.zl + a_z * dzl, st.zu + a_z * dzu, st.zs + a_z * dzs)
        self._safeguard_z(new, mu)
        return new, ev_t

    def _alpha_min(self, gphi_d, theta, theta_min):
        g = self.GAMMA_THETA
        if gphi_d < 0:
            cands = [g, self.GAMMA_PHI * theta / -gphi_d]
            if theta <= theta_min:
                cands.append(self.DELTA * theta ** self.S_THETA / (-gphi_d) ** self.S_PHI)
            return 0.05 * min(cands)
        return 0.05 * g

    def _acceptable(self, theta, phi, theta_t, phi_t, alpha, gphi_d, filt, theta_max, theta_min):
        if not (np.isfinite(theta_t) and np.isfinite(phi_t)) or theta_t > theta_max:
            return None
        for tf, pf in filt:
            if theta_t >= tf and phi_t >= pf:
                return None
        switching = gphi_d < 0 and alpha * (-gphi_d) ** self.S_PHI > self.DELTA * theta ** self.S_THETA
        if switching and theta <= theta_min:
            if phi_t <= phi + self.ETA_PHI * alpha * gphi_d + 10 * _EPS * abs(phi):
                return "armijo"
            return None
        if theta_t <= (1 - self.GAMMA_THETA) * theta or phi_t <= phi - self.GAMMA_PHI * theta \
                + 10 * _EPS * abs(phi):
            return "filter"
        return None

    def _second_order(self, st, alpha, c_h, c_g, ev_t, s_t, r_x, r_s, dl, du, tau, mu,
                      theta, phi, gphi_d, filt, theta_max, theta_min):
        ch_soc = alpha * c_h + ev_t["h"]
        cg_soc = alpha * c_g + (ev_t["g"] + s_t)
        dx, ds, _, _ = self.kkt.solve(r_x, r_s, ch_soc, cg_soc)
        a_soc = min(_fraction_to_boundary(dl[self.has_l], dx[self.has_l], tau),
                    _fraction_to_boundary(du[self.has_u], -dx[self.has_u], tau),
                    _fraction_to_boundary(st.s, ds, tau))
        x2, s2 = st.x + a_soc * dx, st.s + a_soc * ds
        ev2 = self.evaluate(x2)
        theta2 = self.infeas(ev2, s2)
        phi2 = self.barrier(ev2["f"], x2, s2, mu)
        kind = self._acceptable(theta, phi, theta2, phi2, alpha, gphi_d, filt, theta_max, theta_min)
        if kind:
            return x2, s2, ev2, kind
        return None

    def _safeguard_z(self, st, mu):
        k = self.KAPPA_SIGMA
        dl, du = self.dist(st.x)
        st.zl = np.where(self.has_l, np.clip(st.zl, mu / (k * dl), k * mu / dl), 0.0)
        st.zu = np.where(self.has_u, np.clip(st.zu, mu / (k * du), k * mu / du), 0.0)
        if st.s.size:
            st.zs = np.clip(st.zs, mu / (k * st.s), k * mu / st.s)

    def restore(self, st, ev, mu, filt):
        """Feasibility restoration: minimize the violation near the current point.

        Runs this same method on a bound-constrained least-squares problem and
        hands back the first iterate that cuts the violation a hundredfold and is
        acceptable to the filter.  Returns None when that never happens.
        """
        sp = self.sp
        if sp.me + sp.mi == 0:
            return None
        theta_k = self.infeas(ev, st.s)
        phi_k = self.barrier(ev["f"], st.x, st.s, mu)
        filt.append(((1 - self.GAMMA_THETA) * theta_k, phi_k - self.GAMMA_PHI * theta_k))
        resto, v0 = _feasibility_problem(self, st, mu)
        n, mi = sp.n, sp.mi
        found = []

        def stop(rst):
            x, s = rst.x[:n], rst.x[n:n + mi]
            ev_t = self.evaluate(x)
            theta_t = self.infeas(ev_t, s)
            if not theta_t <= self.RESTO_REDUCTION * theta_k:
                return False
            phi_t = self.barrier(ev_t["f"], x, s, mu)
            if not np.isfinite(phi_t) or any(theta_t >= tf and phi_t >= pf for tf, pf in filt):
                return False
            found.append((x.copy(), s.copy(), ev_t))
            return True

        o = self.o
        ropts = SolveOptions(tol=o.tol, max_iter=o.max_iter, mu_init=mu, scaling=False, escapes=0,
                             max_step=o.max_step)
        inner = _Ipm(_Scaled(resto, v0, ropts), ropts, stop=stop)
        inner.run()
        if not found:
            return None
        x, s, ev_new = found[0]
        new = _State(x, np.maximum(s, 1e-12), st.yh, st.yg, st.zl, st.zu, st.zs)
        new.zl = np.where(self.has_l, np.maximum(st.zl, 1e-8), 0.0)
        new.zu = np.where(self.has_u, np.maximum(st.zu, 1e-8), 0.0)
        new.zs = np.maximum(st.zs, 1e-8)
        self._safeguard_z(new, mu)
        new.yh, new.yg = self.ls_multipliers(ev_new, new)
        return new, ev_new


def _feasibility_problem(ipm: _Ipm, st: _State, mu):
    """min 1/2 |c(x, s)|^2 + zeta/2 |D (x - x_ref)|^2 over the bounds, with s >= 0.

    ``c`` stacks the scaled equalities and ``g(x) + s``; the proximal term
    keeps the restored point near the one where the line search failed.  Its
    weight ``zeta`` is kept small next to the violation so that it cannot
    hold the restoration at a compromise point with the violation unchanged.
    """
    sp = ipm.sp
    n, me, mi = sp.n, sp.me, sp.mi
    x_ref = st.x.copy()
    zeta = 1e-3 * math.sqrt(mu)
    dr2 = np.minimum(1.0, 1.0 / np.maximum(np.abs(x_ref), 1e-300)) ** 2
    cache = {}

    def parts(v):
        key = v.tobytes()
        if cache.get("key") != key:
            e = ipm.evaluate(v[:n])
            c = np.concatenate([e["h"], e["g"] + v[n:]])
            j = np.zeros((me + mi, n + mi))
            j[:me, :n] = e["jh"]
            j[me:, :n] = e["jg"]
            j[me:, n:] = np.eye(mi)
            cache.update(key=key, c=c, j=j)
        return cache["c"], cache["j"]

    def obj(v):
        c, _ = parts(v)
        return float(0.5 * c @ c + 0.5 * zeta * np.sum(dr2 * (v[:n] - x_ref) ** 2))

    def grad(v):
        c, j = parts(v)
        out = j.T @ c
        out[:n] += zeta * dr2 * (v[:n] - x_ref)
        return out

    def hess(v, y_eq=None, y_ineq=None, obj_factor=1.0):
        c, j = parts(v)
        h = j.T @ j
        h[:n, :n] += sp.hess(v[:n], c[:me] * sp.eq_scale, c[me:] * sp.ineq_scale, 0.0)
        h[np.arange(n), np.arange(n)] += zeta * dr2
        return obj_factor * h

    lb = np.concatenate([sp.lb, np.zeros(mi)])
    ub = np.concatenate([sp.ub, np.full(mi, np.inf)])
    problem = NlpProblem(lb=lb, ub=ub, objective=obj, gradient=grad, hessian=hess)
    return problem, np.concatenate([st.x, st.s])


# ---------------------------------------------------------------------------
# second-order check

def _negative_curvature(problem: NlpProblem, out: SolveOutcome, tol: float):
    """Unit direction of negative curvature of the reduced Hessian, or None."""
    x = out.primal
    lb, ub = np.asarray(problem.lb, float), np.asarray(problem.ub, float)
    n = x.size
    rows = []
    if problem.n_eq:
        rows.append(problem.eval_eq_jac(x))
    if problem.n_ineq:
        g = problem.eval_ineq(x)
        act = (g > -1e-6 * (1 + np.abs(g))) | (out.ineq_duals > tol)
        if np.any(act):
            rows.append(problem.eval_ineq_jac(x)[act])
    scale = 1.0 + np.abs(x)
    fixed = np.isfinite(lb) & (lb == ub)
    at_bound = fixed | (np.isfinite(lb) & (x - lb <= 1e-6 * scale)) \
        | (np.isfinite(ub) & (ub - x <= 1e-6 * scale)) | (np.abs(out.bound_duals) > tol)
    if np.any(at_bound):
        rows.append(np.eye(n)[at_bound])
    a = np.vstack(rows) if rows else np.zeros((0, n))
    z = null_space(a) if a.shape[0] else np.eye(n)
    if z.shape[1] == 0:
        return None
    h = problem.hessian(x, out.eq_duals, out.ineq_duals, 1.0)
    hr = z.T @ h @ z
    hr = 0.5 * (hr + hr.T)
    vals, vecs = np.linalg.eigh(hr)
    if vals[0] >= -1e-6 * max(1.0, np.max(np.abs(vals))):
        return None
    d = z @ vecs[:, 0]
    return d / np.max(np.abs(d))


def _core(problem: NlpProblem, x0, opts: SolveOptions) -> SolveOutcome:
    sp = _Scaled(problem, x0, opts)
    ipm = _Ipm(sp, opts)
    status, st, res, yh, yg, zf, its = ipm.run()
    x = sp.full(st.x)
    return SolveOutcome(status=status, primal=x, eq_duals=yh, ineq_duals=yg, bound_duals=zf,
                        objective=float(problem.objective(x)), kkt_residual=res, iterations=its,
                        trace=ipm.trace)


def minimize(problem: NlpProblem, x0, opts: SolveOptions | None = None) -> SolveOutcome:
    """Local minimization of ``problem`` from ``x0``.

    Returns the converged point with ``status == LocalOptimal``, or the
    iterate with the smallest KKT residual seen together with the failure
    status.  Deterministic for identical inputs.
    """
    opts = opts or SolveOptions()
    x0 = np.asarray(x0, float)
    if x0.shape != (problem.n_vars,):
        raise ValueError(f"start point has shape {x0.shape}, expected ({problem.n_vars},)")
    if not np.all(np.isfinite(x0)):
        raise ValueError("start point must be finite")
    out = _core(problem, x0, opts)
    iterations = out.iterations
    escapes = opts.escapes
    while out.ok and escapes > 0:
        d = _negative_curvature(problem, out, opts.tol)
        if d is None:
            break
        escapes -= 1
        best = None
        for sign in (1.0, -1.0):
            trial = _core(problem, out.primal + sign * opts.escape_step * d, opts)
            iterations += trial.iterations
            if trial.ok and (best is None or trial.objective < best.objective):
                best = trial
        if best is None or best.objective >= out.objective - 1e-12 * max(1.0, abs(out.objective)):
            break
        best.trace = out.trace + best.trace
        out = best
    out.iterations = iterations
    return out


def write_trace_csv(outcome: SolveOutcome, path) -> None:
    """Per-iteration log: iteration, objective, KKT residual, barrier parameter."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "kkt_residual", "barrier"])
        for row in outcome.trace:
            w.writerow([row["iteration"], repr(row["objective"]), repr(row["kkt_residual"]),
                        repr(row["barrier"])])
