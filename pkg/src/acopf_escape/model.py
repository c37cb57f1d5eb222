"""ACOPF model assembly with analytic derivatives.

Branch flows use the ``g - jb`` convention of :mod:`acopf_escape.casefile`::

    P_ij = V_i^2 g - V_i V_j (g cos t_ij - b sin t_ij)
    Q_ij = V_i^2 b_hat - V_i V_j (b cos t_ij + g sin t_ij)

Power balance enters the NLP as ``demand - supply = 0``::

    h_P[i] = P^D_i + sum_j P_ij - sum_{gens at i} P^G
    h_Q[i] = Q^D_i + sum_j Q_ij - sum_{gens at i} Q^G

The engine's Lagrangian is ``f + y^T h``, so the equality multipliers of
this orientation are exactly the marginal prices ``mu_p, mu_q`` (increasing
``P^D_i`` by ``d`` raises the optimal cost by ``mu_p[i] * d``), and the
partial Lagrangian is ``f + mu^T h``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .casefile import Network

__all__ = [
    "AcopfLayout",
    "Derivatives",
    "DualSet",
    "NlpProblem",
    "PrimalPoint",
    "assemble_acopf",
    "assemble_partial_lagrangian",
    "assemble_reduced",
    "balance_residuals",
    "balanced_dispatch",
    "derivatives",
    "flat_start",
    "flow_p",
    "flow_q",
    "lagrangian_of",
    "partial_lagrangian_objective",
    "penalized_objective",
    "penalized_of",
    "total_cost",
]


# --------------------------------------------------------------------------
# scalar flow equations

def flow_p(vi, vj, theta_ij, g, b):
    """Active power sent from bus i towards bus j."""
    return vi * vi * g - vi * vj * (g * np.cos(theta_ij) - b * np.sin(theta_ij))


def flow_q(vi, vj, theta_ij, g, b, b_hat):
    """Reactive power sent from bus i towards bus j."""
    return vi * vi * b_hat - vi * vj * (b * np.cos(theta_ij) + g * np.sin(theta_ij))


# --------------------------------------------------------------------------
# containers

@dataclass
class PrimalPoint:
    theta: np.ndarray
    v: np.ndarray
    pg: np.ndarray
    qg: np.ndarray

    def copy(self) -> "PrimalPoint":
        return PrimalPoint(self.theta.copy(), self.v.copy(), self.pg.copy(), self.qg.copy())

    def wrapped(self) -> "PrimalPoint":
        """Same operating point with angles mapped into (-pi, pi]."""
        th = -((-self.theta + np.pi) % (2 * np.pi) - np.pi)
        return PrimalPoint(th, self.v.copy(), self.pg.copy(), self.qg.copy())

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in ("theta", "v", "pg", "qg")}


@dataclass
class DualSet:
    mu_p: np.ndarray
    mu_q: np.ndarray
    bound_duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    flow_duals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def zeros(cls, net: Network) -> "DualSet":
        return cls(np.zeros(net.n_bus), np.zeros(net.n_bus))

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist()
                for k in ("mu_p", "mu_q", "bound_duals", "flow_duals")}


@dataclass(frozen=True)
class NlpProblem:
    """A smooth program ``min f(x)  s.t.  h(x) = 0, g(x) <= 0, lb <= x <= ub``.

    ``hessian(x, y_eq, y_ineq, obj_factor)`` returns the dense Hessian of
    ``obj_factor * f + y_eq . h + y_ineq . g``.
    """

    lb: np.ndarray
    ub: np.ndarray
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[..., np.ndarray]
    n_eq: int = 0
    eq: Optional[Callable[[np.ndarray], np.ndarray]] = None
    eq_jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    n_ineq: int = 0
    ineq: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ineq_jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    labels: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_vars(self) -> int:
        return len(self.lb)

    def eval_eq(self, x):
        return self.eq(x) if self.n_eq else np.zeros(0)

    def eval_eq_jac(self, x):
        return self.eq_jac(x) if self.n_eq else np.zeros((0, self.n_vars))

    def eval_ineq(self, x):
        return self.ineq(x) if self.n_ineq else np.zeros(0)

    def eval_ineq_jac(self, x):
        return self.ineq_jac(x) if self.n_ineq else np.zeros((0, self.n_vars))


# --------------------------------------------------------------------------
# vectorized branch-end kernel

class _Ends:
    """Directed branch ends (each branch contributes i->j and j->i)."""

    def __init__(self, net: Network):
        br = net.branches
        f = np.array([b.f for b in br], dtype=int)
        t = np.array([b.t for b in br], dtype=int)
        g = np.array([b.g for b in br])
        b = np.array([b.b for b in br])
        bh = np.array([b.b_hat for b in br])
        smax = np.array([b.s_max for b in br])
        self.i = np.concatenate([f, t])
        self.j = np.concatenate([t, f])
        self.g = np.concatenate([g, g])
        self.b = np.concatenate([b, b])
        self.bh = np.concatenate([bh, bh])
        self.smax = np.concatenate([smax, smax])
        self.n_bus = net.n_bus
        self.limited = np.flatnonzero(self.smax > 0)

    def state(self, theta, v):
        d = theta[self.i] - theta[self.j]
        c, s = np.cos(d), np.sin(d)
        A = self.g * c - self.b * s
        B = self.b * c + self.g * s
        vi, vj = v[self.i], v[self.j]
        P = vi * vi * self.g - vi * vj * A
        Q = vi * vi * self.bh - vi * vj * B
        return vi, vj, A, B, P, Q

    def local_grads(self, theta, v):
        """Gradients of P, Q w.r.t. (theta_i, theta_j, V_i, V_j); shape (E, 4)."""
        vi, vj, A, B, P, Q = self.state(theta, v)
        vv = vi * vj
        dP = np.stack([vv * B, -vv * B, 2 * vi * self.g - vj * A, -vi * A], axis=1)
        dQ = np.stack([-vv * A, vv * A, 2 * vi * self.bh - vj * B, -vi * B], axis=1)
        return P, Q, dP, dQ

    def local_hess(self, theta, v, wp, wq, wlim=None):
        """Per-end 4x4 Hessians of ``wp*P + wq*Q + wlim*(P^2+Q^2)``."""
        vi, vj, A, B, P, Q = self.state(theta, v)
        vv = vi * vj
        # d/dtheta_i = d/dd, d/dtheta_j = -d/dd
        sgn = np.array([1.0, -1.0])
        E = len(vi)
        H = np.zeros((E, 4, 4))

        def add(wt, dd, ddvi, ddvj, vivi, vivj):
            H[:, :2, :2] += (wt * dd)[:, None, None] * np.outer(sgn, sgn)
            H[:, :2, 2] += (wt * ddvi)[:, None] * sgn
            H[:, 2, :2] += (wt * ddvi)[:, None] * sgn
            H[:, :2, 3] += (wt * ddvj)[:, None] * sgn
            H[:, 3, :2] += (wt * ddvj)[:, None] * sgn
            H[:, 2, 2] += wt * vivi
            H[:, 2, 3] += wt * vivj
            H[:, 3, 2] += wt * vivj

        wp_eff = np.asarray(wp, dtype=float) * np.ones(E)
        wq_eff = np.asarray(wq, dtype=float) * np.ones(E)
        if wlim is not None:
            wp_eff = wp_eff + 2 * wlim * P
            wq_eff = wq_eff + 2 * wlim * Q
        add(wp_eff, vv * A, vj * B, vi * B, 2 * self.g, -A)
        add(wq_eff, vv * B, -vj * A, -vi * A, 2 * self.bh, -B)
        if wlim is not None:
            _, _, dP, dQ = self.local_grads(theta, v)
            H += 2 * wlim[:, None, None] * (dP[:, :, None] * dP[:, None, :]
                                            + dQ[:, :, None] * dQ[:, None, :])
        return H

    def injections(self, theta, v):
        _, _, _, _, P, Q = self.state(theta, v)
        nb = self.n_bus
        return np.bincount(self.i, P, nb), np.bincount(self.i, Q, nb)


# --------------------------------------------------------------------------
# variable layout

class AcopfLayout:
    """Map between :class:`PrimalPoint` and the ACOPF variable vector.

    Vector order: non-reference angles, all voltage magnitudes, ``P^G``, ``Q^G``.
    """

    def __init__(self, net: Network):
        nb, ng = net.n_bus, net.n_gen
        self.net = net
        self.nb, self.ng = nb, ng
        self.ref = net.ref_bus
        self.ang_buses = np.array([k for k in range(nb) if k != self.ref], dtype=int)
        self.n_ang = len(self.ang_buses)
        self.sl_v = slice(self.n_ang, self.n_ang + nb)
        self.sl_pg = slice(self.sl_v.stop, self.sl_v.stop + ng)
        self.sl_qg = slice(self.sl_pg.stop, self.sl_pg.stop + ng)
        self.n = self.sl_qg.stop
        # column of every full-state coordinate (theta_all, v, pg, qg); -1 for ref angle
        col_theta = np.full(nb, -1, dtype=int)
        col_theta[self.ang_buses] = np.arange(self.n_ang)
        self.col_theta = col_theta
        self.col_v = np.arange(self.sl_v.start, self.sl_v.stop)
        self.gen_bus = np.array([g.bus for g in net.gens], dtype=int)

    def pack(self, p: PrimalPoint) -> np.ndarray:
        x = np.empty(self.n)
        x[: self.n_ang] = np.asarray(p.theta, dtype=float)[self.ang_buses] - p.theta[self.ref]
        x[self.sl_v] = p.v
        x[self.sl_pg] = p.pg
        x[self.sl_qg] = p.qg
        return x

    def unpack(self, x) -> PrimalPoint:
        x = np.asarray(x, dtype=float)
        th = np.zeros(self.nb)
        th[self.ang_buses] = x[: self.n_ang]
        return PrimalPoint(th, x[self.sl_v].copy(), x[self.sl_pg].copy(), x[self.sl_qg].copy())

    def theta_v(self, x):
        th = np.zeros(self.nb)
        th[self.ang_buses] = x[: self.n_ang]
        return th, x[self.sl_v]

    def labels(self) -> tuple[str, ...]:
        ids = [b.id for b in self.net.buses]
        out = [f"theta[{ids[k]}]" for k in self.ang_buses]
        out += [f"V[{i}]" for i in ids]
        out += [f"PG[{k}]@{ids[g]}" for k, g in enumerate(self.gen_bus)]
        out += [f"QG[{k}]@{ids[g]}" for k, g in enumerate(self.gen_bus)]
        return tuple(out)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        net = self.net
        lb = np.empty(self.n)
        ub = np.empty(self.n)
        lb[: self.n_ang], ub[: self.n_ang] = -np.inf, np.inf
        lb[self.sl_v] = [b.v_min for b in net.buses]
        ub[self.sl_v] = [b.v_max for b in net.buses]
        lb[self.sl_pg] = [g.p_min for g in net.gens]
        ub[self.sl_pg] = [g.p_max for g in net.gens]
        lb[self.sl_qg] = [g.q_min for g in net.gens]
        ub[self.sl_qg] = [g.q_max for g in net.gens]
        return lb, ub


def flat_start(net: Network) -> PrimalPoint:
    """Angles 0, voltages 1 p.u. (clipped to bounds), generators mid-range."""
    v = np.clip(np.ones(net.n_bus), [b.v_min for b in net.buses], [b.v_max for b in net.buses])

    def mid(lo, hi):
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        m = 0.5 * (np.clip(lo, -1e3, 1e3) + np.clip(hi, -1e3, 1e3))
        return np.clip(m, lo, hi)

    pg = mid([g.p_min for g in net.gens], [g.p_max for g in net.gens])
    qg = mid([g.q_min for g in net.gens], [g.q_max for g in net.gens])
    return PrimalPoint(np.zeros(net.n_bus), v, pg, qg)


# --------------------------------------------------------------------------
# network-level evaluations

def balance_residuals(net: Network, p: PrimalPoint) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus supply minus demand: ``dP_i = P^G_i - P^D_i - sum_j P_ij`` (and Q)."""
    ends = _Ends(net)
    pinj, qinj = ends.injections(np.asarray(p.theta, float), np.asarray(p.v, float))
    gb = np.array([g.bus for g in net.gens], dtype=int)
    pgen = np.bincount(gb, np.asarray(p.pg, float), net.n_bus) if net.n_gen else 0.0
    qgen = np.bincount(gb, np.asarray(p.qg, float), net.n_bus) if net.n_gen else 0.0
    pd = np.array([b.pd for b in net.buses])
    qd = np.array([b.qd for b in net.buses])
    return pgen - pd - pinj, qgen - qd - qinj


def balanced_dispatch(net: Network, theta, v) -> PrimalPoint:
    """Generator outputs that balance every generator bus at the state ``(theta, v)``.

    The injection a bus needs is split evenly among its generators and each
    share is clipped to that generator's bounds, so buses without enough
    capacity stay unbalanced.
    """
    theta = np.asarray(theta, float)
    v = np.asarray(v, float)
    ends = _Ends(net)
    pinj, qinj = ends.injections(theta, v)
    p_need = np.array([b.pd for b in net.buses]) + pinj
    q_need = np.array([b.qd for b in net.buses]) + qinj
    gb = np.array([g.bus for g in net.gens], dtype=int)
    count = np.bincount(gb, minlength=net.n_bus)[gb] if net.n_gen else np.zeros(0)
    pg = np.clip(p_need[gb] / np.maximum(count, 1), [g.p_min for g in net.gens],
                 [g.p_max for g in net.gens]) if net.n_gen else np.zeros(0)
    qg = np.clip(q_need[gb] / np.maximum(count, 1), [g.q_min for g in net.gens],
                 [g.q_max for g in net.gens]) if net.n_gen else np.zeros(0)
    return PrimalPoint(theta.copy(), v.copy(), pg, qg)


def total_cost(net: Network, pg) -> float:
    pg = np.asarray(pg, dtype=float)
    return float(sum(g.cost_at(pg[k]) for k, g in enumerate(net.gens)))


def partial_lagrangian_objective(net: Network, p: PrimalPoint, mu_p, mu_q) -> float:
    """Cost plus the dualized balance terms ``mu . (demand + flows - generation)``."""
    dp, dq = balance_residuals(net, p)
    return total_cost(net, p.pg) - float(np.dot(mu_p, dp)) - float(np.dot(mu_q, dq))


def penalized_objective(net: Network, p: PrimalPoint, rho: float) -> float:
    """Cost plus ``rho/2`` times the squared balance residuals."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    dp, dq = balance_residuals(net, p)
    return total_cost(net, p.pg) + 0.5 * rho * float(np.dot(dp, dp) + np.dot(dq, dq))


# --------------------------------------------------------------------------
# full ACOPF

def _acopf_parts(net: Network):
    lay = AcopfLayout(net)
    ends = _Ends(net)
    nb, ng, n = lay.nb, lay.ng, lay.n
    pd = np.array([b.pd for b in net.buses])
    qd = np.array([b.qd for b in net.buses])
    gens = net.gens
    lim = ends.limited
    n_lim = len(lim)

    # local columns of each end: theta_i, theta_j, V_i, V_j (-1 for ref angle)
    cols = np.stack([lay.col_theta[ends.i], lay.col_theta[ends.j],
                     lay.col_v[ends.i], lay.col_v[ends.j]], axis=1)
    valid = cols >= 0
    rows_e = np.repeat(np.arange(len(ends.i))[:, None], 4, axis=1)

    def cost(x):
        pg = x[lay.sl_pg]
        return float(sum(g.cost_at(pg[k]) for k, g in enumerate(gens)))

    def cost_grad(x):
        gvec = np.zeros(n)
        pg = x[lay.sl_pg]
        gvec[lay.sl_pg] = [g.marginal_cost_at(pg[k]) for k, g in enumerate(gens)]
        return gvec

    def cost_hess_diag(x):
        pg = x[lay.sl_pg]
        return np.array([g.cost_curvature_at(pg[k]) for k, g in enumerate(gens)], dtype=float)

    def eq(x):
        th, v = lay.theta_v(x)
        pinj, qinj = ends.injections(th, v)
        pgen = np.bincount(lay.gen_bus, x[lay.sl_pg], nb)
        qgen = np.bincount(lay.gen_bus, x[lay.sl_qg], nb)
        return np.concatenate([pd + pinj - pgen, qd + qinj - qgen])

    gen_cols_p = np.arange(lay.sl_pg.start, lay.sl_pg.stop)
    gen_cols_q = np.arange(lay.sl_qg.start, lay.sl_qg.stop)

    def eq_jac(x):
        th, v = lay.theta_v(x)
        _, _, dP, dQ = ends.local_grads(th, v)
        J = np.zeros((2 * nb, n))
        r = np.broadcast_to(ends.i[:, None], cols.shape)
        np.add.at(J, (r[valid], cols[valid]), dP[valid])
        np.add.at(J, (nb + r[valid], cols[valid]), dQ[valid])
        J[lay.gen_bus, gen_cols_p] -= 1.0
        J[nb + lay.gen_bus, gen_cols_q] -= 1.0
        return J

    def ineq(x):
        th, v = lay.theta_v(x)
        _, _, _, _, P, Q = ends.state(th, v)
        return P[lim] ** 2 + Q[lim] ** 2 - ends.smax[lim] ** 2

    def ineq_jac(x):
        th, v = lay.theta_v(x)
        P, Q, dP, dQ = ends.local_grads(th, v)
        loc = 2 * P[lim, None] * dP[lim] + 2 * Q[lim, None] * dQ[lim]
        J = np.zeros((n_lim, n))
        c, ok = cols[lim], valid[lim]
        r = np.broadcast_to(np.arange(n_lim)[:, None], c.shape)
        np.add.at(J, (r[ok], c[ok]), loc[ok])
        return J

    def flow_hess(x, y_eq, y_ineq):
        th, v = lay.theta_v(x)
        E = len(ends.i)
        wp = y_eq[:nb][ends.i] if y_eq is not None and len(y_eq) else np.zeros(E)
        wq = y_eq[nb:][ends.i] if y_eq is not None and len(y_eq) else np.zeros(E)
        wl = np.zeros(E)
        if n_lim and y_ineq is not None and len(y_ineq):
            wl[lim] = y_ineq
        Hl = ends.local_hess(th, v, wp, wq, wl if n_lim else None)
        H = np.zeros((n, n))
        m2 = valid[:, :, None] & valid[:, None, :]
        ci = np.broadcast_to(cols[:, :, None], Hl.shape)
        cj = np.broadcast_to(cols[:, None, :], Hl.shape)
        np.add.at(H, (ci[m2], cj[m2]), Hl[m2])
        return H

    return lay, ends, cost, cost_grad, cost_hess_diag, eq, eq_jac, ineq, ineq_jac, flow_hess


def assemble_acopf(net: Network) -> NlpProblem:
    """The full ACOPF: cost over (angles, V, P^G, Q^G) with balance equalities."""
    (lay, ends, cost, cost_grad, cost_hess_diag, eq, eq_jac, ineq, ineq_jac,
     flow_hess) = _acopf_parts(net)
    lb, ub = lay.bounds()
    if np.any(lb > ub):
        bad = [lab for lab, lo, hi in zip(lay.labels(), lb, ub) if lo > hi]
        raise ValueError(f"infeasible bounds: {bad}")

    def hessian(x, y_eq=None, y_ineq=None, obj_factor=1.0):
        H = flow_hess(x, y_eq, y_ineq)
        idx = np.arange(lay.sl_pg.start, lay.sl_pg.stop)
        H[idx, idx] += obj_factor * cost_hess_diag(x)
        return H

    return NlpProblem(
        lb=lb, ub=ub, objective=cost, gradient=cost_grad, hessian=hessian,
        n_eq=2 * lay.nb, eq=eq, eq_jac=eq_jac,
        n_ineq=len(ends.limited), ineq=ineq, ineq_jac=ineq_jac,
        labels=lay.labels(), meta={"layout": lay, "kind": "acopf"},
    )


def assemble_partial_lagrangian(net: Network, duals: DualSet) -> NlpProblem:
    """Minimize cost + mu . (balance) with the balance equalities removed.

    Bounds and flow limits are kept; variables are those of :func:`assemble_acopf`.
    """
    mu = np.concatenate([np.asarray(duals.mu_p, float), np.asarray(duals.mu_q, float)])
    if mu.shape != (2 * net.n_bus,) or not np.all(np.isfinite(mu)):
        raise ValueError("duals must be finite with one entry per bus")
    base = assemble_acopf(net)
    prob = lagrangian_of(base, mu)
    return NlpProblem(**{**prob.__dict__, "meta": {**base.meta, "kind": "partial_lagrangian",
                                                    "mu": mu}})


# --------------------------------------------------------------------------
# generic transforms of an equality-constrained problem

def lagrangian_of(problem: NlpProblem, y_eq) -> NlpProblem:
    """``f + y . h`` with the equalities dualized (other constraints kept)."""
    y = np.asarray(y_eq, dtype=float)

    def obj(x):
        return problem.objective(x) + float(y @ problem.eval_eq(x))

    def grad(x):
        return problem.gradient(x) + problem.eval_eq_jac(x).T @ y

    def hess(x, y_eq=None, y_ineq=None, obj_factor=1.0):
        return problem.hessian(x, obj_factor * y, y_ineq, obj_factor)

    return NlpProblem(lb=problem.lb, ub=problem.ub, objective=obj, gradient=grad,
                      hessian=hess, n_ineq=problem.n_ineq, ineq=problem.ineq,
                      ineq_jac=problem.ineq_jac, labels=problem.labels,
                      meta={**problem.meta, "kind": "lagrangian"})


def penalized_of(problem: NlpProblem, rho: float) -> NlpProblem:
    """``f + rho/2 |h|^2`` with the equalities removed."""
    if not rho > 0:
        raise ValueError("rho must be positive")

    def obj(x):
        h = problem.eval_eq(x)
        return problem.objective(x) + 0.5 * rho * float(h @ h)

    def grad(x):
        return problem.gradient(x) + rho * problem.eval_eq_jac(x).T @ problem.eval_eq(x)

    def hess(x, y_eq=None, y_ineq=None, obj_factor=1.0):
        J = problem.eval_eq_jac(x)
        H = problem.hessian(x, obj_factor * rho * problem.eval_eq(x), y_ineq, obj_factor)
        return H + obj_factor * rho * (J.T @ J)

    return NlpProblem(lb=problem.lb, ub=problem.ub, objective=obj, gradient=grad,
                      hessian=hess, n_ineq=problem.n_ineq, ineq=problem.ineq,
                      ineq_jac=problem.ineq_jac, labels=problem.labels,
                      meta={**problem.meta, "kind": "penalized", "rho": rho})


# --------------------------------------------------------------------------
# fixed-voltage, active-power reductions

def assemble_reduced(net: Network, v=None) -> NlpProblem:
    """Fixed-voltage, active-power-only reduction of the ACOPF.

    Variables are the angle *lags* ``phi_k = theta_ref - theta_k`` of every
    non-reference bus (a load bus lagging the slack has positive ``phi``).
    Generation at each generator bus (one with a nonzero active range) is
    substituted from its balance equation, so the objective is ``sum_i c_i(P^D_i + sum_j P_ij)`` over
    generator buses and the equalities are ``P^D_k + sum_j P_kj = 0`` at the
    remaining buses.  Reactive power and all bounds are dropped.
    """
    nb = net.n_bus
    v = np.array([1.0] * nb if v is None else v, dtype=float)
    ends = _Ends(net)
    gen_at: dict[int, int] = {}
    for k, gen in enumerate(net.gens):
        if not gen.p_max > gen.p_min:
            continue  # condensers carry no active power
        if gen.bus in gen_at:
            raise ValueError(f"bus {net.buses[gen.bus].id} has more than one generator")
        gen_at[gen.bus] = k
    gbus = np.array(sorted(gen_at), dtype=int)
    lbus = np.array([k for k in range(nb) if k not in gen_at], dtype=int)
    pd = np.array([b.pd for b in net.buses])
    free = np.array([k for k in range(nb) if k != net.ref_bus], dtype=int)
    nv = len(free)

    def theta(x):
        th = np.zeros(nb)
        th[free] = -np.asarray(x, float)
        return th

    def inj(x):
        return pd + ends.injections(theta(x), v)[0]

    def inj_jac(x):
        # d(bus injection)/d(phi): minus the theta-derivative
        _, _, dP, _ = ends.local_grads(theta(x), v)
        Jt = np.zeros((nb, nb))
        np.add.at(Jt, (ends.i, ends.i), dP[:, 0])
        np.add.at(Jt, (ends.i, ends.j), dP[:, 1])
        return -Jt[:, free]

    def inj_hess(x, w):
        Hl = ends.local_hess(theta(x), v, w[ends.i], np.zeros(len(ends.i)))[:, :2, :2]
        Ht = np.zeros((nb, nb))
        idx = np.stack([ends.i, ends.j], axis=1)
        np.add.at(Ht, (idx[:, :, None].repeat(2, 2), idx[:, None, :].repeat(2, 1)), Hl)
        return Ht[np.ix_(free, free)]

    gens = [net.gens[gen_at[k]] for k in gbus]

    def obj(x):
        p = inj(x)[gbus]
        return float(sum(g.cost_at(p[k]) for k, g in enumerate(gens)))

    def grad(x):
        p = inj(x)[gbus]
        c1 = np.array([g.marginal_cost_at(p[k]) for k, g in enumerate(gens)])
        return inj_jac(x)[gbus].T @ c1

    def eq(x):
        return inj(x)[lbus]

    def eq_jac(x):
        return inj_jac(x)[lbus]

    def hess(x, y_eq=None, y_ineq=None, obj_factor=1.0):
        p = inj(x)[gbus]
        w = np.zeros(nb)
        w[gbus] = obj_factor * np.array([g.marginal_cost_at(p[k]) for k, g in enumerate(gens)])
        if y_eq is not None and len(lbus):
            w[lbus] += y_eq
        H = inj_hess(x, w)
        Jg = inj_jac(x)[gbus]
        c2 = np.array([g.cost_curvature_at(p[k]) for k, g in enumerate(gens)])
        return H + obj_factor * (Jg.T * c2) @ Jg

    ids = [b.id for b in net.buses]
    return NlpProblem(
        lb=np.full(nv, -np.inf), ub=np.full(nv, np.inf), objective=obj, gradient=grad,
        hessian=hess, n_eq=len(lbus), eq=eq, eq_jac=eq_jac,
        labels=tuple(f"phi[{ids[k]}]" for k in free),
        meta={"kind": "reduced", "load_buses": lbus, "gen_buses": gbus, "free_buses": free,
              "v": v},
    )


# --------------------------------------------------------------------------
# derivative bundle

@dataclass
class Derivatives:
    gradient: np.ndarray
    eq_jacobian: np.ndarray
    hess_objective: np.ndarray
    hess_lagrangian: np.ndarray


def derivatives(problem: NlpProblem, x, y_eq=None, y_ineq=None) -> Derivatives:
    """Analytic gradient, equality Jacobian, and Hessians at ``x``.

    The Lagrangian Hessian uses ``f + y_eq . h + y_ineq . g`` (zeros by default).
    """
    x = np.asarray(x, dtype=float)
    y_eq = np.zeros(problem.n_eq) if y_eq is None else np.asarray(y_eq, float)
    y_ineq = np.zeros(problem.n_ineq) if y_ineq is None else np.asarray(y_ineq, float)
    return Derivatives(
        gradient=problem.gradient(x),
        eq_jacobian=problem.eval_eq_jac(x),
        hess_objective=problem.hessian(x, np.zeros(problem.n_eq), np.zeros(problem.n_ineq)),
        hess_lagrangian=problem.hessian(x, y_eq, y_ineq),
    )
