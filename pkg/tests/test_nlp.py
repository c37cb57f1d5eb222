import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acopf_escape import cases
from acopf_escape.casefile import CaseFileWarning, load_case
from acopf_escape.model import NlpProblem, assemble_acopf, flat_start
from acopf_escape.nlp import SolveOptions, Status, kkt_residual, minimize, write_trace_csv

from conftest import (TWOBUS_MU_STAR, TWOBUS_RIDGE, TWOBUS_THETA_BAR, TWOBUS_THETA_STAR)

TIGHT = SolveOptions(tol=1e-8)


def quadratic(target=3.0, lo=0.0, hi=10.0):
    return NlpProblem(
        lb=np.array([lo]), ub=np.array([hi]),
        objective=lambda x: float((x[0] - target) ** 2),
        gradient=lambda x: np.array([2 * (x[0] - target)]),
        hessian=lambda x, y_eq=None, y_ineq=None, obj_factor=1.0: np.array([[2.0 * obj_factor]]),
    )


def circle_problem():
    """min x + y  s.t.  x^2 + y^2 = 2, x <= 5; solution (-1, -1), multiplier 1/2."""
    return NlpProblem(
        lb=np.array([-10.0, -10.0]), ub=np.array([5.0, 10.0]),
        objective=lambda x: float(x[0] + x[1]),
        gradient=lambda x: np.ones(2),
        hessian=lambda x, y_eq=None, y_ineq=None, obj_factor=1.0:
            2.0 * (0.0 if y_eq is None else y_eq[0]) * np.eye(2),
        n_eq=1, eq=lambda x: np.array([x @ x - 2.0]), eq_jac=lambda x: 2.0 * x[None, :],
    )


def two_bus():
    net = cases.fix_voltages(cases.twobus())
    prob = assemble_acopf(net)
    return net, prob, prob.meta["layout"]


def solve_two_bus_from(lag, opts=TIGHT):
    net, prob, lay = two_bus()
    p = flat_start(net)
    p.theta[1] = -lag
    out = minimize(prob, lay.pack(p), opts)
    return out, -lay.unpack(out.primal).theta[1]


def wrap_lag(lag):
    return (lag + math.pi / 2) % (2 * math.pi) - math.pi / 2


def test_one_variable_quadratic():
    out = minimize(quadratic(), np.array([0.0]))
    assert out.status is Status.LOCAL_OPTIMAL
    assert out.primal[0] == pytest.approx(3.0, abs=1e-4)
    assert out.objective == pytest.approx(0.0, abs=1e-7)


def test_active_bound_gives_positive_bound_dual():
    out = minimize(quadratic(target=-1.0), np.array([5.0]), TIGHT)
    assert out.ok
    assert out.primal[0] == pytest.approx(0.0, abs=1e-7)
    assert out.bound_duals[0] == pytest.approx(2.0, rel=1e-6)


def test_equality_multiplier():
    out = minimize(circle_problem(), np.array([0.5, -0.3]), TIGHT)
    assert out.ok
    assert out.primal == pytest.approx([-1.0, -1.0], abs=1e-7)
    # grad f + y grad h = 0 with grad h = 2x
    assert out.eq_duals[0] == pytest.approx(0.5, rel=1e-6)


def test_two_bus_flat_start_reaches_global_root():
    out, lag = solve_two_bus_from(0.0)
    assert out.ok
    assert lag == pytest.approx(TWOBUS_THETA_STAR, abs=1e-6)
    # balance written demand minus supply: the load-bus multiplier is the price
    assert out.eq_duals[1] == pytest.approx(TWOBUS_MU_STAR, rel=1e-6)
    assert out.eq_duals[1] > 0


def test_two_bus_start_past_ridge_reaches_local_root():
    out, lag = solve_two_bus_from(2.5)
    assert out.ok
    assert lag == pytest.approx(TWOBUS_THETA_BAR, abs=1e-6)


@settings(max_examples=40)
@given(st.floats(-math.pi / 2 + 1e-3, 3 * math.pi / 2 - 1e-3))
def test_start_determines_root(start):
    out, lag = solve_two_bus_from(start)
    assert out.ok
    in_global_basin = start < TWOBUS_RIDGE or start > TWOBUS_RIDGE + math.pi
    want = TWOBUS_THETA_STAR if in_global_basin else TWOBUS_THETA_BAR
    assert wrap_lag(lag) == pytest.approx(want, abs=1e-6)


def test_cost_sensitivity_equals_price():
    def cost(load):
        net = cases.fix_voltages(cases.twobus(load=load))
        prob = assemble_acopf(net)
        out = minimize(prob, prob.meta["layout"].pack(flat_start(net)), SolveOptions(tol=1e-10))
        return out.objective, out.eq_duals[1]

    c0, mu = cost(1.0)
    c1, _ = cost(1.0 + 1e-4)
    assert (c1 - c0) / 1e-4 == pytest.approx(mu, rel=0.05)


def test_local_optimal_meets_tolerance_and_sign_conditions():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CaseFileWarning)
        net = load_case("case9")
    prob = assemble_acopf(net)
    out = minimize(prob, prob.meta["layout"].pack(flat_start(net)))
    assert out.ok
    assert out.kkt_residual <= 1e-4
    assert kkt_residual(prob, out.primal, out.eq_duals, out.ineq_duals, out.bound_duals) <= 1e-4
    assert np.all(out.ineq_duals >= -1e-4)
    g = prob.ineq(out.primal)
    assert np.max(np.abs(out.ineq_duals * g)) <= 1e-4


def test_perturbed_solution_fails_kkt():
    net, prob, lay = two_bus()
    out, _ = solve_two_bus_from(0.0)
    x = out.primal.copy()
    x[0] += 0.1
    assert kkt_residual(prob, x, out.eq_duals, out.ineq_duals) > 1e-4


def test_kkt_of_unconstrained_stationary_point_is_zero():
    prob = quadratic(lo=-np.inf, hi=np.inf)
    assert kkt_residual(prob, np.array([3.0]), np.zeros(0), np.zeros(0)) == 0.0


def test_kkt_dimension_mismatch():
    with pytest.raises(ValueError):
        kkt_residual(quadratic(), np.array([1.0, 2.0]), np.zeros(0), np.zeros(0))


def test_iteration_cap():
    net, prob, lay = two_bus()
    out = minimize(prob, lay.pack(flat_start(net)), SolveOptions(max_iter=1, escapes=0))
    assert out.status is Status.MAX_ITER


def test_infeasible_equality_reported():
    prob = NlpProblem(
        lb=np.array([0.0]), ub=np.array([1.0]), objective=lambda x: float(x[0]),
        gradient=lambda x: np.ones(1),
        hessian=lambda x, y_eq=None, y_ineq=None, obj_factor=1.0: np.zeros((1, 1)),
        n_eq=1, eq=lambda x: np.array([x[0] - 2.0]), eq_jac=lambda x: np.ones((1, 1)),
    )
    out = minimize(prob, np.array([0.5]))
    assert not out.ok
    assert out.status in (Status.INFEASIBLE, Status.MAX_ITER)


def test_saddle_start_escapes_to_minimum():
    # x^4/4 - x^2/2 has a stationary maximum at 0 and minima at +-1
    prob = NlpProblem(
        lb=np.array([-5.0]), ub=np.array([5.0]), objective=lambda x: float(x[0] ** 4 / 4 - x[0] ** 2 / 2),
        gradient=lambda x: np.array([x[0] ** 3 - x[0]]),
        hessian=lambda x, y_eq=None, y_ineq=None, obj_factor=1.0: np.array([[obj_factor * (3 * x[0] ** 2 - 1)]]),
    )
    out = minimize(prob, np.array([0.0]), TIGHT)
    assert out.ok
    assert abs(out.primal[0]) == pytest.approx(1.0, abs=1e-6)


def test_bad_start_rejected():
    with pytest.raises(ValueError):
        minimize(quadratic(), np.array([np.nan]))
    with pytest.raises(ValueError):
        minimize(quadratic(), np.zeros(2))


@pytest.mark.parametrize("kwargs", [{"tol": 0.0}, {"tol": -1.0}, {"max_iter": 0}])
def test_options_validated(kwargs):
    with pytest.raises(ValueError):
        SolveOptions(**kwargs)


def test_deterministic():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CaseFileWarning)
        net = load_case("case9")
    prob = assemble_acopf(net)
    x0 = prob.meta["layout"].pack(flat_start(net))
    a = minimize(prob, x0, SolveOptions(record_trace=True))
    b = minimize(prob, x0, SolveOptions(record_trace=True))
    assert np.array_equal(a.primal, b.primal)
    assert np.array_equal(a.eq_duals, b.eq_duals)
    assert a.trace == b.trace


def test_trace_csv(tmp_path):
    out = minimize(quadratic(), np.array([0.0]), SolveOptions(record_trace=True))
    path = tmp_path / "trace.csv"
    write_trace_csv(out, path)
    rows = path.read_text().splitlines()
    assert rows[0] == "iteration,objective,kkt_residual,barrier"
    assert len(rows) == len(out.trace) + 1 > 1
