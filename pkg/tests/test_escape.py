import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acopf_escape import cases, escape
from acopf_escape.casefile import CaseFileWarning, load_case
from acopf_escape.model import PrimalPoint, balance_residuals, flat_start
from acopf_escape.nlp import SolveOptions
from acopf_escape.oracle import multistart_enumerate, two_bus_roots

from conftest import TWOBUS_COST_BAR, TWOBUS_COST_STAR, TWOBUS_THETA_BAR, TWOBUS_THETA_STAR

TIGHT = SolveOptions(tol=1e-8)

# The two tree solutions (buses 2 and 3 lagging the slack), found by multistart.
TREE_BEST_COST = 1.644850
TREE_OTHER_COST = 1.653030


def two_bus_at(lag, **kw):
    net = cases.fix_voltages(cases.twobus(**kw))
    p = flat_start(net)
    p.theta[1] = -lag
    return net, p


def case9():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CaseFileWarning)
        return load_case("case9")


def test_escape_from_local_root_in_one_outer_iteration():
    net, p = two_bus_at(TWOBUS_THETA_BAR)
    trace = escape.run(net, p, max_outer=5, opts=TIGHT)
    costs = trace.acopf_costs()
    assert costs[0] == pytest.approx(TWOBUS_COST_BAR, rel=1e-6)
    assert costs[1] == pytest.approx(TWOBUS_COST_STAR, rel=1e-6)
    assert trace.best_outer == 1
    assert trace.final_status == escape.CONVERGED
    assert -trace.best.primal.theta[1] == pytest.approx(TWOBUS_THETA_STAR, abs=1e-6)
    stages = [r.stage for r in trace.iterations[:3]]
    assert stages == [escape.ACOPF_SOLVE, escape.LAGRANGIAN_SOLVE, escape.WARM_STARTED_ACOPF_SOLVE]


@settings(max_examples=25)
@given(st.floats(0.2, 3.0), st.floats(1.0, 8.0), st.floats(0.05, 0.9))
def test_escape_property_over_random_lines(g, b, frac):
    load = frac * (math.hypot(g, b) - g)
    star, bar = two_bus_roots(g, b, load)
    net, p = two_bus_at(bar, g=g, b=b, load=load)
    trace = escape.run(net, p, max_outer=5, opts=TIGHT)
    assert trace.best_outer == 1
    star_cost = load + 2 * g * (1 - math.cos(star))
    assert trace.best.cost == pytest.approx(star_cost, rel=1e-6)


def test_start_at_global_terminates_immediately():
    net, p = two_bus_at(TWOBUS_THETA_STAR)
    trace = escape.run(net, p, max_outer=5, opts=TIGHT)
    assert trace.outer_iterations == 1
    assert trace.final_status == escape.CONVERGED
    assert trace.best.cost == pytest.approx(TWOBUS_COST_STAR, rel=1e-6)


def test_tree_escape_from_higher_solution():
    net = cases.threebus_tree()
    enum = multistart_enumerate(net, 30, seed=1, opts=TIGHT, angle_range=math.pi)
    costs = enum.costs
    assert costs[0] == pytest.approx(TREE_BEST_COST, abs=1e-5)
    assert any(c == pytest.approx(TREE_OTHER_COST, abs=1e-5) for c in costs)
    for cluster in enum.clusters[1:]:
        trace = escape.run(net, cluster.primal, max_outer=5, opts=TIGHT)
        assert trace.best.cost == pytest.approx(costs[0], rel=1e-6)
        assert trace.best_outer == 1


def test_costs_never_increase_on_nine_bus():
    net = case9()
    for init in escape.random_inits(net, 4, seed=2):
        trace = escape.run(net, init, max_outer=5)
        costs = trace.acopf_costs()
        assert all(b <= a for a, b in zip(costs, costs[1:]))
        direct = trace.iterations[0].cost
        assert trace.best.cost <= direct
        dp, dq = balance_residuals(net, trace.best.primal)
        assert max(np.max(np.abs(dp)), np.max(np.abs(dq))) <= 1e-4


def test_solver_failure_keeps_completed_stages():
    net, p = two_bus_at(0.0, load=4.5)  # beyond the line's transfer limit
    trace = escape.run(net, p, max_outer=3, opts=SolveOptions(max_iter=50))
    assert trace.final_status == escape.SOLVER_FAILURE
    assert len(trace.iterations) >= 1
    assert trace.best is None


def test_max_outer_reached():
    net, p = two_bus_at(TWOBUS_THETA_BAR)
    trace = escape.run(net, p, max_outer=1, opts=TIGHT)
    assert trace.final_status == escape.MAX_OUTER_ITERS
    assert trace.best.cost == pytest.approx(TWOBUS_COST_STAR, rel=1e-6)


def test_run_argument_checks():
    net, p = two_bus_at(0.0)
    with pytest.raises(ValueError):
        escape.run(net, p, max_outer=0)
    p.theta[0] = 0.3
    with pytest.raises(ValueError):
        escape.run(net, p)


def test_random_inits_within_bounds_and_seeded():
    net = case9()
    a = escape.random_inits(net, 20, seed=9)
    b = escape.random_inits(net, 20, seed=9)
    for p, q in zip(a, b):
        assert np.array_equal(p.theta, q.theta) and np.array_equal(p.pg, q.pg)
        assert p.theta[net.ref_bus] == 0.0
        assert np.all(np.abs(p.theta) <= escape.DEFAULT_ANGLE_RANGE)
        assert all(bus.v_min <= v <= bus.v_max for bus, v in zip(net.buses, p.v))
        assert all(g.p_min <= x <= g.p_max for g, x in zip(net.gens, p.pg))
    with pytest.raises(ValueError):
        escape.random_inits(net, 0, seed=1)


def test_single_trace_aggregate():
    net, p = two_bus_at(TWOBUS_THETA_BAR)
    traces, summary = escape.multi_run(net, [p], max_outer=5, opts=TIGHT)
    costs = traces[0].acopf_costs()
    assert summary.best_cost == min(costs)
    assert summary.fraction_at_best == [0.0] + [1.0] * (len(costs) - 1)
    assert summary.mean_normalized_cost == pytest.approx([c / min(costs) for c in costs])
    assert summary.n_traces == 1 and summary.n_failed == 0


def test_summary_carries_costs_forward():
    def trace(costs):
        t = escape.EscapeTrace()
        for k, c in enumerate(costs):
            stage = escape.ACOPF_SOLVE if k == 0 else escape.WARM_STARTED_ACOPF_SOLVE
            t.iterations.append(escape.StageRecord(max(k, 1), stage, c, c, None, None,
                                                   "LocalOptimal", 0.0, 1, 0.0))
        t.final_status = escape.CONVERGED
        return t

    s = escape.summarize([trace([2.0, 1.0]), trace([1.0]), trace([3.0, 2.0, 1.0])])
    assert s.best_cost == 1.0
    assert s.fraction_at_best == pytest.approx([1 / 3, 2 / 3, 1.0])
    assert s.mean_normalized_cost == pytest.approx([2.0, 4 / 3, 1.0])


def test_reference_cost_joins_best():
    net, p = two_bus_at(TWOBUS_THETA_STAR)
    _, summary = escape.multi_run(net, [p], opts=TIGHT, reference_cost=0.5)
    assert summary.best_cost == 0.5
    assert summary.fraction_at_best[-1] == 0.0


def test_parallel_matches_serial():
    net = case9()
    inits = escape.random_inits(net, 3, seed=4)
    t1, s1 = escape.multi_run(net, inits, max_outer=3, jobs=1)
    t2, s2 = escape.multi_run(net, inits, max_outer=3, jobs=2)
    assert s1.to_dict() == s2.to_dict()
    assert [t.acopf_costs() for t in t1] == [t.acopf_costs() for t in t2]


def test_trace_csv_and_summary(tmp_path):
    net, p = two_bus_at(TWOBUS_THETA_BAR)
    trace = escape.run(net, p, opts=TIGHT)
    escape.write_trace_csv(trace, tmp_path / "t.csv", include_timing=False, preamble={"seed": 3})
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "# seed,3"
    assert lines[1] == "outer,stage,status,cost,kkt_residual"
    assert len(lines) == 2 + len(trace.iterations)
    escape.write_trace_csv(trace, tmp_path / "w.csv")
    assert (tmp_path / "w.csv").read_text().splitlines()[0].endswith(",wall_ms")
    escape.write_summary_json(trace, tmp_path / "s.json")
    import json

    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["iterations_to_best"] == 1
    assert doc["final_status"] == escape.CONVERGED


def test_empty_inits_rejected():
    with pytest.raises(ValueError):
        escape.multi_run(cases.twobus(), [])
