import csv
import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acopf_escape import cases, escape, oracle
from acopf_escape.analysis import ReducedLandscape
from acopf_escape.casefile import CaseFileWarning, load_case
from acopf_escape.model import flat_start
from acopf_escape.nlp import SolveOptions

from conftest import (TWOBUS_COST_STAR, TWOBUS_MU_BAR, TWOBUS_MU_STAR, TWOBUS_RIDGE,
                      TWOBUS_THETA_BAR, TWOBUS_THETA_STAR)

TIGHT = SolveOptions(tol=1e-8)


def two_bus_at(lag):
    net = cases.fix_voltages(cases.twobus())
    p = flat_start(net)
    p.theta[1] = -lag
    return net, p


# --------------------------------------------------------------------------
# grid search

def test_grid_search_convex_quadratic_has_one_minimum():
    center = np.array([0.3, -0.2])
    pts = oracle.grid_search(lambda x: float(np.sum((x - center) ** 2)),
                             [(-1, 1), (-1, 1)], 0.1)
    assert len(pts) == 1
    assert np.allclose(pts[0].primal, center, atol=1e-6)
    assert pts[0].hessian_class == "PosDef"
    assert pts[0].cost == pytest.approx(0.0, abs=1e-12)


def test_grid_search_mesh_penalized_has_four_minima():
    land = ReducedLandscape(cases.fix_voltages(cases.threebus_mesh()), "penalized", rho=10.0)
    pts = oracle.grid_search(land, [(-math.pi / 2, 3 * math.pi / 2)] * 2, 0.02,
                             gradient=land.gradient, hessian=land.hessian, vectorized=True)
    found = sorted(tuple(np.round(p.primal, 3)) for p in pts)
    expected = sorted([(0.5237, 0.5237), (0.702, 2.198), (2.198, 0.702), (2.0957, 2.0957)])
    assert len(found) == 4
    for got, want in zip(found, expected):
        assert np.allclose(got, want, atol=0.05)
    assert all(p.hessian_class == "PosDef" for p in pts)


def test_grid_search_two_bus_stiff_penalty_finds_both_roots():
    land = ReducedLandscape(cases.fix_voltages(cases.twobus()), "penalized", rho=1e3)
    step = 0.01
    pts = oracle.grid_search(land, [(-math.pi / 2, 3 * math.pi / 2)], step,
                             gradient=land.gradient, hessian=land.hessian, vectorized=True)
    lags = sorted(float(p.primal[0]) for p in pts)
    assert len(lags) == 2
    assert lags[0] == pytest.approx(TWOBUS_THETA_STAR, abs=2 * step)
    assert lags[1] == pytest.approx(TWOBUS_THETA_BAR, abs=2 * step)


def test_grid_search_rejects_bad_dimensions_and_huge_grids():
    with pytest.raises(ValueError):
        oracle.grid_search(lambda x: 0.0, [(0, 1)] * 4, 0.5)
    with pytest.raises(ValueError):
        oracle.grid_search(lambda x: 0.0, [], 0.5)
    with pytest.raises(ValueError):
        oracle.grid_search(lambda x: 0.0, [(0, 1)] * 3, 1e-4)


def test_grid_search_periodic_merges_wrapped_copies():
    pts = oracle.grid_search(lambda x: -math.cos(x[0]), [(-math.pi, math.pi)], 0.05, periodic=True)
    assert len(pts) == 1
    assert pts[0].primal[0] == pytest.approx(0.0, abs=1e-6)


# --------------------------------------------------------------------------
# multistart

def test_multistart_single_start_from_solution():
    net, p = two_bus_at(TWOBUS_THETA_STAR)
    enum = oracle.multistart_enumerate(net, 1, seed=0, opts=TIGHT, inits=[p])
    assert len(enum.clusters) == 1
    assert enum.clusters[0].occurrences == 1
    assert enum.costs[0] == pytest.approx(TWOBUS_COST_STAR, rel=1e-7)


def test_multistart_two_bus_finds_both_solutions():
    net = cases.fix_voltages(cases.twobus())
    enum = oracle.multistart_enumerate(net, 40, seed=3, opts=TIGHT, angle_range=math.pi)
    assert enum.costs[0] == pytest.approx(TWOBUS_COST_STAR, rel=1e-6)
    assert len(enum.clusters) >= 2
    assert sum(c.occurrences for c in enum.clusters) + enum.n_failed == 40


@pytest.mark.parametrize("name, n", [("twobus", 30), ("threebus-tree", 30), ("case9", 10)])
def test_multistart_clusters_stable_under_more_starts(name, n):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CaseFileWarning)
        net = load_case(name)
    small = oracle.multistart_enumerate(net, n, seed=1, opts=TIGHT, angle_range=math.pi)
    large = oracle.multistart_enumerate(net, 5 * n, seed=2, opts=TIGHT, angle_range=math.pi)
    for cost in small.costs:
        assert any(abs(cost - c) <= 1e-6 * abs(c) for c in large.costs)
    assert large.costs[0] == pytest.approx(small.costs[0], rel=1e-6)


def test_cluster_solutions_identifies_wrapped_angles():
    net, p = two_bus_at(TWOBUS_THETA_STAR)
    q = p.copy()
    q.theta = p.theta - 2 * math.pi
    clusters = oracle.cluster_solutions([(p, 1.0, 0.0, None), (q, 1.0, 0.0, None)])
    assert len(clusters) == 1 and clusters[0].occurrences == 2


def test_multistart_rejects_no_starts():
    with pytest.raises(ValueError):
        oracle.multistart_enumerate(cases.twobus(), 0, seed=0)


def test_enumeration_artifacts(out_dir):
    net = cases.fix_voltages(cases.twobus())
    enum = oracle.multistart_enumerate(net, 20, seed=3, opts=TIGHT, angle_range=math.pi)
    oracle.write_enumeration_csv(enum, out_dir / "e.csv", preamble={"seed": 3})
    oracle.write_witnesses_json(enum, out_dir / "w.json", extra={"case": "twobus"})
    lines = (out_dir / "e.csv").read_text().splitlines()
    assert lines[0] == "# seed,3"
    rows = list(csv.DictReader(lines[1:]))
    assert [float(r["cost"]) for r in rows] == enum.costs
    doc = json.loads((out_dir / "w.json").read_text())
    assert doc["case"] == "twobus" and doc["n_starts"] == 20
    assert len(doc["clusters"]) == len(enum.clusters)
    assert set(doc["clusters"][0]["primal"]) >= {"theta", "v", "pg", "qg"}


# --------------------------------------------------------------------------
# 2-bus closed forms

def test_two_bus_roots_match_reference():
    star, bar = oracle.two_bus_roots(1.0, 4.0, 1.0)
    assert star == pytest.approx(TWOBUS_THETA_STAR, abs=1e-12)
    assert bar == pytest.approx(TWOBUS_THETA_BAR, abs=1e-12)


def test_two_bus_roots_zero_load():
    star, bar = oracle.two_bus_roots(1.0, 4.0, 0.0)
    assert star == 0.0
    # the other root is where g(1 - cos) = b sin on the far side: 2 atan(b/g)
    assert bar == pytest.approx(2 * TWOBUS_RIDGE, abs=1e-12)


def test_two_bus_roots_infeasible_load_reports_margin():
    limit = math.hypot(1.0, 4.0) - 1.0
    with pytest.raises(oracle.InfeasibleLoadError) as err:
        oracle.two_bus_roots(1.0, 4.0, limit + 0.25)
    assert err.value.margin == pytest.approx(0.25, abs=1e-12)


@given(st.floats(0.1, 5.0), st.floats(0.5, 10.0), st.floats(0.0, 0.99))
def test_two_bus_roots_solve_balance(g, b, frac):
    load = frac * (math.hypot(g, b) - g)
    star, bar = oracle.two_bus_roots(g, b, load)
    for t in (star, bar):
        assert abs(load + g - g * math.cos(t) - b * math.sin(t)) <= 1e-9 * max(1.0, b)
    assert -math.pi / 2 < star <= math.atan2(b, g) <= bar < math.atan2(b, g) + math.pi


def test_mu_of_theta_examples():
    assert oracle.mu_of_theta_2bus(1.0, 4.0, math.pi / 2) == pytest.approx(-1.0, abs=1e-12)
    assert oracle.mu_of_theta_2bus(1.0, 4.0, TWOBUS_THETA_STAR) == pytest.approx(TWOBUS_MU_STAR, rel=1e-12)
    assert oracle.mu_of_theta_2bus(1.0, 4.0, TWOBUS_THETA_BAR) == pytest.approx(TWOBUS_MU_BAR, rel=1e-12)
    with pytest.raises(ValueError):
        oracle.mu_of_theta_2bus(1.0, 0.0, 0.0)


def test_lagrangian_minimizer_examples():
    assert oracle.lagrangian_minimizer_2bus(1.0, 4.0, 1.0, 1.0) == 0.0
    assert oracle.lagrangian_minimizer_2bus(1.0, 4.0, 1.0, TWOBUS_MU_STAR) == pytest.approx(
        TWOBUS_THETA_STAR, abs=1e-12)
    # from the higher root's multiplier the minimizer lands in the lower root's basin
    t = oracle.lagrangian_minimizer_2bus(1.0, 4.0, 1.0, TWOBUS_MU_BAR)
    assert -math.pi / 2 < t < TWOBUS_RIDGE
    with pytest.raises(ValueError):
        oracle.lagrangian_minimizer_2bus(1.0, 4.0, 1.0, -1.0)


@given(st.floats(0.1, 5.0), st.floats(0.5, 10.0), st.floats(0.1, 3.0),
       st.floats(-20.0, 20.0).filter(lambda m: abs(m) > 1e-3))
def test_lagrangian_minimizer_is_stationary_minimum(g, b, c, mu_shift):
    mu = -c + mu_shift
    t = oracle.lagrangian_minimizer_2bus(g, b, c, mu)

    def lag(x):
        p12 = g - g * math.cos(x) + b * math.sin(x)
        return c * p12 + mu * (0.0 + g - g * math.cos(x) - b * math.sin(x))

    grad = c * (g * math.sin(t) + b * math.cos(t)) + mu * (g * math.sin(t) - b * math.cos(t))
    assert abs(grad) <= 1e-10 * max(1.0, abs(mu), c) * max(g, b)
    xs = np.linspace(t - math.pi, t + math.pi, 721)
    assert lag(t) <= min(lag(x) for x in xs) + 1e-9 * max(1.0, abs(mu)) * max(g, b)


# --------------------------------------------------------------------------
# certification

def test_certify_best_two_bus():
    net = cases.fix_voltages(cases.twobus())
    enum = oracle.multistart_enumerate(net, 20, seed=3, opts=TIGHT, angle_range=math.pi)
    _, p = two_bus_at(TWOBUS_THETA_BAR)
    trace = escape.run(net, p, opts=TIGHT)
    cert = oracle.certify_best(net, enum, [trace])
    assert cert.cost == pytest.approx(TWOBUS_COST_STAR, rel=1e-7)
    assert cert.source.startswith("cluster") or cert.source.startswith("trace")
    assert oracle.feasibility_violation(net, cert.witness) <= 1e-6
    assert cert.flagged_traces == []


def test_certify_best_rejects_violating_witness():
    net = cases.fix_voltages(cases.twobus())
    enum = oracle.multistart_enumerate(net, 20, seed=3, opts=TIGHT, angle_range=math.pi)
    fake = enum.clusters[0].primal
    bad = fake.copy()
    bad.pg -= 0.5
    enum.clusters.insert(0, oracle.Cluster(bad, 0.1, 1, 0.0))
    cert = oracle.certify_best(net, enum)
    assert cert.rejected and cert.rejected[0][0] == "cluster[0]"
    assert cert.rejected[0][2] == pytest.approx(0.5, abs=1e-6)
    assert cert.cost == pytest.approx(TWOBUS_COST_STAR, rel=1e-7)


def test_certify_best_flags_traces_above_best():
    net, p = two_bus_at(TWOBUS_THETA_BAR)
    stuck = escape.run(net, p, max_outer=1, opts=TIGHT)
    stuck.best = stuck.iterations[0]  # pretend the warm start never helped
    enum = oracle.multistart_enumerate(net, 20, seed=3, opts=TIGHT, angle_range=math.pi)
    cert = oracle.certify_best(net, enum, [stuck])
    assert cert.flagged_traces == [0]


def test_certify_best_needs_candidates():
    with pytest.raises(ValueError):
        oracle.certify_best(cases.twobus())
