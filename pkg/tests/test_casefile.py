import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from acopf_escape import cases
from acopf_escape.casefile import (Branch, Bus, CaseFileWarning, CaseFormatError, Gen, Network,
                                   branch_admittance, from_json, load_case, parse_case,
                                   to_json, validate, write_case)

BUNDLED = ["case9", "case39"]

MINIMAL = """function mpc = tiny
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	1	1	1.1	0.9;
	2	1	50	10	0	0	1	1	0	1	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	100	-100	1	100	1	200	0;
];
mpc.branch = [
	1	2	0.01	0.1	0.02	150	0	0	0	0	1;
];
mpc.gencost = [
	2	0	0	3	0.01	20	5;
];
"""


def _quiet_parse(text, name="t"):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CaseFileWarning)
        return parse_case(text, name=name)


def _quiet_load(name):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CaseFileWarning)
        return load_case(name)


# -- admittance -------------------------------------------------------------

def test_admittance_of_one_minus_j4_line():
    g, b, b_hat = branch_admittance(1 / 17, 4 / 17, 0.0)
    assert g == pytest.approx(1.0, rel=1e-12)
    assert b == pytest.approx(4.0, rel=1e-12)
    assert b_hat == pytest.approx(4.0, rel=1e-12)


def test_pure_reactance():
    assert branch_admittance(0.0, 1.0, 0.0) == (0.0, 1.0, 1.0)


def test_charging_lowers_b_hat_by_half():
    assert branch_admittance(0.0, 1.0, 0.2) == pytest.approx((0.0, 1.0, 0.9), abs=1e-15)


def test_zero_impedance_rejected():
    with pytest.raises(ValueError):
        branch_admittance(0.0, 0.0)


@given(st.floats(1e-4, 10.0), st.floats(1e-4, 10.0), st.floats(0.0, 2.0))
def test_impedance_reconstructed_from_admittance(r, x, bc):
    g, b, b_hat = branch_admittance(r, x, bc)
    z = complex(g, b) / (g * g + b * b)
    assert z.real == pytest.approx(r, rel=1e-12)
    assert z.imag == pytest.approx(x, rel=1e-12)
    assert b_hat == b - 0.5 * bc


# -- parsing ----------------------------------------------------------------

def test_minimal_case_in_per_unit():
    net = parse_case(MINIMAL, name="tiny")
    assert (net.n_bus, net.n_branch, net.n_gen) == (2, 1, 1)
    assert net.ref_bus == 0
    assert net.buses[1].pd == pytest.approx(0.5)
    assert net.buses[1].qd == pytest.approx(0.1)
    assert net.branches[0].s_max == pytest.approx(1.5)
    gen = net.gens[0]
    assert (gen.p_min, gen.p_max) == (0.0, 2.0)
    # 0.01 P_MW^2 + 20 P_MW + 5 with P_MW = 100 p
    assert gen.cost == pytest.approx((5.0, 2000.0, 100.0))


def test_case39_dimensions():
    net = _quiet_load("case39")
    assert (net.n_bus, net.n_branch, net.n_gen) == (39, 46, 10)


def test_extra_columns_warn():
    with pytest.warns(CaseFileWarning):
        load_case("case39")


@pytest.mark.parametrize("text, fragment", [
    (MINIMAL.replace("mpc.baseMVA = 100;\n", ""), "baseMVA"),
    (MINIMAL.replace("mpc.gencost = [\n\t2\t0\t0\t3\t0.01\t20\t5;\n];\n", ""), "gencost"),
    (MINIMAL.replace("1	2	0.01	0.1", "1	7	0.01	0.1"), "unknown bus"),
    (MINIMAL.replace("0.01	0.1	0.02", "0	0	0.02"), "zero-impedance"),
    (MINIMAL.replace("	1	0	0	100	-100	1	100	1	200	0;", "	1	0	0	100;"), "columns"),
    (MINIMAL.replace("50	10", "fifty	10"), "cannot parse"),
    (MINIMAL.replace("1	3	0", "1	1	0"), "reference"),
    (MINIMAL.rstrip().rstrip("];"), "not closed"),
])
def test_malformed_text(text, fragment):
    with pytest.raises(CaseFormatError, match=fragment):
        _quiet_parse(text)


def test_missing_file(tmp_path):
    with pytest.raises(CaseFormatError, match="cannot read"):
        load_case(tmp_path / "missing.m")


def test_file_path_without_suffix(tmp_path):
    (tmp_path / "tiny.m").write_text(MINIMAL)
    net = load_case(tmp_path / "tiny")
    assert net.name == "tiny"
    assert net.n_bus == 2


def test_taps_normalized_with_warning():
    text = MINIMAL.replace("150	0	0	0	0	1", "150	0	0	0.98	0	1")
    with pytest.warns(CaseFileWarning, match="taps"):
        net = parse_case(text)
    assert net.n_branch == 1


# -- round trip -------------------------------------------------------------

@pytest.mark.parametrize("name", BUNDLED + ["twobus", "threebus-mesh", "threebus-tree"])
def test_text_round_trip_is_field_identical(name):
    net = _quiet_load(name)
    again = _quiet_parse(write_case(net), name=net.name)
    assert again == net
    assert _quiet_parse(write_case(again)) == net


@pytest.mark.parametrize("name", BUNDLED + ["twobus"])
def test_json_round_trip(name):
    net = _quiet_load(name)
    text = to_json(net)
    assert from_json(text) == net
    doc = json.loads(text)
    assert list(doc) == sorted(doc)
    assert doc["branches"][0]["b_hat"] == net.branches[0].b_hat


def test_json_schema_version_checked():
    doc = json.loads(to_json(cases.twobus()))
    doc["schema"] = 99
    with pytest.raises(CaseFormatError):
        from_json(json.dumps(doc))


@given(st.lists(st.tuples(st.floats(0.0, 1.0), st.floats(0.01, 1.0), st.floats(0.0, 0.5),
                          st.floats(0.0, 3.0)), min_size=1, max_size=4),
       st.floats(1.0, 1000.0))
def test_round_trip_random_networks(lines, base):
    n = len(lines) + 1
    buses = tuple(Bus(k + 1, 0.1 * k, 0.05 * k, 0.9, 1.1, 3 if k == 0 else 1) for k in range(n))
    branches = tuple(Branch(k, k + 1, r, x, bc, s) for k, (r, x, bc, s) in enumerate(lines))
    gens = (Gen(0, 0.0, 5.0, -2.0, 2.0, (1.5, 2.0, 0.25)),)
    net = _quiet_parse(write_case(Network(base, buses, branches, gens, 0, name="rand")))
    assert parse_case(write_case(net)) == net


def test_unrepresentable_value_warns():
    net = cases.twobus().replace(base_mva=457.75)
    with pytest.warns(CaseFileWarning, match="no exact representation"):
        text = write_case(net)
    assert _quiet_parse(text).n_bus == 2


# -- validation -------------------------------------------------------------

def test_valid_twobus_has_no_violations():
    assert validate(cases.twobus()) == []


def test_inverted_voltage_bounds_reported():
    net = cases.twobus()
    buses = (net.buses[0], Bus(2, 1.0, 0.0, 1.1, 1.05))
    assert validate(net.replace(buses=buses)) == ["bus 2: v_min > v_max"]


def test_two_reference_buses_reported():
    net = cases.twobus()
    buses = (net.buses[0], Bus(2, 1.0, 0.0, 0.95, 1.05, 3))
    assert validate(net.replace(buses=buses)) == ["multiple reference buses"]


def test_decreasing_cost_reported():
    net = cases.twobus()
    gens = (Gen(0, 0.0, 2.0, -1.0, 1.0, (0.0, -1.0)),) + net.gens[1:]
    assert validate(net.replace(gens=gens)) == ["gen 0: cost decreasing on [p_min, p_max]"]


def test_disconnected_network_reported():
    net = cases.twobus()
    buses = net.buses + (Bus(3, 0.0, 0.0, 0.95, 1.05),)
    assert "network is not connected" in validate(net.replace(buses=buses))


@pytest.mark.parametrize("name", BUNDLED + list(cases.BUILTIN))
def test_bundled_cases_validate(name):
    assert validate(_quiet_load(name)) == []


def test_horner_cost_matches_direct_polynomial():
    gen = Gen(0, 0.0, 1.0, 0.0, 0.0, (3.0, -2.0, 0.5, 0.25))
    for p in np.linspace(-2, 2, 9):
        assert gen.cost_at(p) == pytest.approx(3 - 2 * p + 0.5 * p ** 2 + 0.25 * p ** 3, abs=1e-13)
        assert gen.marginal_cost_at(p) == pytest.approx(-2 + p + 0.75 * p ** 2, abs=1e-13)
        assert gen.cost_curvature_at(p) == pytest.approx(1 + 1.5 * p, abs=1e-13)
    assert math.isfinite(gen.cost_at(np.float64(1.0)))
