"""Built-in networks.

``twobus``        one line ``1 - j4`` feeding a 1 p.u. load from a slack bus
``threebus-mesh`` triangle with ``1 - j4`` legs from the slack and ``0.1 - j0.4``
                  between the two load buses
``threebus-tree`` slack - load - load chain with two near-equal-cost solutions
``case9``, ``case39``  bundled MATPOWER-format files

Small networks carry a zero-cost synchronous condenser at every load bus
(``P`` fixed at 0, wide ``Q`` range), and the slack generator has a wide
two-sided active range.  With the condensers present the
reactive balance never binds, which reproduces the active-power-only
reductions used in the theory checks while keeping the full ACOPF model.
"""
from __future__ import annotations

from importlib import resources

from .casefile import PQ, REF, Branch, Bus, Gen, Network, parse_case

__all__ = ["BUILTIN", "fix_voltages", "threebus_mesh", "threebus_tree", "twobus"]

P_WIDE = Q_WIDE = 50.0


def _impedance(g: float, b: float) -> tuple[float, float]:
    # inverse of casefile.branch_admittance
    y2 = g * g + b * b
    return g / y2, b / y2


def _line(f: int, t: int, g: float, b: float, s_max: float = 0.0) -> Branch:
    r, x = _impedance(g, b)
    return Branch(f=f, t=t, r=r, x=x, b_c=0.0, s_max=s_max)


def _slack(cost) -> Gen:
    # the slack may also absorb power: between the two balance solutions the
    # line can flow backwards, and a bound there would cut the angle range
    return Gen(bus=0, p_min=-P_WIDE, p_max=P_WIDE, q_min=-Q_WIDE, q_max=Q_WIDE, cost=tuple(cost))


def _condenser(bus: int) -> Gen:
    return Gen(bus=bus, p_min=0.0, p_max=0.0, q_min=-Q_WIDE, q_max=Q_WIDE, cost=(0.0,))


def twobus(g: float = 1.0, b: float = 4.0, load: float = 1.0, v_min: float = 0.95,
           v_max: float = 1.05, cost: tuple[float, ...] = (0.0, 1.0)) -> Network:
    """Slack bus 1 with a generator, load bus 2; base 1 MVA so p.u. = MW."""
    buses = (Bus(1, 0.0, 0.0, v_min, v_max, REF), Bus(2, load, 0.0, v_min, v_max, PQ))
    gens = (_slack(cost), _condenser(1))
    return Network(1.0, buses, (_line(0, 1, g, b),), gens, 0, name="twobus")


def threebus_mesh(loads: tuple[float, float] = (2.0, 2.0), y12=(1.0, 4.0), y13=(1.0, 4.0),
                  y23=(0.1, 0.4)) -> Network:
    """Fixed-voltage triangle used for the four-solution landscape.

    With the default loads the penalized objective (penalty 10) has minima
    near lags (0.52, 0.52), (0.70, 2.20), (2.20, 0.70) and (2.10, 2.10).
    """
    buses = (Bus(1, 0.0, 0.0, 1.0, 1.0, REF), Bus(2, loads[0], 0.0, 1.0, 1.0, PQ),
             Bus(3, loads[1], 0.0, 1.0, 1.0, PQ))
    branches = (_line(0, 1, *y12), _line(0, 2, *y13), _line(1, 2, *y23))
    gens = (_slack((0.0, 1.0)), _condenser(1), _condenser(2))
    return Network(1.0, buses, branches, gens, 0, name="threebus-mesh")


def threebus_tree(loads: tuple[float, float] = (1.0, 0.5), y12=(1.0, 4.0), y23=(0.002, 1.0),
                  v_min: float = 0.95, v_max: float = 1.05) -> Network:
    """Chain 1 - 2 - 3 (slack at bus 1).

    Line 2 - 3 has a high x/r ratio, so its long-angle solution (bus 3 lagging
    by almost pi) costs only about 0.5% more than the normal one.
    """
    buses = (Bus(1, 0.0, 0.0, v_min, v_max, REF), Bus(2, loads[0], 0.0, v_min, v_max, PQ),
             Bus(3, loads[1], 0.0, v_min, v_max, PQ))
    branches = (_line(0, 1, *y12), _line(1, 2, *y23))
    gens = (_slack((0.0, 1.0)), _condenser(1), _condenser(2))
    return Network(1.0, buses, branches, gens, 0, name="threebus-tree")


def fix_voltages(net: Network, v: float = 1.0) -> Network:
    """Copy of ``net`` with every voltage magnitude pinned to ``v``."""
    buses = tuple(Bus(b.id, b.pd, b.qd, v, v, b.bus_type) for b in net.buses)
    return net.replace(buses=buses)


def _bundled(name: str):
    def load() -> Network:
        text = resources.files("acopf_escape.data").joinpath(f"{name}.m").read_text()
        return parse_case(text, name=name)

    return load


BUILTIN = {
    "twobus": twobus,
    "threebus-mesh": threebus_mesh,
    "threebus-tree": threebus_tree,
    "case9": _bundled("case9"),
    "case39": _bundled("case39"),
}
