"""Reading, validating and writing power-network case files.

The accepted input is the MATPOWER-style text format (``mpc.baseMVA``,
``mpc.bus``, ``mpc.gen``, ``mpc.branch``, ``mpc.gencost``).  Everything is
converted to per-unit on ``baseMVA`` when parsed.

Admittance sign convention: case files store the series impedance
``r + jx``; internally a branch carries ``g - jb`` with

    g = r / (r^2 + x^2),   b = x / (r^2 + x^2)

so ``b > 0`` for an inductive line, and ``b_hat = b - b_c / 2``.  With this
mapping the flow expressions in :mod:`acopf_escape.model` coincide with the
usual pi-model.
"""
from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Branch",
    "Bus",
    "CaseFormatError",
    "CaseFileWarning",
    "Gen",
    "Network",
    "branch_admittance",
    "from_json",
    "load_case",
    "parse_case",
    "to_json",
    "validate",
    "write_case",
]

REF, PQ, PV, ISOLATED = 3, 1, 2, 4

# Minimum column counts needed by the model (MATPOWER column order).
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 4}


class CaseFormatError(ValueError):
    """Raised for malformed or inconsistent case text."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CaseFileWarning(UserWarning):
    """Data was present in the case file but is not part of the model."""


def branch_admittance(r: float, x: float, b_c: float = 0.0) -> tuple[float, float, float]:
    """Series conductance/susceptance in the ``g - jb`` convention.

    Returns ``(g, b, b_hat)`` with ``b_hat = b - 0.5 * b_c``.
    """
    z2 = r * r + x * x
    if not z2 > 0.0:
        raise ValueError(f"zero-impedance branch (r={r}, x={x})")
    g = r / z2
    b = x / z2
    return g, b, b - 0.5 * b_c


@dataclass(frozen=True)
class Bus:
    id: int
    pd: float
    qd: float
    v_min: float
    v_max: float
    bus_type: int = PQ


@dataclass(frozen=True)
class Branch:
    f: int  # bus index (0-based)
    t: int
    r: float
    x: float
    b_c: float = 0.0
    s_max: float = 0.0  # 0 means unlimited

    @property
    def g(self) -> float:
        return branch_admittance(self.r, self.x, self.b_c)[0]

    @property
    def b(self) -> float:
        return branch_admittance(self.r, self.x, self.b_c)[1]

    @property
    def b_hat(self) -> float:
        return branch_admittance(self.r, self.x, self.b_c)[2]


@dataclass(frozen=True)
class Gen:
    bus: int  # bus index (0-based)
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost: tuple[float, ...] = (0.0,)  # polynomial in p.u. output, lowest degree first

    def cost_at(self, p):
        # Horner, highest degree first
        acc = 0.0 * np.asarray(p, dtype=float)
        for c in reversed(self.cost):
            acc = acc * p + c
        return acc

    def marginal_cost_at(self, p):
        acc = 0.0 * np.asarray(p, dtype=float)
        for k in range(len(self.cost) - 1, 0, -1):
            acc = acc * p + k * self.cost[k]
        return acc

    def cost_curvature_at(self, p):
        acc = 0.0 * np.asarray(p, dtype=float)
        for k in range(len(self.cost) - 1, 1, -1):
            acc = acc * p + k * (k - 1) * self.cost[k]
        return acc


@dataclass(frozen=True)
class Network:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    gens: tuple[Gen, ...]
    ref_bus: int
    name: str = field(default="", compare=False)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_gen(self) -> int:
        return len(self.gens)

    def bus_index(self, bus_id: int) -> int:
        for k, bus in enumerate(self.buses):
            if bus.id == bus_id:
                return k
        raise KeyError(bus_id)

    def replace(self, **changes) -> "Network":
        from dataclasses import replace

        return replace(self, **changes)


# --------------------------------------------------------------------------
# parsing

_FIELD_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    # '%' starts a comment unless inside a quoted string
    out, quote = [], False
    for ch in line:
        if ch == "'":
            quote = not quote
        if ch == "%" and not quote:
            break
        out.append(ch)
    return "".join(out)


def _parse_number(tok: str, lineno: int) -> float:
    try:
        return float(tok)
    except ValueError:
        low = tok.lower()
        if low in ("inf", "+inf"):
            return math.inf
        if low == "-inf":
            return -math.inf
        raise CaseFormatError(f"cannot parse number {tok!r}", lineno) from None


def _read_tables(text: str) -> tuple[dict[str, float], dict[str, list[tuple[int, list[float]]]]]:
    scalars: dict[str, float] = {}
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if current is None:
            m = _FIELD_RE.match(line)
            if not m:
                if line.startswith("function") or line.startswith("end"):
                    continue
                raise CaseFormatError(f"unexpected text {line!r}", lineno)
            name, rhs = m.group(1), m.group(2).strip()
            if rhs.startswith("["):
                current = name
                if name in tables:
                    raise CaseFormatError(f"table {name!r} defined twice", lineno)
                tables[name] = []
                rhs = rhs[1:]
            elif rhs.startswith("{") or rhs.startswith("'"):
                # cell arrays / strings (bus_name, version) are not used
                if rhs.startswith("{") and "}" not in rhs:
                    current = "__cell__"
                continue
            else:
                val = rhs.rstrip(";").strip()
                scalars[name] = _parse_number(val, lineno)
                continue
            line = rhs
        if current == "__cell__":
            if "}" in line:
                current = None
            continue
        closing = "]" in line
        body = line.split("]")[0] if closing else line
        for row in body.split(";"):
            toks = row.replace(",", " ").split()
            if toks:
                tables[current].append((lineno, [_parse_number(t, lineno) for t in toks]))
        if closing:
            current = None
    if current is not None:
        raise CaseFormatError(f"table {current!r} is not closed")
    return scalars, tables


def parse_case(text: str, name: str = "") -> Network:
    """Parse MATPOWER-format case text into a per-unit :class:`Network`."""
    scalars, tables = _read_tables(text)
    if "baseMVA" not in scalars:
        raise CaseFormatError("missing required field 'baseMVA'")
    for t in ("bus", "gen", "branch", "gencost"):
        if t not in tables:
            raise CaseFormatError(f"missing required table {t!r}")
    base = scalars["baseMVA"]
    if not base > 0:
        raise CaseFormatError("baseMVA must be positive")
    for t, rows in tables.items():
        if t not in _MIN_COLS:
            warnings.warn(f"table {t!r} is not used by the model", CaseFileWarning, stacklevel=2)
            continue
        extra = False
        for lineno, row in rows:
            if len(row) < _MIN_COLS[t]:
                raise CaseFormatError(
                    f"{t} row has {len(row)} columns, need {_MIN_COLS[t]}", lineno)
            extra = extra or (t != "gencost" and len(row) > _MIN_COLS[t])
        if extra:
            warnings.warn(f"columns beyond {_MIN_COLS[t]} in table {t!r} are ignored",
                          CaseFileWarning, stacklevel=2)

    buses: list[Bus] = []
    index: dict[int, int] = {}
    ignored_shunt = False
    for lineno, row in tables["bus"]:
        bid = int(row[0])
        if bid in index:
            raise CaseFormatError(f"duplicate bus id {bid}", lineno)
        if row[4] != 0.0 or row[5] != 0.0:
            ignored_shunt = True
        index[bid] = len(buses)
        buses.append(Bus(id=bid, pd=row[2] / base, qd=row[3] / base,
                         v_min=row[12], v_max=row[11], bus_type=int(row[1])))
    if ignored_shunt:
        warnings.warn("bus shunts (Gs, Bs) are ignored", CaseFileWarning, stacklevel=2)

    def bus_of(bid: float, lineno: int) -> int:
        try:
            return index[int(bid)]
        except KeyError:
            raise CaseFormatError(f"unknown bus {int(bid)}", lineno) from None

    refs = [k for k, b in enumerate(buses) if b.bus_type == REF]
    if not refs:
        raise CaseFormatError("no reference bus (type 3)")

    branches: list[Branch] = []
    tapped = False
    for lineno, row in tables["branch"]:
        f, t = bus_of(row[0], lineno), bus_of(row[1], lineno)
        if row[10] == 0:
            continue
        r, x = row[2], row[3]
        if r * r + x * x == 0.0:
            raise CaseFormatError("zero-impedance branch", lineno)
        if (row[8] not in (0.0, 1.0)) or row[9] != 0.0:
            tapped = True
        branches.append(Branch(f=f, t=t, r=r, x=x, b_c=row[4], s_max=row[5] / base))
    if tapped:
        warnings.warn("transformer taps/phase shifts normalized to 1∠0", CaseFileWarning,
                      stacklevel=2)

    gen_rows = tables["gen"]
    cost_rows = tables["gencost"]
    if len(cost_rows) < len(gen_rows):
        raise CaseFormatError(
            f"gencost has {len(cost_rows)} rows for {len(gen_rows)} generators")
    if len(cost_rows) > len(gen_rows):
        warnings.warn("reactive-power cost rows in gencost are ignored", CaseFileWarning,
                      stacklevel=2)
    gens: list[Gen] = []
    for (lineno, row), (clineno, crow) in zip(gen_rows, cost_rows):
        k = bus_of(row[0], lineno)
        if row[7] <= 0:
            continue
        model = int(crow[0])
        if model != 2:
            raise CaseFormatError("only polynomial gencost (model 2) is supported", clineno)
        ncoef = int(crow[3])
        coefs = crow[4:4 + ncoef]
        if len(coefs) != ncoef:
            raise CaseFormatError(f"gencost row declares {ncoef} coefficients", clineno)
        # MATPOWER stores highest degree first, in MW
        cost = tuple(c * base ** d for d, c in enumerate(reversed(coefs))) or (0.0,)
        gens.append(Gen(bus=k, p_min=row[9] / base, p_max=row[8] / base,
                        q_min=row[4] / base, q_max=row[3] / base, cost=cost))
    return Network(base_mva=base, buses=tuple(buses), branches=tuple(branches),
                   gens=tuple(gens), ref_bus=refs[0], name=name)


def load_case(path_or_name: str | Path) -> Network:
    """Load a case from a file path or a built-in name (see :mod:`acopf_escape.cases`)."""
    from . import cases

    key = str(path_or_name)
    if key in cases.BUILTIN:
        return cases.BUILTIN[key]()
    path = Path(path_or_name)
    if not path.exists() and not path.suffix:
        path = path.with_suffix(".m")
    try:
        text = path.read_text()
    except OSError as exc:
        raise CaseFormatError(f"cannot read case {str(path_or_name)!r}: {exc}") from None
    return parse_case(text, name=path.stem)


# --------------------------------------------------------------------------
# validation

def validate(net: Network, n_samples: int = 11) -> list[str]:
    """List invariant violations; an empty list means the network is usable."""
    out: list[str] = []
    nb = net.n_bus
    refs = [k for k, b in enumerate(net.buses) if b.bus_type == REF]
    if len(refs) == 0:
        out.append("no reference bus")
    elif len(refs) > 1:
        out.append("multiple reference buses")
    if not 0 <= net.ref_bus < nb:
        out.append(f"reference bus index {net.ref_bus} out of range")
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        out.append("duplicate bus ids")
    for b in net.buses:
        if not (b.v_min > 0):
            out.append(f"bus {b.id}: v_min must be positive")
        if b.v_min > b.v_max:
            out.append(f"bus {b.id}: v_min > v_max")
        if not (math.isfinite(b.pd) and math.isfinite(b.qd)):
            out.append(f"bus {b.id}: non-finite load")
    for k, br in enumerate(net.branches):
        if not (0 <= br.f < nb and 0 <= br.t < nb):
            out.append(f"branch {k}: unknown bus")
        if not (br.r * br.r + br.x * br.x > 0):
            out.append(f"branch {k}: zero impedance")
        if br.s_max < 0:
            out.append(f"branch {k}: negative flow limit")
    for k, gen in enumerate(net.gens):
        if not 0 <= gen.bus < nb:
            out.append(f"gen {k}: unknown bus")
        if gen.p_min > gen.p_max:
            out.append(f"gen {k}: p_min > p_max")
        if gen.q_min > gen.q_max:
            out.append(f"gen {k}: q_min > q_max")
        if gen.p_max > gen.p_min and math.isfinite(gen.p_min) and math.isfinite(gen.p_max):
            ps = np.linspace(gen.p_min, gen.p_max, n_samples)
            c = gen.cost_at(ps)
            if np.any(np.diff(c) < -1e-12 * max(1.0, float(np.max(np.abs(c))))):
                out.append(f"gen {k}: cost decreasing on [p_min, p_max]")
    if not _connected(net):
        out.append("network is not connected")
    return out


def _connected(net: Network) -> bool:
    nb = net.n_bus
    if nb == 0:
        return False
    adj: list[list[int]] = [[] for _ in range(nb)]
    for br in net.branches:
        if 0 <= br.f < nb and 0 <= br.t < nb:
            adj[br.f].append(br.t)
            adj[br.t].append(br.f)
    seen = {0}
    stack = [0]
    while stack:
        for j in adj[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return len(seen) == nb


# --------------------------------------------------------------------------
# serialization

def _exact(pu: float, base: float, invert: bool = False) -> str:
    """Text for the raw value behind ``pu`` that re-parses to exactly ``pu``.

    Parsing divides by ``base`` (multiplies when ``invert``).  Every parsed
    value has such a text; for other values the nearest one is used.
    """
    if not math.isfinite(pu):
        return "Inf" if pu > 0 else "-Inf"

    def back(raw: float) -> float:
        return raw * base if invert else raw / base

    start = v = pu / base if invert else pu * base
    for _ in range(64):
        got = back(float(repr(v)))
        if got == pu:
            return repr(v)
        v = math.nextafter(v, math.inf if (got < pu) == (base > 0) else -math.inf)
    # values that did not come from parsing may have no exact raw counterpart
    warnings.warn(f"{pu!r} has no exact representation on base {base!r}", CaseFileWarning,
                  stacklevel=3)
    return repr(start)


def _exact_cost(c: float, base: float, deg: int) -> str:
    return repr(c) if deg == 0 else _exact(c, base ** deg, invert=True)


def write_case(net: Network) -> str:
    """Serialize to MATPOWER text; :func:`parse_case` inverts it exactly."""
    base = net.base_mva
    lines = [f"function mpc = {net.name or 'case'}", "mpc.version = '2';",
             f"mpc.baseMVA = {base!r};", "", "mpc.bus = ["]
    for b in net.buses:
        lines.append("\t" + "\t".join([
            str(b.id), str(b.bus_type), _exact(b.pd, base), _exact(b.qd, base), "0", "0",
            "1", "1", "0", "1", "1", repr(b.v_max), repr(b.v_min)]) + ";")
    lines += ["];", "", "mpc.gen = ["]
    for gen in net.gens:
        lines.append("\t" + "\t".join([
            str(net.buses[gen.bus].id), "0", "0", _exact(gen.q_max, base),
            _exact(gen.q_min, base), "1", repr(base), "1", _exact(gen.p_max, base),
            _exact(gen.p_min, base)]) + ";")
    lines += ["];", "", "mpc.branch = ["]
    for br in net.branches:
        lines.append("\t" + "\t".join([
            str(net.buses[br.f].id), str(net.buses[br.t].id), repr(br.r), repr(br.x),
            repr(br.b_c), _exact(br.s_max, base), "0", "0", "0", "0", "1"]) + ";")
    lines += ["];", "", "mpc.gencost = ["]
    for gen in net.gens:
        n = len(gen.cost)
        coefs = [_exact_cost(gen.cost[d], base, d) for d in range(n - 1, -1, -1)]
        lines.append("\t" + "\t".join(["2", "0", "0", str(n)] + coefs) + ";")
    lines += ["];", ""]
    return "\n".join(lines)


SCHEMA_VERSION = 1


def to_json(net: Network) -> str:
    """Canonical JSON (sorted keys, per-unit values, derived admittances included)."""
    doc = {
        "schema": SCHEMA_VERSION,
        "name": net.name,
        "base_mva": net.base_mva,
        "ref_bus": net.ref_bus,
        "buses": [dict(id=b.id, type=b.bus_type, pd=b.pd, qd=b.qd, v_min=b.v_min,
                       v_max=b.v_max) for b in net.buses],
        "branches": [dict(f=br.f, t=br.t, r=br.r, x=br.x, b_c=br.b_c, s_max=br.s_max,
                          g=br.g, b=br.b, b_hat=br.b_hat) for br in net.branches],
        "gens": [dict(bus=g.bus, p_min=g.p_min, p_max=g.p_max, q_min=g.q_min,
                      q_max=g.q_max, cost=list(g.cost)) for g in net.gens],
    }
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=True)


def from_json(text: str) -> Network:
    doc = json.loads(text)
    if doc.get("schema") != SCHEMA_VERSION:
        raise CaseFormatError(f"unsupported network schema {doc.get('schema')!r}")
    return Network(
        base_mva=doc["base_mva"],
        buses=tuple(Bus(id=b["id"], pd=b["pd"], qd=b["qd"], v_min=b["v_min"],
                        v_max=b["v_max"], bus_type=b["type"]) for b in doc["buses"]),
        branches=tuple(Branch(f=b["f"], t=b["t"], r=b["r"], x=b["x"], b_c=b["b_c"],
                              s_max=b["s_max"]) for b in doc["branches"]),
        gens=tuple(Gen(bus=g["bus"], p_min=g["p_min"], p_max=g["p_max"], q_min=g["q_min"],
                       q_max=g["q_max"], cost=tuple(g["cost"])) for g in doc["gens"]),
        ref_bus=doc["ref_bus"],
        name=doc.get("name", ""),
    )
