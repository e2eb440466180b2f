"""Grid case files, bus admittance matrix and adjacency matrix.

Case file layout (whitespace separated, ``#`` starts a comment line)::

    BASEMVA 100
    BUS
    # id  type  Pd  Qd  Gs  Bs  Vset  ThetaSet
    BRANCH
    # from  to  r  x  b  tap  shift
    GEN
    # bus  Pmax  [Pg]

Powers are in MW / MVAr, angles in degrees, impedances in p.u.; everything is
converted to per-unit and radians when parsed.  Bus types: 1 = PQ, 2 = PV,
3 = slack.  A tap of 0 means nominal (1.0), as in MATPOWER.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "AdjacencyMatrix",
    "AdmittanceMatrix",
    "Branch",
    "Bus",
    "BusSystem",
    "BusType",
    "CaseFormatError",
    "CaseValidationError",
    "adjacency",
    "build_admittance",
    "from_matpower",
    "load_case",
    "parse_case",
    "serialize_case",
]

_SECTIONS = ("BUS", "BRANCH", "GEN")
_COLUMNS = {"BUS": (8, 8), "BRANCH": (7, 7), "GEN": (2, 3)}


class CaseFormatError(ValueError):
    """Syntax error in a case file; ``lineno`` is 1-based."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class CaseValidationError(ValueError):
    """The case parsed but describes an invalid system."""


class BusType(enum.IntEnum):
    PQ = 1
    PV = 2
    SLACK = 3


@dataclass(frozen=True)
class Bus:
    """One bus, per-unit on the system base.

    ``ext_id`` is the id used in the case file; the bus's position in
    ``BusSystem.buses`` is its internal 0-based index.
    """

    ext_id: int
    bus_type: BusType
    p_demand: float = 0.0
    q_demand: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    v_set: float = 1.0
    theta_set: float = 0.0


@dataclass(frozen=True)
class Branch:
    """Series branch between internal bus indices ``from_bus`` and ``to_bus``."""

    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0


@dataclass(frozen=True)
class BusSystem:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 100.0
    gen_capacity: tuple[float, ...] = ()
    gen_dispatch: tuple[float, ...] = ()
    name: str = ""

    def __post_init__(self):
        n = len(self.buses)
        # an absent generator table means no generation anywhere
        if not self.gen_capacity:
            object.__setattr__(self, "gen_capacity", (0.0,) * n)
        if not self.gen_dispatch:
            object.__setattr__(self, "gen_dispatch", (0.0,) * n)
        _validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def ext_ids(self) -> tuple[int, ...]:
        return tuple(b.ext_id for b in self.buses)

    def index_of(self, ext_id: int) -> int:
        return self.ext_ids.index(ext_id)

    def indices(self, *types: BusType) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.bus_type in types], dtype=int)

    @property
    def pq(self) -> np.ndarray:
        return self.indices(BusType.PQ)

    @property
    def pv(self) -> np.ndarray:
        return self.indices(BusType.PV)

    @property
    def slack(self) -> int:
        return int(self.indices(BusType.SLACK)[0])

    @property
    def p_demand(self) -> np.ndarray:
        return np.array([b.p_demand for b in self.buses])

    @property
    def q_demand(self) -> np.ndarray:
        return np.array([b.q_demand for b in self.buses])

    @property
    def v_set(self) -> np.ndarray:
        return np.array([b.v_set for b in self.buses])

    @property
    def theta_set(self) -> np.ndarray:
        return np.array([b.theta_set for b in self.buses])


def _validate(sys: BusSystem) -> None:
    n = len(sys.buses)
    if n < 2:
        raise CaseValidationError(f"a system needs at least 2 buses, got {n}")
    n_slack = sum(b.bus_type == BusType.SLACK for b in sys.buses)
    if n_slack != 1:
        raise CaseValidationError(f"exactly one slack bus required, found {n_slack}")
    ids = [b.ext_id for b in sys.buses]
    if len(set(ids)) != n:
        raise CaseValidationError("duplicate bus ids")
    for b in sys.buses:
        if b.bus_type != BusType.PQ and not b.v_set > 0:
            raise CaseValidationError(f"bus {b.ext_id}: voltage setpoint must be positive")
    for k, br in enumerate(sys.branches):
        if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
            raise CaseValidationError(f"branch {k} references a bus outside the system")
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {k} is a self loop at bus {ids[br.from_bus]}")
        if br.r == 0 and br.x == 0:
            raise CaseValidationError(f"branch {k} has zero impedance")
        if br.tap <= 0:
            raise CaseValidationError(f"branch {k} has non-positive tap")
    if len(sys.gen_capacity) != n or len(sys.gen_dispatch) != n:
        raise CaseValidationError("generator arrays must have one entry per bus")


def _tokenize(text: str):
    """Yield (lineno, section, fields) for data lines."""
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head = line.split()
        key = head[0].upper()
        if key in _SECTIONS and len(head) == 1:
            section = key
            continue
        if key == "BASEMVA":
            if len(head) != 2:
                raise CaseFormatError(lineno, "BASEMVA takes one value")
            yield lineno, "BASEMVA", head[1:]
            continue
        if section is None:
            raise CaseFormatError(lineno, f"data before any section header: {line!r}")
        lo, hi = _COLUMNS[section]
        if not lo <= len(head) <= hi:
            want = str(lo) if lo == hi else f"{lo}-{hi}"
            raise CaseFormatError(lineno, f"{section} row needs {want} columns, got {len(head)}")
        yield lineno, section, head


def _num(lineno: int, tok: str, integer: bool = False):
    try:
        if integer:
            val = float(tok)
            if val != int(val):
                raise ValueError
            return int(val)
        val = float(tok)
    except ValueError:
        raise CaseFormatError(lineno, f"not a number: {tok!r}") from None
    if not math.isfinite(val):
        raise CaseFormatError(lineno, f"non-finite value: {tok!r}")
    return val


def parse_case(text: str) -> BusSystem:
    """Parse case-file text into a validated :class:`BusSystem`."""
    base = 100.0
    bus_rows, branch_rows, gen_rows = [], [], []
    for lineno, section, f in _tokenize(text):
        if section == "BASEMVA":
            base = _num(lineno, f[0])
            if base <= 0:
                raise CaseFormatError(lineno, "BASEMVA must be positive")
        elif section == "BUS":
            bid, btype = _num(lineno, f[0], True), _num(lineno, f[1], True)
            if btype not in (1, 2, 3):
                raise CaseFormatError(lineno, f"bus type must be 1, 2 or 3, got {btype}")
            bus_rows.append((lineno, bid, btype, *(_num(lineno, t) for t in f[2:])))
        elif section == "BRANCH":
            fb, tb = _num(lineno, f[0], True), _num(lineno, f[1], True)
            branch_rows.append((lineno, fb, tb, *(_num(lineno, t) for t in f[2:])))
        else:
            vals = [_num(lineno, t) for t in f[1:]]
            gen_rows.append((lineno, _num(lineno, f[0], True), vals[0], vals[1] if len(vals) > 1 else 0.0))

    id_map = {}
    buses = []
    for lineno, bid, btype, pd, qd, gs, bs, vset, tdeg in bus_rows:
        if bid in id_map:
            raise CaseValidationError(f"line {lineno}: duplicate bus id {bid}")
        id_map[bid] = len(buses)
        buses.append(Bus(bid, BusType(btype), pd / base, qd / base, gs / base, bs / base,
                         vset, math.radians(tdeg)))

    def lookup(lineno, bid):
        if bid not in id_map:
            raise CaseValidationError(f"line {lineno}: unknown bus id {bid}")
        return id_map[bid]

    branches = []
    for lineno, fb, tb, r, x, b, tap, shift in branch_rows:
        branches.append(Branch(lookup(lineno, fb), lookup(lineno, tb), r, x, b,
                               tap if tap != 0 else 1.0, math.radians(shift)))
    cap = [0.0] * len(buses)
    disp = [0.0] * len(buses)
    for lineno, bid, pmax, pg in gen_rows:
        i = lookup(lineno, bid)
        cap[i] += pmax / base
        disp[i] += pg / base
    return BusSystem(tuple(buses), tuple(branches), base, tuple(cap), tuple(disp))


def load_case(path: str | Path) -> BusSystem:
    path = Path(path)
    return replace(parse_case(path.read_text(encoding="utf-8")), name=path.stem)


def _fmt(x: float) -> str:
    s = f"{x:.9g}"
    return "0" if s == "-0" else s


def serialize_case(sys: BusSystem) -> str:
    """Write ``sys`` back to case-file text (9 significant digits)."""
    base = sys.base_mva
    out = [f"BASEMVA {_fmt(base)}", "BUS", "# id type Pd Qd Gs Bs Vset ThetaSet"]
    for b in sys.buses:
        vals = (b.p_demand * base, b.q_demand * base, b.shunt_g * base, b.shunt_b * base,
                b.v_set, math.degrees(b.theta_set))
        out.append(" ".join([str(b.ext_id), str(int(b.bus_type))] + [_fmt(v) for v in vals]))
    out += ["BRANCH", "# from to r x b tap shift"]
    ids = sys.ext_ids
    for br in sys.branches:
        vals = (br.r, br.x, br.b_charging, br.tap, math.degrees(br.shift))
        out.append(" ".join([str(ids[br.from_bus]), str(ids[br.to_bus])] + [_fmt(v) for v in vals]))
    out += ["GEN", "# bus Pmax Pg"]
    for i, (pmax, pg) in enumerate(zip(sys.gen_capacity, sys.gen_dispatch)):
        if pmax != 0 or pg != 0:
            out.append(f"{ids[i]} {_fmt(pmax * base)} {_fmt(pg * base)}")
    return "\n".join(out) + "\n"


def from_matpower(base_mva, bus, branch, gen) -> BusSystem:
    """Build a BusSystem from MATPOWER-layout arrays (``mpc.bus`` etc.).

    Out-of-service branches and generators are dropped.  PV/slack voltage
    setpoints come from the generator ``VG`` column, the slack angle from
    the bus ``VA`` column.
    """
    bus, branch, gen = (np.asarray(a, dtype=float) for a in (bus, branch, gen))
    gen = gen[gen[:, 7] > 0]
    branch = branch[branch[:, 10] > 0]
    vg = {int(g[0]): g[5] for g in gen}
    id_map = {int(b[0]): i for i, b in enumerate(bus)}
    buses = []
    for row in bus:
        bid, btype = int(row[0]), int(row[1])
        if btype == 4:
            raise CaseValidationError(f"bus {bid} is isolated; islands are not supported")
        vset = vg.get(bid, row[7]) if btype in (2, 3) else 1.0
        theta = math.radians(row[8]) if btype == 3 else 0.0
        buses.append(Bus(bid, BusType(btype), row[2] / base_mva, row[3] / base_mva,
                         row[4] / base_mva, row[5] / base_mva, float(vset), theta))
    branches = tuple(
        Branch(id_map[int(r[0])], id_map[int(r[1])], r[2], r[3], r[4],
               r[8] if r[8] != 0 else 1.0, math.radians(r[9]))
        for r in branch
    )
    cap = [0.0] * len(buses)
    disp = [0.0] * len(buses)
    for g in gen:
        i = id_map[int(g[0])]
        cap[i] += g[8] / base_mva
        disp[i] += g[1] / base_mva
    return BusSystem(tuple(buses), branches, float(base_mva), tuple(cap), tuple(disp))


@dataclass(frozen=True, eq=False)
class AdmittanceMatrix:
    """Y = g + j b, dense, with the structural nonzero pattern kept explicitly."""

    g: np.ndarray
    b: np.ndarray
    pattern: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.g.shape[0]

    @property
    def complex(self) -> np.ndarray:
        return self.g + 1j * self.b


@dataclass(frozen=True, eq=False)
class AdjacencyMatrix:
    a: np.ndarray


def build_admittance(sys: BusSystem) -> AdmittanceMatrix:
    """Assemble the bus admittance matrix, including line charging, taps and shunts."""
    n = sys.n_bus
    y = np.zeros((n, n), dtype=complex)
    pattern = np.zeros((n, n), dtype=bool)
    for br in sys.branches:
        i, k = br.from_bus, br.to_bus
        ys = 1.0 / complex(br.r, br.x)
        half = 0.5j * br.b_charging
        t = br.tap * np.exp(1j * br.shift)
        y[i, i] += (ys + half) / (br.tap * br.tap)
        y[k, k] += ys + half
        y[i, k] -= ys / np.conj(t)
        y[k, i] -= ys / t
        pattern[[i, k, i, k], [i, k, k, i]] = True
    for i, bus in enumerate(sys.buses):
        if bus.shunt_g or bus.shunt_b:
            y[i, i] += complex(bus.shunt_g, bus.shunt_b)
            pattern[i, i] = True
    return AdmittanceMatrix(y.real.copy(), y.imag.copy(), pattern)


def adjacency(sys: BusSystem) -> AdjacencyMatrix:
    n = sys.n_bus
    a = np.eye(n)
    for br in sys.branches:
        a[br.from_bus, br.to_bus] = a[br.to_bus, br.from_bus] = 1.0
    return AdjacencyMatrix(a)
