from __future__ import annotations

import logging
import math
import re
import typing as t
from dataclasses import dataclass, field, replace
from enum import IntEnum, StrEnum
from functools import cached_property
from pathlib import Path

import httpx
import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)


class CaseSyntaxError(ValueError):
    """Raised for malformed case text; `lineno` is the 1-based line that failed to parse."""

    def __init__(self, message: str, lineno: int) -> None:
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class CaseSemanticError(ValueError):  # noqa: D101
    pass


class CaseFetchError(RuntimeError):  # noqa: D101
    pass


class BusType(IntEnum):  # noqa: D101
    # MATPOWER bus type codes
    PQ = 1
    PV = 2
    SLACK = 3


class LimitKind(StrEnum):  # noqa: D101
    ACTIVE = "active"
    APPARENT = "apparent"
    BOTH = "both"
    NONE = "none"

    @property
    def has_active(self) -> bool:  # noqa: D102
        return self in (LimitKind.ACTIVE, LimitKind.BOTH)

    @property
    def has_apparent(self) -> bool:  # noqa: D102
        return self in (LimitKind.APPARENT, LimitKind.BOTH)


@dataclass(frozen=True)
class CostCurve:
    """Quadratic generator cost, in $/h as a function of active power in p.u."""

    c2: float = 0.0
    c1: float = 0.0
    c0: float = 0.0

    def __post_init__(self) -> None:
        if self.c2 < 0:
            raise CaseSemanticError(f"Quadratic cost coefficient must be >= 0, got {self.c2}")

    def __call__(self, p: float) -> float:
        return self.c2 * p * p + self.c1 * p + self.c0


@dataclass(frozen=True)
class BusRecord:  # noqa: D101
    id: int
    bus_type: BusType
    p_load: float
    q_load: float
    v_min: float
    v_max: float
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    base_kv: float = 0.0

    def __post_init__(self) -> None:
        if not (0 < self.v_min <= self.v_max):
            raise CaseSemanticError(
                f"Bus {self.id} voltage bounds must satisfy 0 < v_min <= v_max, got "
                f"({self.v_min}, {self.v_max})"
            )
        if not (math.isfinite(self.p_load) and math.isfinite(self.q_load)):
            raise CaseSemanticError(f"Bus {self.id} has a non-finite load")


@dataclass(frozen=True)
class BranchRecord:
    """
    Branch in the MATPOWER pi-model convention.

    `b_sh` is the total line-charging susceptance, split evenly between the two ends. `tap` is the
    off-nominal turns ratio on the from side and `shift` the phase shift in radians.
    """

    from_bus: int
    to_bus: int
    r: float
    x: float
    b_sh: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    p_limit: float = 0.0
    s_limit: float = 0.0
    limit_kind: LimitKind = LimitKind.NONE

    def __post_init__(self) -> None:
        if self.x == 0:
            raise CaseSemanticError(f"Branch {self.from_bus}-{self.to_bus} has zero reactance")
        if self.from_bus == self.to_bus:
            raise CaseSemanticError(f"Branch {self.from_bus}-{self.to_bus} is a self loop")
        if self.p_limit < 0 or self.s_limit < 0:
            raise CaseSemanticError(f"Branch {self.from_bus}-{self.to_bus} has a negative limit")

    @property
    def transformer(self) -> bool:  # noqa: D102
        return self.tap != 1 or self.shift != 0

    def pi_model(self) -> tuple[complex, complex, complex, complex]:
        """Return the branch two-port admittances `(y_ff, y_ft, y_tf, y_tt)`."""
        ys = 1 / complex(self.r, self.x)
        ratio = self.tap * complex(math.cos(self.shift), math.sin(self.shift))
        y_tt = ys + 1j * self.b_sh / 2
        y_ff = y_tt / (ratio * ratio.conjugate())
        y_ft = -ys / ratio.conjugate()
        y_tf = -ys / ratio

        return y_ff, y_ft, y_tf, y_tt


@dataclass(frozen=True)
class GeneratorRecord:  # noqa: D101
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost: CostCurve = field(default_factory=CostCurve)
    participation: float = 0.0
    p_set: float = 0.0
    v_set: float = 1.0

    def __post_init__(self) -> None:
        if self.p_min > self.p_max:
            raise CaseSemanticError(f"Generator at bus {self.bus} has p_min > p_max")
        if self.q_min > self.q_max:
            raise CaseSemanticError(f"Generator at bus {self.bus} has q_min > q_max")
        if self.participation < 0:
            raise CaseSemanticError(f"Generator at bus {self.bus} has negative participation")


@dataclass(frozen=True)
class WindFarm:  # noqa: D101
    bus: int
    rated: float
    forecast: float
    cos_phi: float = 1.0

    def __post_init__(self) -> None:
        if not (0 <= self.forecast <= self.rated):
            raise CaseSemanticError(
                f"Wind farm at bus {self.bus} forecast {self.forecast} outside [0, {self.rated}]"
            )
        if not (0 < self.cos_phi <= 1):
            raise CaseSemanticError(f"Wind farm at bus {self.bus} has cos_phi outside (0, 1]")

    @property
    def tau(self) -> float:
        """Reactive-to-active power ratio at the power factor limit."""
        return math.sqrt((1 - self.cos_phi**2) / self.cos_phi**2)


@dataclass(frozen=True)
class NetworkCase:
    """
    A parsed grid, all quantities in p.u. on `base_mva`.

    Construction validates the network as a whole:
        * Bus ids are unique & exactly one bus is the slack
        * Every branch, generator, and wind farm references an existing bus
        * The branch graph is connected
    """

    name: str
    base_mva: float
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    generators: tuple[GeneratorRecord, ...]
    wind_farms: tuple[WindFarm, ...] = ()

    def __post_init__(self) -> None:
        ids = [bus.id for bus in self.buses]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise CaseSemanticError(f"Duplicate bus id(s): {dupes}")

        n_slack = sum(bus.bus_type == BusType.SLACK for bus in self.buses)
        if n_slack != 1:
            raise CaseSemanticError(f"Expected exactly one slack bus, found {n_slack}")

        known = set(ids)
        for branch in self.branches:
            if branch.from_bus not in known or branch.to_bus not in known:
                raise CaseSemanticError(
                    f"Dangling branch {branch.from_bus}-{branch.to_bus} references an unknown bus"
                )
        for gen in self.generators:
            if gen.bus not in known:
                raise CaseSemanticError(f"Generator references unknown bus {gen.bus}")
        for farm in self.wind_farms:
            if farm.bus not in known:
                raise CaseSemanticError(f"Wind farm references unknown bus {farm.bus}")

        if len(self.buses) > 1:
            n_components, _ = connected_components(self.adjacency, directed=False)
            if n_components != 1:
                raise CaseSemanticError(f"Network is split into {n_components} islands")

    @cached_property
    def bus_index(self) -> dict[int, int]:
        """Map external bus ids to matrix positions."""
        return {bus.id: pos for pos, bus in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:  # noqa: D102
        return len(self.buses)

    @cached_property
    def slack_position(self) -> int:  # noqa: D102
        return next(i for i, bus in enumerate(self.buses) if bus.bus_type == BusType.SLACK)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:  # noqa: D102
        rows = [self.bus_index[br.from_bus] for br in self.branches]
        cols = [self.bus_index[br.to_bus] for br in self.branches]
        data = np.ones(len(rows))
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n_bus, self.n_bus))

    @cached_property
    def gen_positions(self) -> np.ndarray:
        """Matrix position of each generator's bus."""
        return np.array([self.bus_index[gen.bus] for gen in self.generators], dtype=int)

    @cached_property
    def farm_positions(self) -> np.ndarray:
        """Matrix position of each wind farm's bus."""
        return np.array([self.bus_index[farm.bus] for farm in self.wind_farms], dtype=int)

    @cached_property
    def p_load(self) -> np.ndarray:  # noqa: D102
        return np.array([bus.p_load for bus in self.buses])

    @cached_property
    def q_load(self) -> np.ndarray:  # noqa: D102
        return np.array([bus.q_load for bus in self.buses])

    @cached_property
    def gen_incidence(self) -> sp.csr_matrix:
        """Bus-by-generator incidence, used to aggregate generator quantities per bus."""
        n_gen = len(self.generators)
        return sp.csr_matrix(
            (np.ones(n_gen), (self.gen_positions, np.arange(n_gen))), shape=(self.n_bus, n_gen)
        )

    @property
    def participation(self) -> np.ndarray:  # noqa: D102
        return np.array([gen.participation for gen in self.generators])

    @property
    def bus_participation(self) -> np.ndarray:
        """Participation factors aggregated per bus (the `d_G` vector)."""
        return np.asarray(self.gen_incidence @ self.participation).ravel()

    def with_wind_farms(self, farms: t.Iterable[WindFarm]) -> NetworkCase:  # noqa: D102
        return replace(self, wind_farms=tuple(farms))

    def with_participation(self, factors: t.Sequence[float]) -> NetworkCase:
        """Return a copy with the generator participation factors replaced, in generator order."""
        if len(factors) != len(self.generators):
            raise CaseSemanticError(
                f"Expected {len(self.generators)} participation factors, got {len(factors)}"
            )
        gens = tuple(
            replace(gen, participation=float(d)) for gen, d in zip(self.generators, factors)
        )
        return replace(self, generators=gens)


# Column indices into the MATPOWER tables
BUS_COLS = {
    "id": 0, "type": 1, "pd": 2, "qd": 3, "gs": 4, "bs": 5, "base_kv": 9, "vmax": 11, "vmin": 12
}  # fmt: skip
GEN_COLS = {"bus": 0, "pg": 1, "qmax": 3, "qmin": 4, "vg": 5, "status": 7, "pmax": 8, "pmin": 9}
BRANCH_COLS = {
    "f": 0, "t": 1, "r": 2, "x": 3, "b": 4, "rate_a": 5, "ratio": 8, "angle": 9, "status": 10
}  # fmt: skip
MIN_WIDTH = {"bus": 13, "gen": 10, "branch": 11, "gencost": 4}

_BASE_RE = re.compile(r"^\s*mpc\.baseMVA\s*=\s*([^;]+);")
_TABLE_RE = re.compile(r"^\s*mpc\.(bus|gen|branch|gencost)\s*=\s*\[(.*)$")


def _parse_tables(text: str) -> tuple[float, dict[str, list[tuple[int, list[float]]]]]:
    """Scan the case text for the base power & the numeric tables, keeping source line numbers."""
    base_mva = None
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    current: str | None = None
    start_line = 0
    pending: list[float] = []

    def _flush(lineno: int) -> None:
        nonlocal pending
        if pending:
            assert current is not None
            tables[current].append((lineno, pending))
            pending = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0]

        if current is None:
            if m := _BASE_RE.match(line):
                try:
                    base_mva = float(m.group(1))
                except ValueError as e:
                    raise CaseSyntaxError(f"Invalid baseMVA {m.group(1)!r}", lineno) from e
                continue

            if m := _TABLE_RE.match(line):
                current = m.group(1)
                start_line = lineno
                tables[current] = []
                line = m.group(2)
            else:
                continue

        body, closed, _ = line.partition("]")
        for chunk_idx, chunk in enumerate(body.split(";")):
            if chunk_idx > 0:
                _flush(lineno)
            for token in chunk.replace(",", " ").split():
                try:
                    pending.append(float(token))
                except ValueError as e:
                    raise CaseSyntaxError(f"Invalid numeric token {token!r}", lineno) from e

        # A newline also terminates a row
        _flush(lineno)
        if closed:
            current = None

    if current is not None:
        raise CaseSyntaxError(f"Unterminated mpc.{current} table", start_line)
    if base_mva is None:
        raise CaseSemanticError("Case is missing mpc.baseMVA")
    if base_mva <= 0:
        raise CaseSemanticError(f"baseMVA must be positive, got {base_mva}")

    for name, rows in tables.items():
        for lineno, row in rows:
            if len(row) < MIN_WIDTH[name]:
                raise CaseSyntaxError(
                    f"mpc.{name} row has {len(row)} columns, expected at least {MIN_WIDTH[name]}",
                    lineno,
                )

    return base_mva, tables


def _parse_cost(lineno: int, row: list[float], base_mva: float) -> CostCurve:
    model, n = int(row[0]), int(row[3])
    if model != 2:
        raise CaseSemanticError(f"line {lineno}: only polynomial (model 2) costs are supported")
    if len(row) < 4 + n:
        raise CaseSyntaxError(f"gencost row declares {n} coefficients but has fewer", lineno)

    coeffs = row[4 : 4 + n]
    if n > 3:
        if any(coeffs[: n - 3]):
            raise CaseSemanticError(f"line {lineno}: polynomial costs above degree 2 unsupported")
        coeffs = coeffs[n - 3 :]

    # Pad to (c2, c1, c0)
    c2, c1, c0 = [0.0] * (3 - len(coeffs)) + list(coeffs)
    return CostCurve(c2=c2 * base_mva**2, c1=c1 * base_mva, c0=c0)


def parse_case(text: str, name: str = "case") -> NetworkCase:
    """
    Parse MATPOWER-style case text into a `NetworkCase`.

    Only the `mpc.baseMVA`, `mpc.bus`, `mpc.gen`, `mpc.branch`, and `mpc.gencost` sections are
    read; everything else in the file is ignored. Out-of-service generators and branches are
    dropped. Branch ratings are read from `rateA` as apparent power limits; a zero rating means
    the branch is unlimited.
    """
    base, tables = _parse_tables(text)
    for required in ("bus", "gen", "branch"):
        if required not in tables:
            raise CaseSemanticError(f"Case is missing the mpc.{required} table")

    buses = []
    for lineno, row in tables["bus"]:
        bus_type = int(row[BUS_COLS["type"]])
        if bus_type not in {member.value for member in BusType}:
            raise CaseSemanticError(f"line {lineno}: unsupported bus type {bus_type}")

        buses.append(
            BusRecord(
                id=int(row[BUS_COLS["id"]]),
                bus_type=BusType(bus_type),
                p_load=row[BUS_COLS["pd"]] / base,
                q_load=row[BUS_COLS["qd"]] / base,
                v_min=row[BUS_COLS["vmin"]],
                v_max=row[BUS_COLS["vmax"]],
                shunt_g=row[BUS_COLS["gs"]] / base,
                shunt_b=row[BUS_COLS["bs"]] / base,
                base_kv=row[BUS_COLS["base_kv"]],
            )
        )

    costs = tables.get("gencost", [])
    if not costs:
        logger.warning("Case has no mpc.gencost table, generator costs default to zero")

    generators = []
    for idx, (lineno, row) in enumerate(tables["gen"]):
        if row[GEN_COLS["status"]] <= 0:
            continue

        cost = CostCurve()
        if idx < len(costs):
            cost = _parse_cost(*costs[idx], base_mva=base)

        generators.append(
            GeneratorRecord(
                bus=int(row[GEN_COLS["bus"]]),
                p_min=row[GEN_COLS["pmin"]] / base,
                p_max=row[GEN_COLS["pmax"]] / base,
                q_min=row[GEN_COLS["qmin"]] / base,
                q_max=row[GEN_COLS["qmax"]] / base,
                cost=cost,
                p_set=row[GEN_COLS["pg"]] / base,
                v_set=row[GEN_COLS["vg"]],
            )
        )

    branches = []
    for lineno, row in tables["branch"]:
        if row[BRANCH_COLS["status"]] <= 0:
            continue

        ratio, angle = row[BRANCH_COLS["ratio"]], row[BRANCH_COLS["angle"]]
        rate = row[BRANCH_COLS["rate_a"]] / base
        try:
            branches.append(
                BranchRecord(
                    from_bus=int(row[BRANCH_COLS["f"]]),
                    to_bus=int(row[BRANCH_COLS["t"]]),
                    r=row[BRANCH_COLS["r"]],
                    x=row[BRANCH_COLS["x"]],
                    b_sh=row[BRANCH_COLS["b"]],
                    tap=ratio if ratio != 0 else 1.0,
                    shift=math.radians(angle),
                    p_limit=rate,
                    s_limit=rate,
                    limit_kind=LimitKind.APPARENT if rate > 0 else LimitKind.NONE,
                )
            )
        except CaseSemanticError as e:
            raise CaseSemanticError(f"line {lineno}: {e}") from e

    # PV buses without an in-service unit behave as load buses
    gen_buses = {gen.bus for gen in generators}
    for idx, bus in enumerate(buses):
        if bus.bus_type == BusType.PV and bus.id not in gen_buses:
            logger.warning(f"Bus {bus.id} is typed PV but has no in-service generator, using PQ")
            buses[idx] = replace(bus, bus_type=BusType.PQ)

    case = NetworkCase(
        name=name,
        base_mva=base,
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(generators),
    )
    logger.info(
        f"Parsed case '{name}': {case.n_bus} buses, {len(branches)} branches, "
        f"{len(generators)} generators"
    )
    return case


def _fmt(val: float) -> str:
    return repr(float(val))


def format_case(case: NetworkCase) -> str:
    """
    Render the case back to MATPOWER text.

    Wind farms & participation factors are not part of the MATPOWER format and are not written.
    """
    base = case.base_mva
    lines = [
        f"function mpc = {case.name}",
        "mpc.version = '2';",
        f"mpc.baseMVA = {_fmt(base)};",
        "",
        "%% bus data",
        "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin",
        "mpc.bus = [",
    ]
    for bus in case.buses:
        vals = [
            str(bus.id),
            str(int(bus.bus_type)),
            _fmt(bus.p_load * base),
            _fmt(bus.q_load * base),
            _fmt(bus.shunt_g * base),
            _fmt(bus.shunt_b * base),
            "1",
            "1",
            "0",
            _fmt(bus.base_kv),
            "1",
            _fmt(bus.v_max),
            _fmt(bus.v_min),
        ]
        lines.append("\t" + "\t".join(vals) + ";")
    lines.extend(["];", "", "%% generator data", "mpc.gen = ["])

    for gen in case.generators:
        vals = [
            str(gen.bus),
            _fmt(gen.p_set * base),
            "0",
            _fmt(gen.q_max * base),
            _fmt(gen.q_min * base),
            _fmt(gen.v_set),
            _fmt(base),
            "1",
            _fmt(gen.p_max * base),
            _fmt(gen.p_min * base),
        ]
        lines.append("\t" + "\t".join(vals) + ";")
    lines.extend(["];", "", "%% branch data", "mpc.branch = ["])

    for br in case.branches:
        rate = 0.0
        if br.limit_kind.has_apparent:
            rate = br.s_limit * base
        elif br.limit_kind.has_active:
            rate = br.p_limit * base
        vals = [
            str(br.from_bus),
            str(br.to_bus),
            _fmt(br.r),
            _fmt(br.x),
            _fmt(br.b_sh),
            _fmt(rate),
            _fmt(rate),
            _fmt(rate),
            _fmt(br.tap) if br.transformer else "0",
            _fmt(math.degrees(br.shift)),
            "1",
            "-360",
            "360",
        ]
        lines.append("\t" + "\t".join(vals) + ";")
    lines.extend(["];", "", "%% generator cost data", "mpc.gencost = ["])

    for gen in case.generators:
        c = gen.cost
        vals = ["2", "0", "0", "3", _fmt(c.c2 / base**2), _fmt(c.c1 / base), _fmt(c.c0)]
        lines.append("\t" + "\t".join(vals) + ";")
    lines.append("];")

    return "\n".join(lines) + "\n"


def fetch_case_text(url: str, timeout: float = 30.0) -> str:
    """Download case text from the provided URL."""
    try:
        with httpx.Client(timeout=timeout, follow_redirects=True) as client:
            logger.info(f"Requesting case file from {url}")
            r = client.get(url)
    except httpx.HTTPError as e:
        raise CaseFetchError(f"Error retrieving case file from {url}") from e

    if r.status_code != httpx.codes.OK:
        raise CaseFetchError(f"Bad response received for {url}: {r.status_code}, {r.text[:200]}")

    return r.text


def load_case(source: str | Path) -> NetworkCase:
    """Load a case from a local path or an http(s) URL."""
    source_str = str(source)
    if source_str.startswith(("http://", "https://")):
        text = fetch_case_text(source_str)
        name = Path(httpx.URL(source_str).path).stem or "case"
    else:
        path = Path(source)
        text = path.read_text()
        name = path.stem

    return parse_case(text, name=name)


def transform_case(
    case: NetworkCase,
    min_transformer_r: float = 0.0,
    load_scale: float = 1.0,
    line_limit_scale: float = 1.0,
    voltage_bounds: tuple[float, float] | None = None,
    limit_kind: LimitKind | None = None,
) -> NetworkCase:
    """
    Apply the study modifications to a parsed case.

    Transformer resistances are raised to at least `min_transformer_r`, active & reactive loads
    are scaled by `load_scale`, and every branch rating by `line_limit_scale`. If provided,
    `voltage_bounds` replaces every bus's voltage limits and `limit_kind` replaces the limit kind of
    every rated branch.
    """
    if load_scale <= 0 or line_limit_scale <= 0:
        raise CaseSemanticError("Case scale factors must be positive")

    buses = []
    for bus in case.buses:
        v_min, v_max = voltage_bounds if voltage_bounds is not None else (bus.v_min, bus.v_max)
        buses.append(
            replace(
                bus,
                p_load=bus.p_load * load_scale,
                q_load=bus.q_load * load_scale,
                v_min=v_min,
                v_max=v_max,
            )
        )

    branches = []
    for br in case.branches:
        r = br.r
        if br.transformer:
            r = max(r, min_transformer_r)

        kind = br.limit_kind
        if limit_kind is not None and kind != LimitKind.NONE:
            kind = limit_kind

        branches.append(
            replace(
                br,
                r=r,
                p_limit=br.p_limit * line_limit_scale,
                s_limit=br.s_limit * line_limit_scale,
                limit_kind=kind,
            )
        )

    return replace(case, buses=tuple(buses), branches=tuple(branches))


def build_branch_admittance(case: NetworkCase) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Build the from-end & to-end branch admittance matrices, so that `I_f = Y_f @ V`."""
    n_l, n_b = len(case.branches), case.n_bus
    f = np.array([case.bus_index[br.from_bus] for br in case.branches], dtype=int)
    to = np.array([case.bus_index[br.to_bus] for br in case.branches], dtype=int)
    pi = np.array([br.pi_model() for br in case.branches], dtype=complex).reshape(n_l, 4)

    rows = np.r_[np.arange(n_l), np.arange(n_l)]
    y_from = sp.csr_matrix((np.r_[pi[:, 0], pi[:, 1]], (rows, np.r_[f, to])), shape=(n_l, n_b))
    y_to = sp.csr_matrix((np.r_[pi[:, 2], pi[:, 3]], (rows, np.r_[f, to])), shape=(n_l, n_b))

    return y_from, y_to


def build_admittance(case: NetworkCase) -> sp.csr_matrix:
    """Build the complex bus admittance matrix, including taps, shifts, and all shunts."""
    n_b = case.n_bus
    y_from, y_to = build_branch_admittance(case)

    f = [case.bus_index[br.from_bus] for br in case.branches]
    to = [case.bus_index[br.to_bus] for br in case.branches]
    n_l = len(case.branches)
    c_from = sp.csr_matrix((np.ones(n_l), (np.arange(n_l), f)), shape=(n_l, n_b))
    c_to = sp.csr_matrix((np.ones(n_l), (np.arange(n_l), to)), shape=(n_l, n_b))

    y_shunt = np.array([complex(bus.shunt_g, bus.shunt_b) for bus in case.buses])
    y_bus = c_from.T @ y_from + c_to.T @ y_to + sp.diags(y_shunt)

    return sp.csr_matrix(y_bus)


def _symmetrize(a: sp.spmatrix) -> sp.csr_matrix:
    out = sp.csr_matrix((a + a.T) / 2)
    out.eliminate_zeros()
    return out


def active_embedding(a: sp.spmatrix) -> sp.csr_matrix:
    """
    Real embedding of a complex bus-row matrix such that `Tr{A_emb XX^T} = Re(V^H A V)`.

    For `A = Y_k` this yields the active power injection at bus `k` with `X = [Re(V); Im(V)]`.
    """
    s = a + a.T
    d = a - a.T
    return _symmetrize(0.5 * sp.bmat([[s.real, -d.imag], [d.imag, s.real]]))


def reactive_embedding(a: sp.spmatrix) -> sp.csr_matrix:
    """Real embedding of a complex bus-row matrix such that `Tr{A_emb XX^T} = -Im(V^H A V)`."""
    s = a + a.T
    d = a - a.T
    return _symmetrize(-0.5 * sp.bmat([[s.imag, d.real], [-d.real, s.imag]]))


def voltage_embedding(k: int, n_bus: int) -> sp.csr_matrix:
    """Selector with `Tr{M_k XX^T} = |V_k|^2`."""
    idx = [k, k + n_bus]
    return sp.csr_matrix((np.ones(2), (idx, idx)), shape=(2 * n_bus, 2 * n_bus))


@dataclass(frozen=True)
class MatrixSet:
    """
    The admittance matrix & the real-embedded auxiliary matrices of every bus and branch.

    Branch matrices describe the from side of each branch. Every embedded matrix is a symmetric
    `2n_b x 2n_b` sparse matrix acting on `W = XX^T`, `X = [Re(V); Im(V)]`.
    """

    admittance: sp.csr_matrix
    bus_admittance: tuple[sp.csr_matrix, ...]
    bus_active: tuple[sp.csr_matrix, ...]
    bus_reactive: tuple[sp.csr_matrix, ...]
    bus_voltage: tuple[sp.csr_matrix, ...]
    line_admittance: tuple[sp.csr_matrix, ...]
    line_active: tuple[sp.csr_matrix, ...]
    line_reactive: tuple[sp.csr_matrix, ...]

    @property
    def n_bus(self) -> int:  # noqa: D102
        return int(self.admittance.shape[0])

    @property
    def dim(self) -> int:  # noqa: D102
        return 2 * self.n_bus

    @cached_property
    def operators(self) -> dict[str, sp.csr_matrix]:
        """
        Stacked trace operators, one row per matrix flattened in column-major order.

        `operators[kind] @ W.ravel(order="F")` evaluates every `Tr{A W}` of that kind at once.
        """
        stacks = {
            "p": self.bus_active,
            "q": self.bus_reactive,
            "v": self.bus_voltage,
            "line_p": self.line_active,
            "line_q": self.line_reactive,
        }
        out = {}
        for kind, mats in stacks.items():
            if not mats:
                out[kind] = sp.csr_matrix((0, self.dim**2))
                continue
            rows = [sp.csr_matrix(m.T.reshape(1, self.dim**2)) for m in mats]
            out[kind] = sp.csr_matrix(sp.vstack(rows))

        return out

    def traces(self, kind: str, w: np.ndarray) -> np.ndarray:
        """Evaluate `Tr{A W}` for every matrix of the given kind."""
        return np.asarray(self.operators[kind] @ np.asarray(w).ravel(order="F")).ravel()


def build_matrix_set(case: NetworkCase) -> MatrixSet:
    """Build the auxiliary matrix set for the provided case."""
    y_bus = build_admittance(case)
    n_b = case.n_bus

    bus_adm, bus_p, bus_q, bus_v = [], [], [], []
    for k in range(n_b):
        # Y_k = e_k e_k^T Y keeps only row k
        selector = sp.csr_matrix(([1.0], ([k], [k])), shape=(n_b, n_b))
        y_k = sp.csr_matrix(selector @ y_bus)
        bus_adm.append(y_k)
        bus_p.append(active_embedding(y_k))
        bus_q.append(reactive_embedding(y_k))
        bus_v.append(voltage_embedding(k, n_b))

    line_adm, line_p, line_q = [], [], []
    for br in case.branches:
        l, m = case.bus_index[br.from_bus], case.bus_index[br.to_bus]
        y_ff, y_ft, _, _ = br.pi_model()
        y_lm = sp.csr_matrix(([y_ff, y_ft], ([l, l], [l, m])), shape=(n_b, n_b), dtype=complex)
        line_adm.append(y_lm)
        line_p.append(active_embedding(y_lm))
        line_q.append(reactive_embedding(y_lm))

    logger.debug(f"Built matrix set for {n_b} buses and {len(case.branches)} branches")
    return MatrixSet(
        admittance=y_bus,
        bus_admittance=tuple(bus_adm),
        bus_active=tuple(bus_p),
        bus_reactive=tuple(bus_q),
        bus_voltage=tuple(bus_v),
        line_admittance=tuple(line_adm),
        line_active=tuple(line_p),
        line_reactive=tuple(line_q),
    )


def voltage_to_x(v: np.ndarray) -> np.ndarray:
    """Stack a complex voltage vector into its real form `[Re(V); Im(V)]`."""
    v = np.asarray(v, dtype=complex)
    return np.concatenate([v.real, v.imag])
