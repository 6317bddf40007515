"""Phase-aware planning model of a distribution feeder.

The model is parsed from a small line-oriented text format, validated once,
and then treated as immutable.  Load sections (groups of buses separated by
switches) and the switch-level "meta graph" over sections are derived here,
together with the cycle and topology enumeration routines used by the MILP
builder and by the validation oracles.
"""

from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple

PHASES = "ABC"

#: id of the virtual node that joins every source section in the meta graph
SUPER_SOURCE = -1


class NetworkError(ValueError):
    """Semantic problem with a network model (dangling id, bad phase, ...)."""


class NetworkSyntaxError(NetworkError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class EnumerationOverflow(RuntimeError):
    pass


def _phase_set(text: str) -> str:
    text = text.upper()
    if not text or any(c not in PHASES for c in text) or len(set(text)) != len(text):
        raise ValueError(f"invalid phase set {text!r}")
    return "".join(sorted(text))


@dataclass(frozen=True)
class Bus:
    id: str
    phases: str
    is_source: bool = False


@dataclass(frozen=True)
class LineSegment:
    id: str
    from_bus: str
    to_bus: str
    phases: str
    is_switch: bool = False
    normal_closed: bool = True
    loss_fraction: float = 0.0


@dataclass(frozen=True)
class Load:
    id: str
    bus: str
    phase: str
    forecast_p: float
    forecast_q: float
    sigma_p: float
    sigma_q: float
    has_smart_meter: bool = False


@dataclass(frozen=True)
class CapacitorBank:
    id: str
    bus: str
    rated_q: tuple[tuple[str, float], ...]  # (phase, kvar) pairs

    @property
    def phases(self) -> str:
        return "".join(ph for ph, _ in self.rated_q)

    def kvar(self, phase: str) -> float:
        return dict(self.rated_q).get(phase, 0.0)


@dataclass(frozen=True)
class LoadSection:
    id: int
    member_buses: frozenset[str]
    member_loads: frozenset[str]
    boundary_switches: tuple[str, ...]
    supply_switches: tuple[str, ...]
    is_source: bool = False


class MetaEdge(NamedTuple):
    switch: str | None  # None for the virtual source edges
    a: int
    b: int


class Topology(NamedTuple):
    switch_status: dict[str, int]
    section_status: dict[int, int]


@dataclass(frozen=True, eq=False)
class NetworkModel:
    buses: tuple[Bus, ...]
    lines: tuple[LineSegment, ...]
    loads: tuple[Load, ...] = ()
    capacitors: tuple[CapacitorBank, ...] = ()
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        warnings = validate(self)
        sections, sec_warn = _derive_sections(self)
        object.__setattr__(self, "sections", tuple(sections))
        object.__setattr__(self, "warnings", tuple(warnings) + tuple(sec_warn))

    # the derived sections participate in equality via the primary fields only
    def __eq__(self, other):
        if not isinstance(other, NetworkModel):
            return NotImplemented
        return (self.buses, self.lines, self.loads, self.capacitors) == (
            other.buses, other.lines, other.loads, other.capacitors)

    def __hash__(self):
        return hash((self.buses, self.lines, self.loads, self.capacitors))

    @cached_property
    def bus(self) -> dict[str, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def line(self) -> dict[str, LineSegment]:
        return {ln.id: ln for ln in self.lines}

    @cached_property
    def load(self) -> dict[str, Load]:
        return {ld.id: ld for ld in self.loads}

    @cached_property
    def capacitor(self) -> dict[str, CapacitorBank]:
        return {c.id: c for c in self.capacitors}

    @property
    def source_buses(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.buses if b.is_source)

    @cached_property
    def switches(self) -> tuple[LineSegment, ...]:
        return tuple(ln for ln in self.lines if ln.is_switch)

    @cached_property
    def switch_ids(self) -> tuple[str, ...]:
        return tuple(sw.id for sw in self.switches)

    @cached_property
    def section_of_bus(self) -> dict[str, int]:
        return {b: s.id for s in self.sections for b in s.member_buses}

    @cached_property
    def section_of_load(self) -> dict[str, int]:
        return {ld.id: self.section_of_bus[ld.bus] for ld in self.loads}

    @cached_property
    def loads_at(self) -> dict[str, tuple[Load, ...]]:
        out: dict[str, list[Load]] = defaultdict(list)
        for ld in self.loads:
            out[ld.bus].append(ld)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def caps_at(self) -> dict[str, tuple[CapacitorBank, ...]]:
        out: dict[str, list[CapacitorBank]] = defaultdict(list)
        for c in self.capacitors:
            out[c.bus].append(c)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def source_sections(self) -> tuple[int, ...]:
        return tuple(s.id for s in self.sections if s.is_source)

    @cached_property
    def meta_edges(self) -> tuple[MetaEdge, ...]:
        """Switch edges between sections plus virtual edges to SUPER_SOURCE."""
        sec = self.section_of_bus
        edges = [MetaEdge(sw.id, sec[sw.from_bus], sec[sw.to_bus]) for sw in self.switches]
        edges += [MetaEdge(None, SUPER_SOURCE, s) for s in self.source_sections]
        return tuple(edges)

    @cached_property
    def cap_phases(self) -> tuple[tuple[str, str], ...]:
        return tuple((c.id, ph) for c in self.capacitors for ph in c.phases)

    def normal_switch_status(self) -> dict[str, int]:
        return {sw.id: int(sw.normal_closed) for sw in self.switches}


# --------------------------------------------------------------------------
# parsing / serialization


def _parse_number(key: str, value: str, lineno: int, col: int) -> float:
    try:
        x = float(value)
    except ValueError:
        raise NetworkSyntaxError(f"{key}= expects a number, got {value!r}", lineno, col) from None
    if not math.isfinite(x):
        raise NetworkSyntaxError(f"{key}= must be finite", lineno, col)
    return x


def _tokens(raw: str, lineno: int) -> list[tuple[str, int]]:
    text = raw.split("#", 1)[0]
    out = []
    pos = 0
    for tok in text.split():
        pos = text.index(tok, pos)
        out.append((tok, pos + 1))
        pos += len(tok)
    return out


def parse_network(text: str) -> NetworkModel:
    """Parse and validate a network file.

    Raises NetworkSyntaxError with a line/column position for malformed
    records and NetworkError for semantic problems.
    """
    buses: list[Bus] = []
    lines: list[LineSegment] = []
    loads: list[Load] = []
    caps: list[CapacitorBank] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = _tokens(raw, lineno)
        if not toks:
            continue
        kind, _ = toks[0]
        bare: list[tuple[str, int]] = []
        options: dict[str, tuple[str, int]] = {}
        for tok, col in toks[1:]:
            if "=" in tok:
                key, _, value = tok.partition("=")
                if not key or not value:
                    raise NetworkSyntaxError(f"malformed option {tok!r}", lineno, col)
                if key in options:
                    raise NetworkSyntaxError(f"duplicate option {key!r}", lineno, col)
                options[key] = (value, col)
            else:
                bare.append((tok, col))
        positional: list[tuple[str, int]] = []
        flags: dict[str, int] = {}

        def need(n: int, names: str):
            if len(bare) < n:
                raise NetworkSyntaxError(f"'{kind}' expects {names}", lineno, toks[-1][1])
            positional[:] = bare[:n]
            flags.update(bare[n:])

        def phases_opt():
            if "phases" not in options:
                raise NetworkSyntaxError("missing phases=", lineno, toks[0][1])
            value, col = options.pop("phases")
            try:
                return _phase_set(value)
            except ValueError as exc:
                raise NetworkSyntaxError(str(exc), lineno, col) from None

        def num(key: str, default=None):
            if key not in options:
                if default is None:
                    raise NetworkSyntaxError(f"missing {key}=", lineno, toks[0][1])
                return default
            value, col = options.pop(key)
            return _parse_number(key, value, lineno, col)

        def finish(allowed_flags: Iterable[str] = ()):
            for key, (_, col) in options.items():
                raise NetworkSyntaxError(f"unknown option {key!r}", lineno, col)
            for flag, col in flags.items():
                if flag not in allowed_flags:
                    raise NetworkSyntaxError(f"unknown flag {flag!r}", lineno, col)

        if kind == "bus":
            need(1, "<id>")
            ph = phases_opt()
            is_source = "source" in flags
            finish({"source"})
            buses.append(Bus(positional[0][0], ph, is_source))
        elif kind == "line":
            need(3, "<id> <from> <to>")
            ph = phases_opt()
            is_switch = "switch" in flags
            normal_closed = True
            if "normal" in options:
                value, col = options.pop("normal")
                if not is_switch:
                    raise NetworkSyntaxError("normal= is only valid on switches", lineno, col)
                if value not in ("open", "closed"):
                    raise NetworkSyntaxError("normal= must be open or closed", lineno, col)
                normal_closed = value == "closed"
            loss = num("loss", 0.0)
            finish({"switch"})
            lines.append(LineSegment(positional[0][0], positional[1][0], positional[2][0],
                                     ph, is_switch, normal_closed, loss))
        elif kind == "load":
            need(3, "<id> <bus> <phase>")
            ph_tok, ph_col = positional[2]
            if ph_tok.upper() not in PHASES or len(ph_tok) != 1:
                raise NetworkSyntaxError(f"invalid phase {ph_tok!r}", lineno, ph_col)
            ld = Load(positional[0][0], positional[1][0], ph_tok.upper(),
                      num("p"), num("q"), num("sigp"), num("sigq"), "meter" in flags)
            finish({"meter"})
            loads.append(ld)
        elif kind == "cap":
            need(2, "<id> <bus>")
            rated = []
            for ph in PHASES:
                key = "q" + ph.lower()
                if key in options:
                    rated.append((ph, num(key)))
            if not rated:
                raise NetworkSyntaxError("capacitor needs at least one of qa=/qb=/qc=", lineno, toks[0][1])
            finish()
            caps.append(CapacitorBank(positional[0][0], positional[1][0], tuple(rated)))
        else:
            raise NetworkSyntaxError(f"unknown record type {kind!r}", lineno, toks[0][1])

    return NetworkModel(tuple(buses), tuple(lines), tuple(loads), tuple(caps))


def _fmt(x: float) -> str:
    return repr(float(x)) if x != int(x) else str(int(x)) if abs(x) < 1e15 else repr(float(x))


def format_network(model: NetworkModel) -> str:
    out = []
    for b in model.buses:
        out.append(f"bus {b.id} phases={b.phases}" + (" source" if b.is_source else ""))
    for ln in model.lines:
        s = f"line {ln.id} {ln.from_bus} {ln.to_bus} phases={ln.phases}"
        if ln.is_switch:
            s += " normal=" + ("closed" if ln.normal_closed else "open")
        if ln.loss_fraction:
            s += f" loss={_fmt(ln.loss_fraction)}"
        if ln.is_switch:
            s += " switch"
        out.append(s)
    for ld in model.loads:
        s = (f"load {ld.id} {ld.bus} {ld.phase} p={_fmt(ld.forecast_p)} q={_fmt(ld.forecast_q)} "
             f"sigp={_fmt(ld.sigma_p)} sigq={_fmt(ld.sigma_q)}")
        out.append(s + (" meter" if ld.has_smart_meter else ""))
    for c in model.capacitors:
        out.append(f"cap {c.id} {c.bus} " + " ".join(f"q{ph.lower()}={_fmt(q)}" for ph, q in c.rated_q))
    return "\n".join(out) + "\n"


def bundled_network_path(name: str = "desk123.net") -> str:
    """Path of a network file shipped with the package."""
    from importlib.resources import files
    return str(files("gridtop") / "data" / name)


def load_network(path) -> NetworkModel:
    with open(path, encoding="utf-8") as fh:
        return parse_network(fh.read())


# --------------------------------------------------------------------------
# validation


class _UnionFind:
    def __init__(self, items: Iterable = ()):
        self.parent = {x: x for x in items}

    def add(self, x):
        self.parent.setdefault(x, x)

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[rb] = ra
        return True


def _check_unique(kind: str, ids: list[str]):
    seen = set()
    for i in ids:
        if i in seen:
            raise NetworkError(f"duplicate {kind} id {i!r}")
        seen.add(i)


def validate(model: NetworkModel) -> list[str]:
    """Check all referential and structural invariants; return warnings."""
    warnings: list[str] = []
    _check_unique("bus", [b.id for b in model.buses])
    _check_unique("line", [ln.id for ln in model.lines])
    _check_unique("load", [ld.id for ld in model.loads])
    _check_unique("capacitor", [c.id for c in model.capacitors])
    buses = {b.id: b for b in model.buses}
    if not any(b.is_source for b in model.buses):
        raise NetworkError("no source bus")

    for ln in model.lines:
        for end in (ln.from_bus, ln.to_bus):
            if end not in buses:
                raise NetworkError(f"line {ln.id} references undefined bus {end!r}")
        if ln.from_bus == ln.to_bus:
            raise NetworkError(f"line {ln.id} connects bus {ln.from_bus!r} to itself")
        for end in (ln.from_bus, ln.to_bus):
            if not set(ln.phases) <= set(buses[end].phases):
                raise NetworkError(f"line {ln.id} phases {ln.phases} not present at bus {end!r}")
        if not (0.0 <= ln.loss_fraction < 1.0):
            raise NetworkError(f"line {ln.id} loss fraction must be in [0, 1)")
        if not ln.is_switch and not ln.normal_closed:
            raise NetworkError(f"non-switch line {ln.id} cannot be normally open")

    for ld in model.loads:
        if ld.bus not in buses:
            raise NetworkError(f"load {ld.id} references undefined bus {ld.bus!r}")
        if ld.phase not in buses[ld.bus].phases:
            raise NetworkError(f"load {ld.id} phase {ld.phase} not present at bus {ld.bus!r}")
        if ld.sigma_p <= 0 or ld.sigma_q <= 0:
            raise NetworkError(f"load {ld.id} needs positive sigp/sigq")
        if ld.forecast_p < 0:
            raise NetworkError(f"load {ld.id} has negative forecast p")

    for c in model.capacitors:
        if c.bus not in buses:
            raise NetworkError(f"capacitor {c.id} references undefined bus {c.bus!r}")
        for ph, q in c.rated_q:
            if ph not in buses[c.bus].phases:
                raise NetworkError(f"capacitor {c.id} phase {ph} not present at bus {c.bus!r}")
            if q <= 0:
                raise NetworkError(f"capacitor {c.id} rated kvar must be positive on phase {ph}")

    uf = _UnionFind(buses)
    for ln in model.lines:
        uf.union(ln.from_bus, ln.to_bus)
    if len({uf.find(b) for b in buses}) != 1:
        raise NetworkError("graph with all switches closed is not connected")

    uf = _UnionFind(buses)
    for ln in model.lines:
        if not ln.is_switch and not uf.union(ln.from_bus, ln.to_bus):
            raise NetworkError(f"cycle without a switch through line {ln.id}; radiality unachievable")
    return warnings


def _derive_sections(model: NetworkModel) -> tuple[list[LoadSection], list[str]]:
    uf = _UnionFind(b.id for b in model.buses)
    for ln in model.lines:
        if not ln.is_switch:
            uf.union(ln.from_bus, ln.to_bus)
    order: dict = {}
    members: dict[int, list[str]] = defaultdict(list)
    for b in model.buses:
        root = uf.find(b.id)
        sid = order.setdefault(root, len(order))
        members[sid].append(b.id)
    sec_of = {b: sid for sid, bs in members.items() for b in bs}

    boundary: dict[int, list[str]] = defaultdict(list)
    supply: dict[int, list[str]] = defaultdict(list)
    for sw in model.lines:
        if not sw.is_switch:
            continue
        a, b = sec_of[sw.from_bus], sec_of[sw.to_bus]
        for s in {a, b}:
            boundary[s].append(sw.id)
            if a != b:
                supply[s].append(sw.id)

    loads_in: dict[int, list[str]] = defaultdict(list)
    for ld in model.loads:
        loads_in[sec_of[ld.bus]].append(ld.id)

    sections = []
    warnings = []
    source_buses = {b.id for b in model.buses if b.is_source}
    for sid in sorted(members):
        srcs = source_buses.intersection(members[sid])
        if len(srcs) > 1:
            raise NetworkError(
                f"sources {sorted(srcs)} share load section {sid}; they can never be separated")
        if not loads_in[sid]:
            warnings.append(f"load section {sid} contains no loads")
        sections.append(LoadSection(
            id=sid,
            member_buses=frozenset(members[sid]),
            member_loads=frozenset(loads_in[sid]),
            boundary_switches=tuple(boundary[sid]),
            supply_switches=tuple(supply[sid]),
            is_source=bool(srcs),
        ))
    return sections, warnings


def derive_load_sections(model: NetworkModel) -> list[LoadSection]:
    return list(model.sections)


# --------------------------------------------------------------------------
# cycles


def fundamental_cycles(model: NetworkModel) -> list[list[str]]:
    """Cycle basis of the all-closed graph, each cycle as a line-id sequence.

    Built from a BFS spanning forest: every non-tree line closes exactly one
    cycle with the tree path between its endpoints.
    """
    adj: dict[str, list[tuple[str, str]]] = defaultdict(list)
    for ln in model.lines:
        adj[ln.from_bus].append((ln.to_bus, ln.id))
        adj[ln.to_bus].append((ln.from_bus, ln.id))
    parent: dict[str, tuple[str | None, str | None]] = {}
    depth: dict[str, int] = {}
    tree_lines = set()
    for root in [b.id for b in model.buses]:
        if root in parent:
            continue
        parent[root] = (None, None)
        depth[root] = 0
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v, lid in adj[u]:
                if v not in parent:
                    parent[v] = (u, lid)
                    depth[v] = depth[u] + 1
                    tree_lines.add(lid)
                    queue.append(v)

    cycles = []
    for ln in model.lines:
        if ln.id in tree_lines:
            continue
        u, v = ln.from_bus, ln.to_bus
        left, right = [], []
        while depth[u] > depth[v]:
            left.append(parent[u][1]); u = parent[u][0]
        while depth[v] > depth[u]:
            right.append(parent[v][1]); v = parent[v][0]
        while u != v:
            left.append(parent[u][1]); u = parent[u][0]
            right.append(parent[v][1]); v = parent[v][0]
        # walk: to_bus -> ... -> lca -> ... -> from_bus, closed by the chord
        cycles.append(right + left[::-1] + [ln.id])
    return cycles


def simple_cycles(model: NetworkModel, limit: int = 100_000) -> list[tuple[str, ...]]:
    """All simple cycles of the switch meta graph, as sorted switch-id tuples.

    Sources are joined through SUPER_SOURCE, so a closed switch path between
    two sources also shows up as a cycle.  Self-loop switches (both ends in
    the same section) give one-switch cycles.
    """
    adj: dict[int, list[tuple[int, int]]] = defaultdict(list)
    edges = model.meta_edges
    found: set[frozenset[int]] = set()
    for k, e in enumerate(edges):
        if e.a == e.b:
            found.add(frozenset([k]))
            continue
        adj[e.a].append((e.b, k))
        adj[e.b].append((e.a, k))

    def extend(start: int, node: int, on_path: set[int], path: list[int]):
        for nxt, k in adj[node]:
            if k in path:
                continue
            if nxt == start:
                found.add(frozenset(path + [k]))
                if len(found) > limit:
                    raise EnumerationOverflow(f"more than {limit} simple cycles")
            elif nxt > start and nxt not in on_path:
                on_path.add(nxt)
                path.append(k)
                extend(start, nxt, on_path, path)
                path.pop()
                on_path.discard(nxt)

    # each cycle is found from its smallest node (in both directions)
    for start in sorted(adj):
        extend(start, start, {start}, [])
    out = []
    for cyc in found:
        sw = tuple(sorted(edges[k].switch for k in cyc if edges[k].switch is not None))
        if sw:
            out.append(sw)
    return sorted(set(out), key=lambda c: (len(c), c))


# --------------------------------------------------------------------------
# topologies


def energized_sections(model: NetworkModel, switch_status: dict[str, int]) -> dict[int, int]:
    """Section energization implied by closed switches (source reachability)."""
    adj: dict[int, list[int]] = defaultdict(list)
    for e in model.meta_edges:
        if e.switch is None or switch_status[e.switch]:
            adj[e.a].append(e.b)
            adj[e.b].append(e.a)
    seen = {SUPER_SOURCE}
    queue = deque([SUPER_SOURCE])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return {s.id: int(s.id in seen) for s in model.sections}


def check_radial(model: NetworkModel, switch_status: dict[str, int],
                 section_status: dict[int, int] | None = None) -> list[str]:
    """Return the reasons an assignment is not a feasible operating topology."""
    problems = []
    uf = _UnionFind([s.id for s in model.sections] + [SUPER_SOURCE])
    for e in model.meta_edges:
        if e.switch is not None and not switch_status[e.switch]:
            continue
        if not uf.union(e.a, e.b):
            problems.append(f"closed switches form a loop at {e.switch}")
    fed = energized_sections(model, switch_status)
    for s in model.sections:
        if not fed[s.id]:
            closed = [sw for sw in s.boundary_switches if switch_status[sw]]
            if closed:
                problems.append(f"section {s.id} is unfed but has closed switches {closed}")
    if section_status is not None:
        for sid, st in section_status.items():
            if st != fed[sid]:
                problems.append(f"section {sid} status {st} but source reachability is {fed[sid]}")
    return problems


def enumerate_operational_topologies(model: NetworkModel, include_outages: bool = False,
                                     max_count: int = 100_000) -> list[Topology]:
    """All feasible operating topologies, by backtracking over switch states.

    A closed set is kept while it stays a forest once all sources are merged;
    at the leaves, every section not reachable from a source must be isolated
    (no closed switch touches it) and, without outages, every section must be
    fed.
    """
    sw_edges = [e for e in model.meta_edges if e.switch is not None]
    sources = set(model.source_sections)
    n_sections = len(model.sections)
    results: list[Topology] = []

    def root(parent, x):
        while parent[x] != x:
            x = parent[x]
        return x

    def rec(k: int, parent: dict, status: list[int], touched: frozenset):
        if k == len(sw_edges):
            roots = {s.id: root(parent, s.id) for s in model.sections}
            src_roots = {roots[s] for s in sources}
            sec_status = {sid: int(r in src_roots) for sid, r in roots.items()}
            if not include_outages and sum(sec_status.values()) != n_sections:
                return
            for sid, st in sec_status.items():
                if not st and sid in touched:
                    return
            results.append(Topology(
                {e.switch: status[i] for i, e in enumerate(sw_edges)}, sec_status))
            if len(results) > max_count:
                raise EnumerationOverflow(f"more than {max_count} topologies")
            return
        e = sw_edges[k]
        ra, rb = root(parent, e.a), root(parent, e.b)
        if ra != rb:
            merged = dict(parent)
            merged[rb] = ra
            status.append(1)
            rec(k + 1, merged, status, touched | {e.a, e.b})
            status.pop()
        status.append(0)
        rec(k + 1, parent, status, touched)
        status.pop()

    parent = {s.id: s.id for s in model.sections}
    srcs = sorted(sources)
    for s in srcs[1:]:
        parent[s] = srcs[0]
    rec(0, parent, [], frozenset())
    return results
