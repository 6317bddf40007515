"""Shared fixtures and independent reference checks for the test suite.

The helpers here deliberately avoid the package's own graph code: radiality
and reachability are re-derived with networkx so that they can serve as
oracles for the implementation.
"""

from __future__ import annotations

import itertools
from pathlib import Path

import networkx as nx
import numpy as np
import pytest
from hypothesis import strategies as st

from gridtop.network import NetworkModel, bundled_network_path, load_network, parse_network

FIXTURES = Path(__file__).parent / "fixtures"

# criterion number -> (passed, detail); filled by the acceptance tests
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def fixture_path(name: str) -> str:
    return str(FIXTURES / name)


def load_fixture(name: str) -> NetworkModel:
    if name == "desk123.net":
        return load_network(bundled_network_path())
    return load_network(fixture_path(name))


@pytest.fixture(scope="session")
def desk():
    return load_network(bundled_network_path())


@pytest.fixture(scope="session")
def feeder4():
    return load_fixture("feeder4.net")


@pytest.fixture(scope="session")
def loop3():
    return load_fixture("loop3.net")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


# --------------------------------------------------------------------------
# independent graph oracles


def bus_graph(model: NetworkModel, switch_status: dict, section_status: dict) -> nx.MultiGraph:
    """Buses joined by in-service lines: closed switches plus the plain
    lines of energized sections."""
    sec_id = {b: s.id for s in model.sections for b in s.member_buses}
    g = nx.MultiGraph()
    g.add_nodes_from(b.id for b in model.buses)
    for ln in model.lines:
        if ln.is_switch:
            if switch_status[ln.id]:
                g.add_edge(ln.from_bus, ln.to_bus, key=ln.id)
        elif section_status[sec_id[ln.from_bus]]:
            g.add_edge(ln.from_bus, ln.to_bus, key=ln.id)
    return g


def is_operational(model: NetworkModel, switch_status: dict, section_status: dict) -> bool:
    """Forest of in-service lines, one source per live component, every
    energized section reached from a source and every dead section isolated."""
    sec_id = {b: s.id for s in model.sections for b in s.member_buses}
    for ln in model.lines:
        if ln.is_switch and switch_status[ln.id]:
            if not (section_status[sec_id[ln.from_bus]] and section_status[sec_id[ln.to_bus]]):
                return False
    g = bus_graph(model, switch_status, section_status)
    if not nx.is_forest(nx.Graph(g)) or g.number_of_edges() != nx.Graph(g).number_of_edges():
        return False
    sources = set(model.source_buses)
    for comp in nx.connected_components(g):
        n_src = len(comp & sources)
        live = {section_status[sec_id[b]] for b in comp}
        if n_src > 1:
            return False
        if live == {1} and n_src == 0:
            return False
        if 0 in live and (len(live) > 1 or n_src):
            return False
    return True


def brute_force_topologies(model: NetworkModel, include_outages: bool) -> set:
    """Every switch/section assignment passing ``is_operational``."""
    sws = list(model.switch_ids)
    out = set()
    for bits in itertools.product((0, 1), repeat=len(sws)):
        sw = dict(zip(sws, bits))
        g = nx.Graph()
        g.add_nodes_from(b.id for b in model.buses)
        g.add_edges_from((ln.from_bus, ln.to_bus) for ln in model.lines
                         if not ln.is_switch or sw[ln.id])
        live = set()
        for comp in nx.connected_components(g):
            if comp & set(model.source_buses):
                live |= comp
        sec = {s.id: int(next(iter(s.member_buses)) in live) for s in model.sections}
        if not include_outages and not all(sec.values()):
            continue
        if is_operational(model, sw, sec):
            out.add((bits, tuple(sec[s.id] for s in model.sections)))
    return out


# --------------------------------------------------------------------------
# random networks for property tests


@st.composite
def random_networks(draw, max_buses: int = 9, max_chords: int = 3):
    """Text of a random valid network: a random tree of buses, some tree
    edges as switches, plus switch chords closing loops."""
    n = draw(st.integers(3, max_buses))
    parents = [draw(st.integers(0, i - 1)) for i in range(1, n)]
    lines = []
    for i, p in enumerate(parents, start=1):
        sw = draw(st.booleans()) if i > 1 else False
        lines.append((f"b{p}", f"b{i}", sw))
    n_chords = draw(st.integers(0, max_chords))
    existing = {frozenset((a, b)) for a, b, _ in lines}
    for _ in range(n_chords):
        a, b = draw(st.integers(0, n - 1)), draw(st.integers(0, n - 1))
        if a == b or frozenset((f"b{a}", f"b{b}")) in existing:
            continue
        existing.add(frozenset((f"b{a}", f"b{b}")))
        lines.append((f"b{a}", f"b{b}", True))
    out = ["bus b0 phases=ABC source"]
    out += [f"bus b{i} phases=ABC" for i in range(1, n)]
    for k, (a, b, sw) in enumerate(lines):
        kind = "switch normal=closed" if sw else ""
        out.append(f"line {'S' if sw else 'L'}{k} {a} {b} phases=ABC {kind}".rstrip())
    for i in range(1, n):
        p = draw(st.integers(10, 200))
        q = draw(st.integers(-20, 60))
        ph = "ABC"[i % 3]
        out.append(f"load ld{i} b{i} {ph} p={p} q={q} sigp={p / 10} sigq={max(abs(q), 1) / 10} meter")
    if draw(st.booleans()):
        bus = draw(st.integers(1, n - 1))
        out.append(f"cap cb{bus} b{bus} qa=30 qc=15")
    text = "\n".join(out) + "\n"
    model = parse_network(text)
    # every section needs a load so that it can be pinged
    for s in model.sections:
        if not s.member_loads:
            model = None
            break
    return text, model


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
