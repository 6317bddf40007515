"""Ground-truth line flows from the lossless linear three-phase model.

Flows are signed in the orientation of each line record (from_bus ->
to_bus).  Reactive injections of capacitor banks that are switched on are
netted against the reactive demand of their bus.
"""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field

from .network import NetworkModel, check_radial

FlowMap = dict[tuple[str, str], tuple[float, float]]


class InfeasibleStatus(ValueError):
    """Status assignment that is not a radial, source-fed configuration."""


@dataclass
class ScenarioTruth:
    switch_status: dict[str, int]
    section_status: dict[int, int]
    cap_status: dict[tuple[str, str], int]
    true_load: dict[str, tuple[float, float]]
    true_flow: FlowMap = field(default_factory=dict)
    faulted_sections: tuple[int, ...] = ()
    loss_pct: float = 0.0

    def to_json(self) -> dict:
        return {
            "switch_status": dict(sorted(self.switch_status.items())),
            "section_status": {str(k): v for k, v in sorted(self.section_status.items())},
            "cap_status": {f"{c}:{ph}": v for (c, ph), v in sorted(self.cap_status.items())},
            "true_load": {k: list(v) for k, v in sorted(self.true_load.items())},
            "true_flow": {f"{ln}:{ph}": list(v) for (ln, ph), v in sorted(self.true_flow.items())},
            "faulted_sections": list(self.faulted_sections),
            "loss_pct": self.loss_pct,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ScenarioTruth":
        def split(key):
            a, _, b = key.rpartition(":")
            return a, b
        return cls(
            switch_status={k: int(v) for k, v in doc["switch_status"].items()},
            section_status={int(k): int(v) for k, v in doc["section_status"].items()},
            cap_status={split(k): int(v) for k, v in doc["cap_status"].items()},
            true_load={k: (float(v[0]), float(v[1])) for k, v in doc["true_load"].items()},
            true_flow={split(k): (float(v[0]), float(v[1])) for k, v in doc["true_flow"].items()},
            faulted_sections=tuple(doc.get("faulted_sections", ())),
            loss_pct=float(doc.get("loss_pct", 0.0)),
        )


def _in_service(model: NetworkModel, switch_status, section_status) -> list:
    sec = model.section_of_bus
    out = []
    for ln in model.lines:
        if ln.is_switch:
            if switch_status[ln.id]:
                out.append(ln)
        elif section_status[sec[ln.from_bus]]:
            out.append(ln)
    return out


def radial_order(model: NetworkModel, switch_status, section_status):
    """BFS over in-service lines from every source.

    Returns (order, parent_line) where ``order`` lists reached buses from the
    sources outwards and ``parent_line[bus]`` is (line, upstream bus).
    """
    adj = defaultdict(list)
    for ln in _in_service(model, switch_status, section_status):
        adj[ln.from_bus].append((ln.to_bus, ln))
        adj[ln.to_bus].append((ln.from_bus, ln))
    parent = {}
    order = []
    for src in model.source_buses:
        parent[src] = None
        order.append(src)
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v, ln in adj[u]:
                if v in parent:
                    if parent[u] is None or parent[u][0] is not ln:
                        raise InfeasibleStatus(f"closed lines form a loop at {ln.id}")
                    continue
                parent[v] = (ln, u)
                order.append(v)
                queue.append(v)
    return order, parent


def bus_injections(model: NetworkModel, section_status, cap_status, true_load):
    """Per (bus, phase) net consumption (P, Q) of energized buses."""
    sec = model.section_of_bus
    cons: dict[tuple[str, str], list[float]] = defaultdict(lambda: [0.0, 0.0])
    for ld in model.loads:
        if section_status[sec[ld.bus]]:
            p, q = true_load[ld.id]
            c = cons[ld.bus, ld.phase]
            c[0] += p
            c[1] += q
    for cap in model.capacitors:
        if section_status[sec[cap.bus]]:
            for ph, kvar in cap.rated_q:
                if cap_status[cap.id, ph]:
                    cons[cap.bus, ph][1] -= kvar
    return cons


def solve_linear_flows(model: NetworkModel, switch_status: dict[str, int],
                       section_status: dict[int, int], cap_status: dict[tuple[str, str], int],
                       true_load: dict[str, tuple[float, float]]) -> FlowMap:
    """Lossless per-phase flows by leaf-to-source accumulation.

    Every (line, phase) of the model gets an entry; open switches and lines
    in de-energized sections carry exactly zero.
    """
    problems = check_radial(model, switch_status, section_status)
    if problems:
        raise InfeasibleStatus("; ".join(problems))
    for lid, (p, q) in true_load.items():
        if p < 0:
            raise ValueError(f"load {lid} has negative demand")

    order, parent = radial_order(model, switch_status, section_status)
    cons = bus_injections(model, section_status, cap_status, true_load)
    flows: FlowMap = {(ln.id, ph): (0.0, 0.0) for ln in model.lines for ph in ln.phases}
    acc: dict[tuple[str, str], list[float]] = defaultdict(lambda: [0.0, 0.0])
    for (b, ph), (p, q) in cons.items():
        acc[b, ph][0] += p
        acc[b, ph][1] += q

    reached = set(order)
    for (b, ph), (p, q) in cons.items():
        if (p or q) and b not in reached:
            raise InfeasibleStatus(f"bus {b} is energized but not connected to a source")

    for bus in reversed(order):
        link = parent[bus]
        for ph in model.bus[bus].phases:
            p, q = acc.get((bus, ph), (0.0, 0.0))
            if link is None:
                continue
            ln, up = link
            if ph not in ln.phases:
                if p or q:
                    raise InfeasibleStatus(
                        f"demand on phase {ph} at bus {bus} cannot be served through {ln.id}")
                continue
            sign = 1.0 if ln.to_bus == bus else -1.0
            flows[ln.id, ph] = (sign * p, sign * q)
            a = acc[up, ph]
            a[0] += p
            a[1] += q
    return flows


@dataclass
class LossInjection:
    flows: FlowMap  # sending-end values, signed in line orientation
    receiving: FlowMap
    loss_kw: float
    substation_kw: float

    @property
    def loss_pct(self) -> float:
        return 100.0 * self.loss_kw / self.substation_kw if self.substation_kw else 0.0


def inject_losses(flows: FlowMap, model: NetworkModel,
                  loss_fraction: dict[str, float] | None = None) -> LossInjection:
    """Inflate sending-end active power so that each line delivers
    ``sending * (1 - loss_fraction)`` at its receiving end.

    Losses are propagated towards the source: a line's receiving-end demand is
    the consumption at its downstream bus plus the (already inflated)
    sending-end flows of its children.  Reactive power is left lossless.
    ``loss_fraction`` overrides the per-line values stored in the model.
    """
    frac = {ln.id: ln.loss_fraction for ln in model.lines}
    if loss_fraction:
        frac.update(loss_fraction)
    for lid, f in frac.items():
        if not 0.0 <= f < 1.0:
            raise ValueError(f"loss fraction of line {lid} must be in [0, 1)")

    if not any(frac.values()):
        return LossInjection(dict(flows), dict(flows), 0.0, _substation_kw(model, flows))

    # a switch with zero flow on every phase is treated as open; nothing
    # downstream of it can carry losses
    adj = defaultdict(list)
    for ln in model.lines:
        if ln.is_switch and all(flows.get((ln.id, ph), (0.0, 0.0)) == (0.0, 0.0) for ph in ln.phases):
            continue
        adj[ln.from_bus].append((ln.to_bus, ln))
        adj[ln.to_bus].append((ln.from_bus, ln))
    parent = {}
    order = []
    for src in model.source_buses:
        parent[src] = None
        order.append(src)
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v, ln in adj[u]:
                if v not in parent:
                    parent[v] = (ln, u)
                    order.append(v)
                    queue.append(v)

    children = defaultdict(list)
    for bus in order:
        if parent[bus] is not None:
            children[parent[bus][1]].append((parent[bus][0], bus))

    out = dict(flows)
    recv = dict(flows)
    loss_kw = 0.0
    sending: dict[tuple[str, str], float] = {}
    for bus in reversed(order):
        if parent[bus] is None:
            continue
        ln, up = parent[bus]
        sign = 1.0 if ln.to_bus == bus else -1.0
        for ph in ln.phases:
            lossless = sign * flows[ln.id, ph][0]
            downstream = sum(sign_c * flows[c.id, ph][0]
                             for c, _child in children[bus] if ph in c.phases
                             for sign_c in [1.0 if c.from_bus == bus else -1.0])
            consumption = lossless - downstream
            receiving = consumption + sum(sending.get((c.id, ph), 0.0)
                                          for c, _child in children[bus] if ph in c.phases)
            send = receiving / (1.0 - frac[ln.id])
            sending[ln.id, ph] = send
            loss_kw += send - receiving
            q = flows[ln.id, ph][1]
            out[ln.id, ph] = (sign * send, q)
            recv[ln.id, ph] = (sign * receiving, q)
    return LossInjection(out, recv, loss_kw, _substation_kw(model, out))


def _substation_kw(model: NetworkModel, flows: FlowMap) -> float:
    total = 0.0
    sources = set(model.source_buses)
    for ln in model.lines:
        for ph in ln.phases:
            p = flows.get((ln.id, ph), (0.0, 0.0))[0]
            if ln.from_bus in sources:
                total += p
            elif ln.to_bus in sources:
                total -= p
    return total


def uniform_loss_fractions(model: NetworkModel, fraction: float) -> dict[str, float]:
    return {ln.id: fraction for ln in model.lines}


def calibrate_uniform_loss(flows: FlowMap, model: NetworkModel, target_pct: float) -> float:
    """Uniform per-line loss fraction whose injected loss hits ``target_pct``
    percent of substation demand (bisection on a monotone map)."""
    from scipy.optimize import brentq

    if target_pct <= 0:
        return 0.0

    def gap(f):
        return inject_losses(flows, model, uniform_loss_fractions(model, f)).loss_pct - target_pct

    return float(brentq(gap, 0.0, 0.5, xtol=1e-14, rtol=1e-12))


def simulate_truth(model: NetworkModel, switch_status, section_status, cap_status,
                   true_load=None, loss_fraction: dict[str, float] | None = None,
                   faulted_sections=()) -> ScenarioTruth:
    """Assemble a ScenarioTruth, optionally with injected line losses."""
    if true_load is None:
        true_load = {ld.id: (ld.forecast_p, ld.forecast_q) for ld in model.loads}
    flows = solve_linear_flows(model, switch_status, section_status, cap_status, true_load)
    loss_pct = 0.0
    if loss_fraction is not None or any(ln.loss_fraction for ln in model.lines):
        inj = inject_losses(flows, model, loss_fraction)
        flows, loss_pct = inj.flows, inj.loss_pct
    return ScenarioTruth(dict(switch_status), dict(section_status), dict(cap_status),
                         dict(true_load), flows, tuple(faulted_sections), loss_pct)
