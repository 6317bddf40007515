"""Joint topology / outage estimation MILP.

Weighted least-absolute-value fit of pseudo-loads and metered flows, subject
to linear per-phase flow balance coupled to section energization, radiality,
connectivity, ping and ping-budget constraints.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import binom, norm

from ..measurement import MeasurementSet, check_observability
from ..network import NetworkModel, format_network, simple_cycles
from ..powerflow import ScenarioTruth
from .problem import MilpProblem, ProblemBuilder, VarRef, objective_of

__all__ = [
    "BuildConfig", "NotObservable", "build_problem", "objective_of", "truth_assignment",
    "big_m_floor", "default_big_m", "ping_budget", "admissible_ping_errors",
]


class NotObservable(ValueError):
    """Measurement placement leaves the topology unobservable."""


@dataclass(frozen=True)
class BuildConfig:
    big_m: float | None = None  # None: twice the per-phase demand and kvar, plus one
    load_bound_sigmas: float = 10.0
    ping_sigmas: float = 5.0
    cycle_limit: int = 100_000

    def __post_init__(self):
        if self.load_bound_sigmas <= 0 or self.ping_sigmas <= 0:
            raise ValueError("sigma multipliers must be positive")
        if self.big_m is not None and not (math.isfinite(self.big_m) and self.big_m > 0):
            raise ValueError("big_m must be a positive finite number")


def ping_budget(n_pinged: int, q: float, sigmas: float = 5.0) -> tuple[float, float]:
    """Admissible range of the number of erroneous pings."""
    mu = n_pinged * q
    sd = math.sqrt(n_pinged * q * (1.0 - q))
    return min(0.0, mu - sigmas * sd), mu + sigmas * sd


def admissible_ping_errors(n_pinged: int, q: float, sigmas: float = 5.0) -> tuple[float, float]:
    """Ping budget used in the model: the normal-approximation range, widened
    to the exact binomial count with the same one-sided tail probability.

    For small ``n_pinged * q`` the normal upper bound can fall below one, which
    would make a single failed ping contradict the true topology.
    """
    lo, hi = ping_budget(n_pinged, q, sigmas)
    if q > 0:
        hi = max(hi, float(binom.isf(norm.sf(sigmas), n_pinged, q)))
    return lo, hi


def _load_bounds(model: NetworkModel, meas: MeasurementSet, k: float):
    out = {}
    for ld in model.loads:
        if ld.id not in meas.load_meas:
            raise ValueError(f"no pseudo-measurement for load {ld.id}")
        _, _, sp, sq = meas.load_meas[ld.id]
        out[ld.id] = (max(0.0, _snap(ld.forecast_p - k * sp, ld.forecast_p)),
                      _snap(ld.forecast_p + k * sp, ld.forecast_p),
                      _snap(ld.forecast_q - k * sq, ld.forecast_q),
                      _snap(ld.forecast_q + k * sq, ld.forecast_q))
    return out


def _snap(bound: float, scale: float) -> float:
    """Round-off sized bounds (e.g. forecast - 10 * 10% of forecast) become 0."""
    return 0.0 if abs(bound) <= 1e-12 * max(1.0, abs(scale)) else bound


def big_m_floor(model: NetworkModel) -> float:
    """Twice the largest single-phase total of forecast demand plus capacitor kvar."""
    per_phase: dict[str, float] = {}
    for ld in model.loads:
        per_phase[ld.phase] = per_phase.get(ld.phase, 0.0) + ld.forecast_p + abs(ld.forecast_q)
    for cap in model.capacitors:
        for ph, kvar in cap.rated_q:
            per_phase[ph] = per_phase.get(ph, 0.0) + kvar
    return 2.0 * max(per_phase.values(), default=0.0)


def default_big_m(model: NetworkModel) -> float:
    return big_m_floor(model) + 1.0


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def build_problem(model: NetworkModel, meas: MeasurementSet,
                  config: BuildConfig | None = None) -> MilpProblem:
    if config is None:
        raise ValueError("build_problem needs a BuildConfig")
    report = check_observability(model, meas.placement)
    if not report.ok:
        raise NotObservable("; ".join(report.violations))

    bounds = _load_bounds(model, meas, config.load_bound_sigmas)
    M = config.big_m if config.big_m is not None else default_big_m(model)
    if M <= big_m_floor(model):
        raise ValueError(f"big_m={M} does not exceed twice the per-phase demand {big_m_floor(model)}")

    b = ProblemBuilder()
    sec_of_bus = model.section_of_bus
    sources = set(model.source_buses)

    delta = {sw: b.var("delta", (sw,), 0, 1, integer=True) for sw in model.switch_ids}
    y = {s.id: b.var("y", (s.id,), 0, 1, integer=True) for s in model.sections}
    yc = {cp: b.var("yc", cp, 0, 1, integer=True) for cp in model.cap_phases}

    # pseudo-load fit
    p, q, zp, zq = {}, {}, {}, {}
    for ld in model.loads:
        pl, pu, ql, qu = bounds[ld.id]
        p_hat, q_hat, sp, sq = meas.load_meas[ld.id]
        p[ld.id] = b.var("p", (ld.id,), pl, pu)
        q[ld.id] = b.var("q", (ld.id,), ql, qu)
        zp[ld.id] = b.var("z", (ld.id, "p"), min(0.0, pl), max(0.0, pu))
        zq[ld.id] = b.var("z", (ld.id, "q"), min(0.0, ql), max(0.0, qu))
        ap = b.var("a", (ld.id, "p"), 0, max(abs(pu - p_hat), abs(pl - p_hat)), cost=1.0 / sp)
        aq = b.var("a", (ld.id, "q"), 0, max(abs(qu - q_hat), abs(ql - q_hat)), cost=1.0 / sq)
        b.add([(1, p[ld.id]), (-1, ap)], "<=", p_hat, "Eq4")
        b.add([(-1, p[ld.id]), (-1, ap)], "<=", -p_hat, "Eq4")
        b.add([(1, q[ld.id]), (-1, aq)], "<=", q_hat, "Eq4")
        b.add([(-1, q[ld.id]), (-1, aq)], "<=", -q_hat, "Eq4")

    # line flows
    P, Q = {}, {}
    for ln in model.lines:
        for ph in ln.phases:
            P[ln.id, ph] = b.var("P", (ln.id, ph), -M, M)
            Q[ln.id, ph] = b.var("Q", (ln.id, ph), -M, M)

    for (lid, ph), (P_hat, Q_hat, sP, sQ) in sorted(meas.flow_meas.items(),
                                                     key=lambda kv: kv[0]):
        if (lid, ph) not in P:
            raise ValueError(f"flow measurement on unknown line phase {lid}:{ph}")
        bP = b.var("b", (lid, ph, "P"), 0, M + abs(P_hat), cost=1.0 / sP)
        bQ = b.var("b", (lid, ph, "Q"), 0, M + abs(Q_hat), cost=1.0 / sQ)
        b.add([(1, P[lid, ph]), (-1, bP)], "<=", P_hat, "Eq5")
        b.add([(-1, P[lid, ph]), (-1, bP)], "<=", -P_hat, "Eq5")
        b.add([(1, Q[lid, ph]), (-1, bQ)], "<=", Q_hat, "Eq5")
        b.add([(-1, Q[lid, ph]), (-1, bQ)], "<=", -Q_hat, "Eq5")

    # z = y * load, exact for binary y within the load bounds
    cap_buses = {cap.bus for cap in model.capacitors}
    for ld in model.loads:
        pl, pu, ql, qu = bounds[ld.id]
        yl = y[sec_of_bus[ld.bus]]
        q_tag = "Eq14" if ld.bus in cap_buses else "Eq13"
        for z, v, lo, hi, tag in ((zp[ld.id], p[ld.id], pl, pu, "Eq12"),
                                  (zq[ld.id], q[ld.id], ql, qu, q_tag)):
            b.add([(1, z), (-hi, yl)], "<=", 0.0, tag)
            b.add([(1, z), (-lo, yl)], ">=", 0.0, tag)
            b.add([(1, z), (-1, v), (-lo, yl)], "<=", -lo, tag)
            b.add([(1, z), (-1, v), (-hi, yl)], ">=", -hi, tag)

    # w = y_section AND y_cap
    w = {}
    for cap in model.capacitors:
        yl = y[sec_of_bus[cap.bus]]
        for ph in cap.phases:
            w[cap.id, ph] = wj = b.var("w", (cap.id, ph), 0, 1)
            b.add([(1, wj), (-1, yl)], "<=", 0.0, "Eq14")
            b.add([(1, wj), (-1, yc[cap.id, ph])], "<=", 0.0, "Eq14")
            b.add([(1, wj), (-1, yl), (-1, yc[cap.id, ph])], ">=", -1.0, "Eq14")

    # per-phase balance: inflow - outflow = consumption
    incident: dict[str, list] = {bus.id: [] for bus in model.buses}
    for ln in model.lines:
        incident[ln.to_bus].append((1, ln))
        incident[ln.from_bus].append((-1, ln))
    for bus in model.buses:
        if bus.id in sources:
            continue
        for ph in bus.phases:
            tp, tq = [], []
            for sign, ln in incident[bus.id]:
                if ph in ln.phases:
                    tp.append((sign, P[ln.id, ph]))
                    tq.append((sign, Q[ln.id, ph]))
            for ld in model.loads_at.get(bus.id, ()):
                if ld.phase == ph:
                    tp.append((-1, zp[ld.id]))
                    tq.append((-1, zq[ld.id]))
            for cap in model.caps_at.get(bus.id, ()):
                if ph in cap.phases:
                    tq.append((cap.kvar(ph), w[cap.id, ph]))
            b.add(tp, "=", 0.0, "Eq12")
            b.add(tq, "=", 0.0, "Eq14" if bus.id in cap_buses else "Eq13")

    # no closed loops, including paths between two sources
    for cyc in simple_cycles(model, config.cycle_limit):
        b.add([(1, delta[sw]) for sw in cyc], "<=", len(cyc) - 1, "Eq15")

    for sec in model.sections:
        if sec.is_source:
            b.add([(1, y[sec.id])], "=", 1.0, "bounds")
            continue
        feeds = sec.supply_switches
        if not feeds:
            b.add([(1, y[sec.id])], "=", 0.0, "Eq17")
        elif len(feeds) == 1:
            b.add([(1, y[sec.id]), (-1, delta[feeds[0]])], "=", 0.0, "Eq16")
        else:
            b.add([(1, y[sec.id])] + [(-1, delta[sw]) for sw in feeds], "<=", 0.0, "Eq17")
            for sw in feeds:
                b.add([(1, y[sec.id]), (-1, delta[sw])], ">=", 0.0, "Eq17")

    for sw in model.switches:
        for ph in sw.phases:
            for F in (P, Q):
                b.add([(1, F[sw.id, ph]), (-M, delta[sw.id])], "<=", 0.0, "Eq19")
                b.add([(1, F[sw.id, ph]), (M, delta[sw.id])], ">=", 0.0, "Eq19")

    pinged = list(meas.placement.pinged_loads)
    sec_of_load = model.section_of_load
    for lid in pinged:
        if meas.ping_meas[lid] == 1:
            b.add([(1, y[sec_of_load[lid]])], ">=", 1.0, "Eq18")

    if pinged:
        lo, hi = admissible_ping_errors(len(pinged), meas.noise.ping_error_prob,
                                        config.ping_sigmas)
        terms, const = [], 0.0
        for lid in pinged:
            yl = y[sec_of_load[lid]]
            if meas.ping_meas[lid] == 1:
                terms.append((-1, yl))
                const += 1.0
            else:
                terms.append((1, yl))
        b.add(terms, "<=", hi - const, "Eq20")
        b.add(terms, ">=", lo - const, "Eq20")

    metadata = {
        "model_hash": _digest(format_network(model)),
        "measurement_hash": _digest(meas.to_json()),
        "load_bound_sigmas": config.load_bound_sigmas,
        "ping_sigmas": config.ping_sigmas,
    }
    return b.build(M, metadata)


def truth_assignment(problem: MilpProblem, model: NetworkModel, truth: ScenarioTruth,
                     meas: MeasurementSet) -> dict[VarRef, float]:
    """Full valuation induced by a ground-truth scenario.

    Loads take their true values clipped into the model bounds; absolute
    residual auxiliaries take their tightest feasible values.
    """
    sec_of_bus = model.section_of_bus
    vals: dict[VarRef, float] = {}
    idx = problem.index
    for ref in problem.variables:
        kind, key = ref
        if kind == "delta":
            v = truth.switch_status[key[0]]
        elif kind == "y":
            v = truth.section_status[key[0]]
        elif kind == "yc":
            v = truth.cap_status[key]
        elif kind in ("p", "q"):
            v = truth.true_load[key[0]][0 if kind == "p" else 1]
        elif kind in ("P", "Q"):
            v = truth.true_flow[key][0 if kind == "P" else 1]
        else:
            continue
        vals[ref] = float(v)
    for ref in problem.variables:
        kind, key = ref
        if kind == "z":
            ld = model.load[key[0]]
            vals[ref] = truth.section_status[sec_of_bus[ld.bus]] * vals[VarRef(key[1], (key[0],))]
        elif kind == "w":
            cap = model.capacitor[key[0]]
            vals[ref] = float(truth.section_status[sec_of_bus[cap.bus]] and truth.cap_status[key])
        elif kind == "a":
            comp = 0 if key[1] == "p" else 1
            vals[ref] = abs(vals[VarRef(key[1], (key[0],))] - meas.load_meas[key[0]][comp])
        elif kind == "b":
            comp = 0 if key[2] == "P" else 1
            vals[ref] = abs(vals[VarRef(key[2], key[:2])] - meas.flow_meas[key[:2]][comp])
    assert len(vals) == len(idx)
    return vals
