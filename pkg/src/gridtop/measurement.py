"""Meter placement, observability checks and noisy measurement generation."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .network import NetworkModel, fundamental_cycles
from .powerflow import ScenarioTruth

#: absolute sigma floor (kW / kvar) that keeps objective weights finite
SIGMA_FLOOR = 0.1


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement error model.

    ``load_error_pct=None`` uses the per-load sigmas of the network file.
    Pings are only ever flipped 1 -> 0: a meter on an outaged section cannot
    answer.
    """

    load_error_pct: float | None = 1.0
    flow_error_pct: float = 1.0
    ping_error_prob: float = 0.0
    seed: int = 0
    sigma_floor: float = SIGMA_FLOOR

    def __post_init__(self):
        if self.load_error_pct is not None and self.load_error_pct < 0:
            raise ValueError("load_error_pct must be >= 0")
        if self.flow_error_pct < 0:
            raise ValueError("flow_error_pct must be >= 0")
        if not 0.0 <= self.ping_error_prob < 1.0:
            raise ValueError("ping_error_prob must be in [0, 1)")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")


@dataclass(frozen=True)
class Placement:
    metered_lines: tuple[str, ...]
    pinged_loads: tuple[str, ...]


@dataclass
class MeasurementSet:
    flow_meas: dict[tuple[str, str], tuple[float, float, float, float]]
    load_meas: dict[str, tuple[float, float, float, float]]
    ping_meas: dict[str, int]
    placement: Placement
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    @property
    def metered_lines(self) -> tuple[str, ...]:
        return self.placement.metered_lines

    @property
    def pinged_loads(self) -> tuple[str, ...]:
        return self.placement.pinged_loads

    def to_json(self) -> dict:
        return {
            "flows": {f"{ln}:{ph}": list(v) for (ln, ph), v in sorted(self.flow_meas.items())},
            "loads": {k: list(v) for k, v in sorted(self.load_meas.items())},
            "pings": dict(sorted(self.ping_meas.items())),
            "placement": {"metered_lines": list(self.placement.metered_lines),
                          "pinged_loads": list(self.placement.pinged_loads)},
            "noise_spec": asdict(self.noise),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MeasurementSet":
        flows = {}
        for key, v in doc["flows"].items():
            ln, _, ph = key.rpartition(":")
            flows[ln, ph] = tuple(float(x) for x in v)
        return cls(
            flow_meas=flows,
            load_meas={k: tuple(float(x) for x in v) for k, v in doc["loads"].items()},
            ping_meas={k: int(v) for k, v in doc["pings"].items()},
            placement=Placement(tuple(doc["placement"]["metered_lines"]),
                                tuple(doc["placement"]["pinged_loads"])),
            noise=NoiseSpec(**doc["noise_spec"]),
        )


def place_flow_meters(model: NetworkModel, rng: np.random.Generator,
                      cycles: list[list[str]] | None = None) -> tuple[str, ...]:
    """One meter per fundamental cycle, each on a line not already metered.

    Lines that belong to no other cycle are preferred: a meter on a shared
    line may leave two configurations of the same cycle indistinguishable.
    """
    if cycles is None:
        cycles = fundamental_cycles(model)
    uses = Counter(ln for cyc in cycles for ln in set(cyc))
    chosen: list[str] = []
    for cyc in cycles:
        free = [ln for ln in cyc if ln not in chosen]
        own = [ln for ln in free if uses[ln] == 1]
        pool = own or free
        if pool:
            chosen.append(pool[int(rng.integers(len(pool)))])
    return tuple(chosen)


def feeder_head_lines(model: NetworkModel) -> tuple[str, ...]:
    """Lines leaving a source bus (substation SCADA points)."""
    sources = set(model.source_buses)
    return tuple(ln.id for ln in model.lines if ln.from_bus in sources or ln.to_bus in sources)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def select_pinged_meters(model: NetworkModel, fraction: float,
                         rng: np.random.Generator) -> tuple[str, ...]:
    if not 0.0 < fraction <= 1.0:
        raise ValueError("ping fraction must be in (0, 1]")
    chosen: list[str] = []
    for sec in model.sections:
        meters = sorted(ld for ld in sec.member_loads if model.load[ld].has_smart_meter)
        if not meters:
            raise ValueError(f"load section {sec.id} has no smart meter to ping")
        k = max(1, _round_half_up(fraction * len(meters)))
        picks = rng.choice(len(meters), size=k, replace=False)
        chosen.extend(meters[i] for i in sorted(picks))
    return tuple(chosen)


def make_placement(model: NetworkModel, rng: np.random.Generator, ping_fraction: float = 0.10,
                   head_meters: bool = True) -> Placement:
    """Cycle meters (plus feeder-head meters) and per-section pinged meters."""
    lines = list(place_flow_meters(model, rng))
    if head_meters:
        lines += [ln for ln in feeder_head_lines(model) if ln not in lines]
    return Placement(tuple(lines), select_pinged_meters(model, ping_fraction, rng))


@dataclass
class ObservabilityReport:
    uncovered_cycles: list[int]
    unpinged_sections: list[int]
    unmetered_pings: list[str]

    @property
    def ok(self) -> bool:
        return not (self.uncovered_cycles or self.unpinged_sections or self.unmetered_pings)

    @property
    def violations(self) -> list[str]:
        out = [f"cycle {k} has no flow meter" for k in self.uncovered_cycles]
        out += [f"section {s} has no pinged smart meter" for s in self.unpinged_sections]
        out += [f"load {ld} is pinged but has no smart meter" for ld in self.unmetered_pings]
        return out


def check_observability(model: NetworkModel, placement: Placement) -> ObservabilityReport:
    metered = set(placement.metered_lines)
    pinged = set(placement.pinged_loads)
    uncovered = [k for k, cyc in enumerate(fundamental_cycles(model)) if not metered.intersection(cyc)]
    unpinged = [s.id for s in model.sections if not pinged.intersection(s.member_loads)]
    bad = sorted(ld for ld in pinged if ld not in model.load or not model.load[ld].has_smart_meter)
    return ObservabilityReport(uncovered, unpinged, bad)


def corrupt_measurements(model: NetworkModel, truth: ScenarioTruth, placement: Placement,
                         noise: NoiseSpec) -> MeasurementSet:
    """Add Gaussian noise to flows and pseudo-loads and Bernoulli flips to pings.

    Draw order is fixed (flows by line then phase, loads in file order, pings
    in placement order) so the result depends only on the inputs and seed.
    """
    rng = np.random.default_rng(noise.seed)
    floor = noise.sigma_floor

    flows = {}
    fpct = noise.flow_error_pct / 100.0
    for lid in placement.metered_lines:
        for ph in model.line[lid].phases:
            P, Q = truth.true_flow[lid, ph]
            sp = max(fpct * abs(P), floor)
            sq = max(fpct * abs(Q), floor)
            if fpct > 0:
                P += rng.normal(0.0, sp)
                Q += rng.normal(0.0, sq)
            flows[lid, ph] = (P, Q, sp, sq)

    loads = {}
    for ld in model.loads:
        p, q = truth.true_load[ld.id]
        if noise.load_error_pct is None:
            sp, sq = ld.sigma_p, ld.sigma_q
            draw = True
        else:
            lpct = noise.load_error_pct / 100.0
            sp = max(lpct * abs(ld.forecast_p), floor)
            sq = max(lpct * abs(ld.forecast_q), floor)
            draw = lpct > 0
        if draw:
            p += rng.normal(0.0, sp)
            q += rng.normal(0.0, sq)
        loads[ld.id] = (p, q, sp, sq)

    pings = {}
    sec = model.section_of_load
    flips = rng.random(len(placement.pinged_loads))
    for u, lid in zip(flips, placement.pinged_loads):
        connected = truth.section_status[sec[lid]]
        pings[lid] = int(connected and u >= noise.ping_error_prob)
    return MeasurementSet(flows, loads, pings, placement, noise)
