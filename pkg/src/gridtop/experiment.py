"""Monte Carlo evaluation campaigns.

Truth scenarios depend only on (master seed, scenario index), so every noise
cell of a campaign sees the same topologies; measurement noise is seeded by
(master seed, cell, index).  Results are sorted before aggregation, which
makes every report independent of the number of worker processes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .estimator import EstimatorConfig, estimate, evaluate_topologies
from .measurement import NoiseSpec, Placement, corrupt_measurements, make_placement
from .network import NetworkModel, Topology, check_radial, energized_sections
from .powerflow import (ScenarioTruth, calibrate_uniform_loss, simulate_truth, solve_linear_flows,
                        uniform_loss_fractions)

#: total loss (% of substation demand) reached for each R/X multiplier
DEFAULT_LOSS_TARGETS = {0.0: 0.0, 1.0: 4.25, 2.0: 7.47, 3.0: 11.37}

# spawn-key prefixes keeping the random streams apart
_TRUTH, _NOISE, _PLACEMENT = 0, 1, 2


@dataclass(frozen=True)
class ScenarioSpec:
    include_outages: bool = True
    fault_count_range: tuple[int, int] = (1, 3)
    noise_grid: tuple[tuple[float, float], ...] = ((1.0, 0.0),)
    n_scenarios: int = 500
    master_seed: int = 0
    ping_fraction: float = 0.10
    flow_error_pct: float = 1.0
    loss_target_pct: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "fault_count_range", tuple(self.fault_count_range))
        object.__setattr__(self, "noise_grid", tuple(tuple(c) for c in self.noise_grid))
        if self.n_scenarios < 1:
            raise ValueError("n_scenarios must be at least 1")
        if not self.noise_grid:
            raise ValueError("noise grid is empty")
        lo, hi = self.fault_count_range
        if not 0 <= lo <= hi:
            raise ValueError("fault_count_range must satisfy 0 <= min <= max")

    @classmethod
    def from_json(cls, doc: dict) -> "ScenarioSpec":
        return cls(**doc)

    def to_json(self) -> dict:
        return {k: (list(map(list, v)) if k == "noise_grid" else list(v) if isinstance(v, tuple) else v)
                for k, v in asdict(self).items()}


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _int_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1, np.uint64)[0] >> 1)


def random_spanning_topology(model: NetworkModel, rng: np.random.Generator) -> dict[str, int]:
    """Uniform spanning tree of the section graph with all sources merged
    (loop-erased random walks), returned as closed-switch statuses."""
    root = -1
    srcs = set(model.source_sections)

    def node(s):
        return root if s in srcs else s

    incident: dict[int, list[tuple[str, int]]] = {}
    for e in model.meta_edges:
        if e.switch is None:
            continue
        a, b = node(e.a), node(e.b)
        if a == b:
            continue
        incident.setdefault(a, []).append((e.switch, b))
        incident.setdefault(b, []).append((e.switch, a))

    in_tree = {root}
    nxt: dict[int, tuple[str, int]] = {}
    for start in sorted(s.id for s in model.sections if s.id not in srcs):
        u = start
        while u not in in_tree:
            opts = incident[u]
            nxt[u] = opts[int(rng.integers(len(opts)))]
            u = nxt[u][1]
        u = start
        while u not in in_tree:
            in_tree.add(u)
            u = nxt[u][1]
    closed = {nxt[s][0] for s in nxt if s in in_tree}
    # only the final, loop-erased successor of each node is part of the tree
    return {sw: int(sw in closed) for sw in model.switch_ids}


def apply_faults(model: NetworkModel, switch_status: dict[str, int], faulted: list[int],
                 rng: np.random.Generator) -> tuple[dict[str, int], dict[int, int]]:
    """Isolate faulted sections, then re-feed healthy orphans through open ties.

    Healthy sections that no tie can reach stay de-energized with every
    switch touching them opened.
    """
    sw = dict(switch_status)
    bad = set(faulted)
    for s in faulted:
        for sid in model.sections[s].boundary_switches:
            sw[sid] = 0
    while True:
        fed = {k for k, v in energized_sections(model, sw).items() if v}
        options = sorted(
            e.switch for e in model.meta_edges
            if e.switch is not None and not sw[e.switch]
            and e.a not in bad and e.b not in bad
            and ((e.a in fed) != (e.b in fed)))
        if not options:
            break
        sw[options[int(rng.integers(len(options)))]] = 1
    fed = {k for k, v in energized_sections(model, sw).items() if v}
    for s in model.sections:
        if s.id not in fed:
            for sid in s.boundary_switches:
                sw[sid] = 0
    sec = {s.id: int(s.id in fed) for s in model.sections}
    return sw, sec


def sample_scenario(model: NetworkModel, spec: ScenarioSpec, scenario_index: int) -> ScenarioTruth:
    rng = _rng(spec.master_seed, _TRUTH, scenario_index)
    sw = random_spanning_topology(model, rng)
    faulted: list[int] = []
    if spec.include_outages:
        candidates = [s.id for s in model.sections if not s.is_source]
        lo, hi = spec.fault_count_range
        if hi > len(candidates):
            raise ValueError(f"cannot place {hi} faults in {len(candidates)} isolatable sections")
        k = int(rng.integers(lo, hi + 1))
        faulted = sorted(int(s) for s in rng.choice(candidates, size=k, replace=False))
        sw, sec = apply_faults(model, sw, faulted, rng)
    else:
        sec = {s.id: 1 for s in model.sections}
    caps = {cp: int(rng.integers(2)) for cp in model.cap_phases}
    truth = simulate_truth(model, sw, sec, caps, faulted_sections=faulted)
    if spec.loss_target_pct > 0:
        f = calibrate_uniform_loss(truth.true_flow, model, spec.loss_target_pct)
        truth = simulate_truth(model, sw, sec, caps, loss_fraction=uniform_loss_fractions(model, f),
                               faulted_sections=faulted)
    return truth


def campaign_placement(model: NetworkModel, spec: ScenarioSpec) -> Placement:
    """Meter placement shared by every scenario of a campaign."""
    return make_placement(model, _rng(spec.master_seed, _PLACEMENT), spec.ping_fraction)


# --------------------------------------------------------------------------
# records and metrics


def _digest(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ScenarioRecord:
    cell: int
    index: int
    truth_hash: str
    estimate_hash: str
    n_faults: int
    wrong_switches: tuple[str, ...]
    wrong_sections: tuple[int, ...]
    missed_outages: int
    objective: float
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass(frozen=True)
class Metrics:
    N: int
    N_nc: int
    S_i: int
    L_i: int
    MDR: float
    MMS: float
    MMO: float | None
    failures: int = 0


def compute_metrics(records: list[ScenarioRecord], S: int, L_o: int | None = None) -> Metrics:
    """Missed detection rate, mean missed switches and mean missed outages (%).

    Failed scenarios are reported separately and excluded from the rates.
    """
    if not records:
        raise ValueError("no records")
    good = [r for r in records if r.ok]
    N = len(good)
    n_nc = sum(1 for r in good if r.wrong_switches)
    s_i = sum(len(r.wrong_switches) for r in good)
    l_i = sum(r.missed_outages for r in good)
    if N == 0:
        return Metrics(0, 0, 0, 0, math.nan, math.nan, None, len(records))
    mmo = None
    if L_o is not None:
        if L_o <= 0:
            raise ValueError("MMO needs a positive outage-section count")
        mmo = 100.0 * l_i / (L_o * N)
    return Metrics(N, n_nc, s_i, l_i, 100.0 * n_nc / N, 100.0 * s_i / (S * N), mmo,
                   len(records) - N)


def compare(model: NetworkModel, truth: ScenarioTruth, est_sw: dict, est_sec: dict):
    wrong_sw = tuple(s for s in model.switch_ids if est_sw[s] != truth.switch_status[s])
    wrong_sec = tuple(s.id for s in model.sections
                      if est_sec[s.id] != truth.section_status[s.id])
    missed = sum(1 for s in wrong_sec if truth.section_status[s] == 0)
    return wrong_sw, wrong_sec, missed


# --------------------------------------------------------------------------
# campaign


_WORKER: dict = {}


def _init_worker(model, spec, placement, config):
    _WORKER.update(model=model, spec=spec, placement=placement, config=config)


def _run_chunk(tasks: list[tuple[int, int]]) -> list[tuple[ScenarioRecord, float]]:
    return [run_scenario(_WORKER["model"], _WORKER["spec"], _WORKER["placement"], cell, idx,
                         _WORKER["config"]) for cell, idx in tasks]


def run_scenario(model: NetworkModel, spec: ScenarioSpec, placement: Placement, cell: int,
                 index: int, config: EstimatorConfig | None = None) -> tuple[ScenarioRecord, float]:
    t0 = time.perf_counter()
    truth = sample_scenario(model, spec, index)
    load_err, ping_err = spec.noise_grid[cell]
    noise = NoiseSpec(load_err, spec.flow_error_pct, ping_err,
                      seed=_int_seed(spec.master_seed, _NOISE, cell, index))
    meas = corrupt_measurements(model, truth, placement, noise)
    truth_hash = _digest(truth.to_json())
    try:
        est = estimate(model, meas, config)
    except (RuntimeError, ValueError) as exc:
        rec = ScenarioRecord(cell, index, truth_hash, "", len(truth.faulted_sections), (), (), 0,
                             math.nan, f"{type(exc).__name__}: {exc}")
        return rec, time.perf_counter() - t0
    wrong_sw, wrong_sec, missed = compare(model, truth, est.switch_status, est.section_status)
    est_hash = _digest({"sw": est.switch_status, "sec": {str(k): v for k, v in est.section_status.items()},
                        "cap": {f"{c}:{p}": v for (c, p), v in est.cap_status.items()}})
    rec = ScenarioRecord(cell, index, truth_hash, est_hash, len(truth.faulted_sections),
                         wrong_sw, wrong_sec, missed, est.objective)
    return rec, time.perf_counter() - t0


@dataclass
class CellReport:
    load_error_pct: float
    ping_error_prob: float
    metrics: Metrics
    convergence: list[float]  # running MDR (%) after each scenario
    section_misses: dict[int, int]
    switch_misses: dict[str, int]


@dataclass
class ExperimentReport:
    spec: ScenarioSpec
    placement: Placement
    cells: list[CellReport]
    records: list[ScenarioRecord]
    timings: dict = field(default_factory=dict)  # kept out of the deterministic outputs

    def cells_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "load_error_pct", "ping_error_prob", "N", "failures", "N_nc", "S_i",
                    "L_i", "MDR", "MMS", "MMO"])
        for i, c in enumerate(self.cells):
            m = c.metrics
            w.writerow([i, c.load_error_pct, c.ping_error_prob, m.N, m.failures, m.N_nc, m.S_i,
                        m.L_i, f"{m.MDR:.6f}", f"{m.MMS:.6f}",
                        "" if m.MMO is None else f"{m.MMO:.6f}"])
        return buf.getvalue()

    def convergence_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "scenarios", "running_MDR"])
        for i, c in enumerate(self.cells):
            for n, v in enumerate(c.convergence, 1):
                w.writerow([i, n, f"{v:.6f}"])
        return buf.getvalue()

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "kind", "id", "misdetections"])
        for i, c in enumerate(self.cells):
            for sid, n in sorted(c.section_misses.items()):
                w.writerow([i, "section", sid, n])
            for sw, n in sorted(c.switch_misses.items()):
                w.writerow([i, "switch", sw, n])
        return buf.getvalue()

    def records_json(self) -> str:
        doc = {
            "spec": self.spec.to_json(),
            "placement": {"metered_lines": list(self.placement.metered_lines),
                          "pinged_loads": list(self.placement.pinged_loads)},
            "records": [
                {**asdict(r), "wrong_switches": list(r.wrong_switches),
                 "wrong_sections": list(r.wrong_sections),
                 "objective": None if math.isnan(r.objective) else r.objective}
                for r in self.records],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def write(self, prefix: str) -> list[str]:
        paths = []
        for suffix, text in (("cells.csv", self.cells_csv()), ("records.json", self.records_json()),
                             ("convergence.csv", self.convergence_csv()),
                             ("histogram.csv", self.histogram_csv()),
                             ("timings.json", json.dumps(self.timings, indent=1) + "\n")):
            path = f"{prefix}{suffix}"
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
            paths.append(path)
        return paths


def outageable_sections(model: NetworkModel) -> int:
    return sum(1 for s in model.sections if not s.is_source)


def aggregate(model: NetworkModel, spec: ScenarioSpec, records: list[ScenarioRecord]) -> list[CellReport]:
    S = len(model.switch_ids)
    L_o = outageable_sections(model) if spec.include_outages else None
    cells = []
    for ci, (le, pe) in enumerate(spec.noise_grid):
        recs = [r for r in records if r.cell == ci]
        running, n_nc, n = [], 0, 0
        for r in recs:
            if r.ok:
                n += 1
                n_nc += bool(r.wrong_switches)
                running.append(100.0 * n_nc / n)
        sec_miss = Counter(s for r in recs for s in r.wrong_sections)
        sw_miss = Counter(s for r in recs for s in r.wrong_switches)
        cells.append(CellReport(le, pe, compute_metrics(recs, S, L_o), running,
                                {s.id: sec_miss.get(s.id, 0) for s in model.sections},
                                {sw: sw_miss.get(sw, 0) for sw in model.switch_ids}))
    return cells


def run_campaign(model: NetworkModel, spec: ScenarioSpec, workers: int = 1,
                 config: EstimatorConfig | None = None,
                 placement: Placement | None = None, chunk_size: int = 25) -> ExperimentReport:
    t0 = time.perf_counter()
    placement = placement or campaign_placement(model, spec)
    tasks = [(c, i) for c in range(len(spec.noise_grid)) for i in range(spec.n_scenarios)]
    chunks = [tasks[k:k + chunk_size] for k in range(0, len(tasks), chunk_size)]
    if workers <= 1:
        _init_worker(model, spec, placement, config)
        results = [res for ch in chunks for res in _run_chunk(ch)]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(model, spec, placement, config)) as pool:
            results = [res for out in pool.map(_run_chunk, chunks) for res in out]
    results.sort(key=lambda rw: (rw[0].cell, rw[0].index))
    records = [r for r, _ in results]
    walls = [w for _, w in results]
    timings = {"total_seconds": time.perf_counter() - t0, "workers": workers,
               "scenario_seconds_mean": float(np.mean(walls)),
               "scenario_seconds_max": float(np.max(walls))}
    return ExperimentReport(spec, placement, aggregate(model, spec, records), records, timings)


# --------------------------------------------------------------------------
# loss robustness


@dataclass
class TopologyFit:
    truth_index: int
    correct_objective: float
    best_incorrect_objective: float
    table: list[float]  # objective of every candidate topology

    @property
    def margin(self) -> float:
        return self.best_incorrect_objective - self.correct_objective

    @property
    def separated(self) -> bool:
        return self.margin > 0


@dataclass
class RxResult:
    multiplier: float
    target_loss_pct: float
    loss_pct: list[float]
    misdetected: list[int]
    fits: list[TopologyFit]

    @property
    def mdr(self) -> float:
        return 100.0 * len(self.misdetected) / len(self.loss_pct)


def rx_sweep(model: NetworkModel, multipliers, topologies: list[Topology], selected: list[int],
             loss_targets: dict[float, float] | None = None, seed: int = 0,
             cap_status: dict | None = None, noise: NoiseSpec | None = None,
             config: EstimatorConfig | None = None) -> list[RxResult]:
    """Estimation under injected series losses for a range of R/X multipliers.

    Each multiplier maps to a total loss target; a uniform per-line loss
    fraction is calibrated per topology to reach it.  Every topology is
    estimated, and for the ``selected`` ones the best fit of every candidate
    topology is tabulated.
    """
    targets = DEFAULT_LOSS_TARGETS if loss_targets is None else loss_targets
    noise = noise or NoiseSpec(0.0, 0.0, 0.0)
    caps = cap_status or {cp: 1 for cp in model.cap_phases}
    placement = make_placement(model, _rng(seed, _PLACEMENT))
    out = []
    for mult in multipliers:
        if mult not in targets:
            raise KeyError(f"no loss target configured for multiplier {mult}")
        target = targets[mult]
        losses, missed, fits = [], [], []
        for ti, topo in enumerate(topologies):
            flows = solve_linear_flows(model, topo.switch_status, topo.section_status, caps,
                                       {ld.id: (ld.forecast_p, ld.forecast_q) for ld in model.loads})
            frac = calibrate_uniform_loss(flows, model, target) if target > 0 else 0.0
            truth = simulate_truth(model, topo.switch_status, topo.section_status, caps,
                                   loss_fraction=uniform_loss_fractions(model, frac))
            losses.append(truth.loss_pct)
            meas = corrupt_measurements(model, truth, placement, noise)
            est = estimate(model, meas, config)
            if check_radial(model, est.switch_status, est.section_status) or \
                    est.switch_status != topo.switch_status:
                missed.append(ti)
            if ti in selected:
                rows = evaluate_topologies(model, meas, topologies, config)
                objs = [r.objective for r in rows]
                wrong = [o for k, o in enumerate(objs) if k != ti]
                fits.append(TopologyFit(ti, objs[ti], min(wrong), objs))
        out.append(RxResult(mult, target, losses, missed, fits))
    return out
