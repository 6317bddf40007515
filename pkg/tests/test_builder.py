import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from conftest import load_fixture, random_networks
from gridtop.measurement import NoiseSpec, Placement, corrupt_measurements, make_placement
from gridtop.milp import BuildConfig, NotObservable, build_problem, truth_assignment
from gridtop.milp.builder import admissible_ping_errors, big_m_floor, ping_budget
from gridtop.milp.problem import TAGS, ProblemBuilder, VarRef, objective_of
from gridtop.network import enumerate_operational_topologies, fundamental_cycles
from gridtop.powerflow import simulate_truth

CFG = BuildConfig()


def _scenario(model, topo_index=0, outages=False, noise=NoiseSpec(0.0, 0.0, 0.0), seed=0,
              ping_fraction=0.1):
    topo = enumerate_operational_topologies(model, include_outages=outages)[topo_index]
    gen = np.random.default_rng(seed)
    caps = {cp: int(gen.integers(2)) for cp in model.cap_phases}
    truth = simulate_truth(model, topo.switch_status, topo.section_status, caps)
    placement = make_placement(model, gen, ping_fraction)
    meas = corrupt_measurements(model, truth, placement, noise)
    return truth, meas


def _expected_variable_counts(model, meas):
    """Count variables straight from the network elements."""
    n_line_phases = sum(len(ln.phases) for ln in model.lines)
    n_metered = sum(len(model.line[ln].phases) for ln in meas.placement.metered_lines)
    n_cap_phases = sum(len(c.rated_q) for c in model.capacitors)
    return {
        "delta": sum(ln.is_switch for ln in model.lines),
        "y": len(model.sections),
        "yc": n_cap_phases,
        "p": len(model.loads),
        "q": len(model.loads),
        "z": 2 * len(model.loads),
        "a": 2 * len(model.loads),
        "P": n_line_phases,
        "Q": n_line_phases,
        "b": 2 * n_metered,
        "w": n_cap_phases,
    }


# --------------------------------------------------------------------------
# sizes and tags


def test_four_bus_chain_hand_count(feeder4):
    truth, meas = _scenario(feeder4)
    prob = build_problem(feeder4, meas, CFG)
    # 1 switch + 2 sections + 3 p + 3 q + 6 z + 6 a + 3 P + 3 Q + 2 b (head meter)
    assert prob.n_vars == 29
    assert sum(prob.integer) == 3
    assert prob.tag_counts() == {"Eq4": 12, "Eq5": 4, "Eq12": 15, "Eq13": 15, "Eq16": 1,
                                 "Eq18": 2, "Eq19": 4, "Eq20": 2, "bounds": 1}


@pytest.mark.parametrize("name", ["feeder4.net", "loop3.net", "twofeeder.net", "sixbus.net",
                                  "ring6.net", "multifeeder.net", "desk123.net"])
def test_variable_counts_match_network(name):
    m = load_fixture(name)
    _, meas = _scenario(m)
    prob = build_problem(m, meas, CFG)
    got = Counter(v.kind for v in prob.variables)
    want = {k: v for k, v in _expected_variable_counts(m, meas).items() if v}
    assert dict(got) == want
    assert len(set(prob.variables)) == prob.n_vars


def test_cycle_row(loop3):
    _, meas = _scenario(loop3)
    prob = build_problem(loop3, meas, CFG)
    rows = [c for c in prob.constraints if c.tag == "Eq15"]
    assert len(rows) == 1
    r = rows[0]
    assert r.sense == "<=" and r.rhs == 2
    assert sorted(prob.variables[j].key[0] for _, j in r.terms) == ["SW1", "SW2", "SW3"]
    assert all(c == 1 for c, _ in r.terms)


def test_section_supply_rows(loop3):
    _, meas = _scenario(loop3)
    prob = build_problem(loop3, meas, CFG)
    rows = [c for c in prob.constraints if c.tag == "Eq17"]
    names = lambda r: {(c, str(prob.variables[j])) for c, j in r.terms}
    # sections 1 and 2 each have two feeds: one upper row and two lower rows
    assert len(rows) == 6
    assert {(1, "y[1]"), (-1, "delta[SW1]"), (-1, "delta[SW2]")} in [names(r) for r in rows]


def test_path_between_sources_is_a_cycle():
    m = load_fixture("twofeeder.net")
    _, meas = _scenario(m)
    prob = build_problem(m, meas, CFG)
    rows = [c for c in prob.constraints if c.tag == "Eq15"]
    assert [sorted(prob.variables[j].key[0] for _, j in r.terms) for r in rows] == [["SWa", "SWb", "TIE"]]


def test_self_loop_switch_is_forced_open():
    m = load_fixture("sixbus.net")
    _, meas = _scenario(m)
    prob = build_problem(m, meas, CFG)
    rows = [c for c in prob.constraints if c.tag == "Eq15" and len(c.terms) == 1]
    assert len(rows) == 1 and rows[0].rhs == 0


@pytest.mark.parametrize("name", ["ring6.net", "multifeeder.net", "desk123.net"])
def test_rows_are_well_formed(name):
    m = load_fixture(name)
    _, meas = _scenario(m, noise=NoiseSpec(5.0, 1.0, 0.02, seed=3))
    prob = build_problem(m, meas, CFG)
    used = set()
    for c in prob.constraints:
        assert c.tag in TAGS
        cols = [j for _, j in c.terms]
        assert len(cols) == len(set(cols))
        assert all(math.isfinite(v) and v != 0 for v, _ in c.terms)
        used.update(cols)
    assert set(prob.binaries) <= used
    # only residual auxiliaries carry cost, weighted by 1/sigma
    for j in np.flatnonzero(prob.cost):
        assert prob.variables[j].kind in ("a", "b")
    for ld, (_, _, sp, sq) in meas.load_meas.items():
        assert prob.cost[prob.col("a", ld, "p")] == pytest.approx(1 / sp)
        assert prob.cost[prob.col("a", ld, "q")] == pytest.approx(1 / sq)


def test_all_tags_appear_on_desk_feeder(desk):
    _, meas = _scenario(desk, outages=True, topo_index=40)
    prob = build_problem(desk, meas, CFG)
    assert set(prob.tag_counts()) == set(TAGS)


# --------------------------------------------------------------------------
# ping budget and big-M


def test_ping_budget_example():
    lo, hi = ping_budget(100, 0.05)
    assert hi == pytest.approx(15.897, abs=1e-3)
    assert lo == pytest.approx(-5.897, abs=1e-3)
    assert ping_budget(40, 0.0) == (0.0, 0.0)


def _binomial_tail(n, q, k):
    """P(X > k) for X ~ Binomial(n, q), summed term by term."""
    return sum(math.comb(n, j) * q**j * (1 - q) ** (n - j) for j in range(k + 1, n + 1))


@pytest.mark.parametrize("n, q", [(100, 0.05), (8, 0.05), (8, 0.0043), (3, 0.042), (2, 0.0069),
                                  (40, 0.01)])
def test_admissible_ping_errors_use_the_exact_tail(n, q):
    five_sigma_tail = 0.5 * math.erfc(5 / math.sqrt(2))
    lo, hi = admissible_ping_errors(n, q)
    assert hi >= ping_budget(n, q)[1]
    assert lo == ping_budget(n, q)[0]
    assert hi >= 1
    k = math.ceil(hi - 1e-9)
    assert _binomial_tail(n, q, k) <= five_sigma_tail
    if k > ping_budget(n, q)[1]:
        assert _binomial_tail(n, q, k - 1) > five_sigma_tail
    assert admissible_ping_errors(n, 0.0) == (0.0, 0.0)


def test_big_m_exceeds_twice_per_phase_demand(desk):
    _, meas = _scenario(desk)
    prob = build_problem(desk, meas, CFG)
    per_phase = Counter()
    for ld in desk.loads:
        per_phase[ld.phase] += ld.forecast_p + abs(ld.forecast_q)
    for c in desk.capacitors:
        for ph, q in c.rated_q:
            per_phase[ph] += q
    assert prob.big_m > 2 * max(per_phase.values())
    assert prob.big_m > 2 * max(abs(v) for f in _scenario(desk)[0].true_flow.values() for v in f)


def test_small_big_m_is_rejected(desk):
    _, meas = _scenario(desk)
    with pytest.raises(ValueError, match="big_m"):
        build_problem(desk, meas, BuildConfig(big_m=big_m_floor(desk)))


def test_missing_config_and_unobservable_placement(desk):
    _, meas = _scenario(desk)
    with pytest.raises(ValueError):
        build_problem(desk, meas, None)
    cyc = fundamental_cycles(desk)[0]
    meas.placement = Placement(tuple(ln for ln in meas.placement.metered_lines if ln not in cyc),
                               meas.placement.pinged_loads)
    with pytest.raises(NotObservable, match="cycle 0"):
        build_problem(desk, meas, CFG)


# --------------------------------------------------------------------------
# objective and truth feasibility


def test_zero_noise_truth_has_zero_objective(desk):
    truth, meas = _scenario(desk, topo_index=7)
    prob = build_problem(desk, meas, CFG)
    vals = truth_assignment(prob, desk, truth, meas)
    assert objective_of(prob, vals) == pytest.approx(0.0, abs=1e-12)
    assert prob.violations(vals) == []


def test_one_sigma_flow_residual_costs_one(feeder4):
    truth, meas = _scenario(feeder4)
    prob = build_problem(feeder4, meas, CFG)
    vals = truth_assignment(prob, feeder4, truth, meas)
    sP = meas.flow_meas["L01", "A"][2]
    vals[VarRef("b", ("L01", "A", "P"))] += sP
    assert objective_of(prob, vals) == pytest.approx(1.0)


def test_objective_is_dot_product(desk):
    _, meas = _scenario(desk, noise=NoiseSpec(10.0, 1.0, 0.0, seed=1))
    prob = build_problem(desk, meas, CFG)
    gen = np.random.default_rng(0)
    x = gen.uniform(prob.lb, prob.ub)
    want = sum(prob.cost[j] * x[j] for j in range(prob.n_vars))
    assert objective_of(prob, x) == pytest.approx(want, rel=1e-12)
    assert objective_of(prob, dict(zip(prob.variables, x))) == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("name", ["loop3.net", "twofeeder.net", "ring6.net", "multifeeder.net",
                                  "desk123.net"])
def test_truth_satisfies_every_row_under_noise(name):
    m = load_fixture(name)
    topos = enumerate_operational_topologies(m, include_outages=True)
    gen = np.random.default_rng(5)
    for k in gen.choice(len(topos), size=min(10, len(topos)), replace=False):
        topo = topos[k]
        caps = {cp: int(gen.integers(2)) for cp in m.cap_phases}
        truth = simulate_truth(m, topo.switch_status, topo.section_status, caps)
        meas = corrupt_measurements(m, truth, make_placement(m, gen),
                                    NoiseSpec(20.0, 1.0, 0.05, seed=int(k)))
        prob = build_problem(m, meas, CFG)
        assert prob.violations(truth_assignment(prob, m, truth, meas)) == []


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(random_networks(), st.integers(0, 10_000), st.sampled_from([0.0, 1.0, 20.0]),
       st.sampled_from([0.0, 0.05]))
def test_truth_feasible_random(net, seed, load_err, ping_err):
    _, m = net
    assume(m is not None)
    gen = np.random.default_rng(seed)
    topos = enumerate_operational_topologies(m, include_outages=True, max_count=5000)
    topo = topos[int(gen.integers(len(topos)))]
    caps = {cp: int(gen.integers(2)) for cp in m.cap_phases}
    truth = simulate_truth(m, topo.switch_status, topo.section_status, caps)
    meas = corrupt_measurements(m, truth, make_placement(m, gen),
                                NoiseSpec(load_err, 1.0 if load_err else 0.0, ping_err, seed=seed))
    prob = build_problem(m, meas, CFG)
    vals = truth_assignment(prob, m, truth, meas)
    assert prob.violations(vals) == []
    if load_err == 0.0:
        assert objective_of(prob, vals) == pytest.approx(0.0, abs=1e-6)


def test_problem_builder_guards():
    b = ProblemBuilder()
    b.var("x", (0,), 0, 1)
    with pytest.raises(ValueError, match="duplicate"):
        b.var("x", (0,), 0, 1)
    with pytest.raises(ValueError, match="finite"):
        b.var("y", (0,), 0, math.inf)
    with pytest.raises(ValueError, match="tag"):
        b.add([(1, 0)], "<=", 1, "Eq99")
    b.add([(1, 0), (-1, 0), (2, 0)], "<=", 1, "Eq4")
    assert b.constraints[-1].terms == ((2.0, 0),)
