"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .estimator import EstimationError, EstimatorConfig, estimate, oracle_estimate
from .experiment import ScenarioSpec, run_campaign, sample_scenario
from .measurement import MeasurementSet, NoiseSpec, corrupt_measurements, make_placement
from .milp.builder import BuildConfig, build_problem
from .milp.lp import LpFailure
from .milp.mps import export_mps
from .milp.solver import SolverConfig
from .network import (EnumerationOverflow, NetworkError, enumerate_operational_topologies,
                      fundamental_cycles, load_network, simple_cycles)
from .powerflow import ScenarioTruth

#: seed used when neither --seed nor GRIDTOP_SEED is given
DEFAULT_SEED = 20240917


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("GRIDTOP_SEED")
    if env is None:
        return DEFAULT_SEED
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"GRIDTOP_SEED must be an integer, got {env!r}") from None


def _faults(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("expected MIN:MAX, e.g. 1:3") from None
    return lo, hi


def _read_text(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


def _read_json(path: str) -> dict:
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _write(text: str, path: str | None):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _dump(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _model(path: str):
    try:
        return load_network(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


def _measurements(path: str) -> MeasurementSet:
    try:
        return MeasurementSet.from_json(_read_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: not a measurement set ({exc})") from None


def _estimator_config(args) -> EstimatorConfig:
    return EstimatorConfig(BuildConfig(),
                           SolverConfig(node_limit=args.node_limit,
                                        time_limit_seconds=args.time_limit))


def cmd_validate(args) -> int:
    model = _model(args.net)
    secs = model.sections
    print(f"buses {len(model.buses)}  lines {len(model.lines)}  switches {len(model.switches)}  "
          f"loads {len(model.loads)}  capacitors {len(model.capacitors)}")
    print(f"load sections {len(secs)} (sources: {', '.join(map(str, model.source_sections))})")
    for s in secs:
        print(f"  section {s.id}: {len(s.member_buses)} buses, {len(s.member_loads)} loads, "
              f"switches {','.join(s.boundary_switches) or '-'}")
    print(f"fundamental cycles {len(fundamental_cycles(model))}  "
          f"simple cycles {len(simple_cycles(model))}")
    try:
        n = len(enumerate_operational_topologies(model, max_count=args.max_count))
        print(f"normal radial topologies {n}")
    except EnumerationOverflow:
        print(f"normal radial topologies > {args.max_count}")
    for w in model.warnings:
        print(f"warning: {w}")
    return 0


def cmd_simulate(args) -> int:
    model = _model(args.net)
    spec = ScenarioSpec(include_outages=args.outages, fault_count_range=args.faults,
                        master_seed=_seed(args), loss_target_pct=args.loss_pct)
    truth = sample_scenario(model, spec, args.index)
    _write(_dump(truth.to_json()), args.output)
    return 0


def cmd_measure(args) -> int:
    model = _model(args.net)
    try:
        truth = ScenarioTruth.from_json(_read_json(args.truth))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{args.truth}: not a scenario truth ({exc})") from None
    seed = _seed(args)
    ss = np.random.SeedSequence(seed)
    placement_seq, noise_seq = ss.spawn(2)
    placement = make_placement(model, np.random.default_rng(placement_seq), args.ping_frac)
    noise = NoiseSpec(args.load_err, args.flow_err, args.ping_err,
                      seed=int(noise_seq.generate_state(1, np.uint64)[0] >> 1))
    meas = corrupt_measurements(model, truth, placement, noise)
    _write(_dump(meas.to_json()), args.output)
    return 0


def cmd_estimate(args) -> int:
    model = _model(args.net)
    meas = _measurements(args.meas)
    est = estimate(model, meas, _estimator_config(args))
    _write(_dump(est.to_json()), args.output)
    return 0


def cmd_oracle(args) -> int:
    model = _model(args.net)
    meas = _measurements(args.meas)
    res = oracle_estimate(model, meas, args.max_count, _estimator_config(args),
                          include_outages=not args.normal_only)
    _write(res.to_csv(model), args.output)
    return 0


def cmd_export_mps(args) -> int:
    model = _model(args.net)
    meas = _measurements(args.meas)
    _write(export_mps(build_problem(model, meas, BuildConfig())), args.output)
    return 0


def cmd_experiment(args) -> int:
    model = _model(args.net)
    doc = _read_json(args.spec)
    if args.seed is not None or "GRIDTOP_SEED" in os.environ or "master_seed" not in doc:
        doc["master_seed"] = _seed(args)
    try:
        spec = ScenarioSpec.from_json(doc)
    except TypeError as exc:
        raise DataError(f"{args.spec}: bad campaign spec ({exc})") from None
    report = run_campaign(model, spec, workers=args.workers, config=_estimator_config(args))
    for path in report.write(args.out_prefix):
        print(f"wrote {path}", file=sys.stderr)
    sys.stdout.write(report.cells_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridtop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=False, solver=False):
        sp.add_argument("-o", "--output", help="output path (default stdout)")
        if seed:
            sp.add_argument("--seed", type=int, help="random seed (env GRIDTOP_SEED)")
        if solver:
            sp.add_argument("--node-limit", type=int, default=100_000)
            sp.add_argument("--time-limit", type=float, default=600.0, help="seconds")

    sp = sub.add_parser("validate", help="parse a network file and summarize it")
    sp.add_argument("net")
    sp.add_argument("--max-count", type=int, default=100_000)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("simulate", help="sample a ground-truth scenario")
    sp.add_argument("net")
    sp.add_argument("--outages", action="store_true")
    sp.add_argument("--faults", type=_faults, default=(1, 3), metavar="MIN:MAX")
    sp.add_argument("--loss-pct", type=float, default=0.0,
                    help="inject uniform line losses reaching this %% of substation demand")
    sp.add_argument("--index", type=int, default=0, help="scenario index under the seed")
    common(sp, seed=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("measure", help="place meters and corrupt a truth")
    sp.add_argument("net")
    sp.add_argument("truth", help="truth JSON path or - for stdin")
    sp.add_argument("--load-err", type=float, default=1.0, help="pseudo-load error, %%")
    sp.add_argument("--flow-err", type=float, default=1.0, help="flow meter error, %%")
    sp.add_argument("--ping-err", type=float, default=0.0, help="ping failure probability")
    sp.add_argument("--ping-frac", type=float, default=0.10)
    common(sp, seed=True)
    sp.set_defaults(func=cmd_measure)

    sp = sub.add_parser("estimate", help="estimate topology and outages")
    sp.add_argument("net")
    sp.add_argument("meas", help="measurement JSON path or - for stdin")
    common(sp, solver=True)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("oracle", help="objective of every enumerable topology (CSV)")
    sp.add_argument("net")
    sp.add_argument("meas")
    sp.add_argument("--max-count", type=int, default=100_000)
    sp.add_argument("--normal-only", action="store_true", help="skip outage topologies")
    common(sp, solver=True)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("export-mps", help="write the estimation MILP as fixed-format MPS")
    sp.add_argument("net")
    sp.add_argument("meas")
    common(sp)
    sp.set_defaults(func=cmd_export_mps)

    sp = sub.add_parser("experiment", help="run a Monte Carlo campaign")
    sp.add_argument("net")
    sp.add_argument("spec", help="campaign spec JSON")
    sp.add_argument("--out-prefix", default="campaign_")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--seed", type=int, help="master seed (env GRIDTOP_SEED)")
    common_solver = sp.add_argument_group("solver")
    common_solver.add_argument("--node-limit", type=int, default=100_000)
    common_solver.add_argument("--time-limit", type=float, default=600.0)
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"gridtop: usage error: {exc}", file=sys.stderr)
        return 1
    except (EstimationError, LpFailure) as exc:
        print(f"gridtop: solver failure: {exc}", file=sys.stderr)
        return 3
    except NetworkError as exc:
        print(f"gridtop: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError, KeyError) as exc:
        print(f"gridtop: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
