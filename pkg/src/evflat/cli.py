"""Command-line driver: ``evflat {offline,online,simulate,bounds,bench}``.

Vehicle scenarios are CSV files with header ``id,arrive_slot,depart_slot,demand_kwh``.
Base loads are CSV with header ``slot,load_kwh``. Simulation configs and
arrival models are JSON. Every number written is rounded to 9 significant
digits so output files can be compared byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .edf import edf_allocate
from .elf import run_elf
from .flatten import solve_offline
from .harness import (ALGORITHMS, BENCH_ALGORITHMS, Band, TrafficPattern, bench_cpu, expected_profile,
                      monte_carlo, read_base_load, write_bench_csv)
from .model import CostFunction, ExpectedProfile, Vehicle, scenario_from_vehicles
from .oracle import BudgetExceeded, DiscreteArrivalModel, expected_costs


class InputError(ValueError):
    """Bad user input; reported without a traceback."""


def fmt(x) -> str:
    return f"{float(x):.9g}"


# inputs ----------------------------------------------------------------------

def read_vehicles(path) -> list:
    out = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        want = ["id", "arrive_slot", "depart_slot", "demand_kwh"]
        if header is None or [h.strip() for h in header] != want:
            raise InputError(f"{path}:1: expected header '{','.join(want)}'")
        for lineno, row in enumerate(rows, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 4:
                raise InputError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                v = Vehicle(row[0].strip(), int(row[1]), int(row[2]), float(row[3]))
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
            out.append(v)
    return out


def load_scenario(path, base_path=None, horizon=None, slot_minutes=10):
    vehicles = read_vehicles(path)
    if base_path is not None:
        try:
            base = read_base_load(base_path, horizon)
        except ValueError as exc:
            raise InputError(str(exc)) from None
    else:
        T = horizon or max((v.depart_slot for v in vehicles), default=1)
        base = np.zeros(T)
    try:
        return scenario_from_vehicles(vehicles, base, slot_minutes=slot_minutes)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: {exc.msg}") from None


def _field(obj, key, where, kind, default=None, required=False):
    if key not in obj:
        if required:
            raise InputError(f"{where}.{key}: missing")
        return default
    val = obj[key]
    if kind is float and isinstance(val, (int, float)) and not isinstance(val, bool):
        return float(val)
    if kind is int and isinstance(val, int) and not isinstance(val, bool):
        return val
    if kind not in (float, int) and isinstance(val, kind):
        return val
    raise InputError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, got {type(val).__name__}")


def pattern_from_config(raw, where="config.pattern") -> TrafficPattern:
    if isinstance(raw, int) and not isinstance(raw, bool):
        if raw not in (1, 2, 3):
            raise InputError(f"{where}: traffic scenario must be 1, 2 or 3")
        return TrafficPattern.scenario(raw)
    if not isinstance(raw, dict):
        raise InputError(f"{where}: expected 1, 2, 3 or an object")
    bands_raw = _field(raw, "bands", where, list, required=True)
    bands = []
    for i, b in enumerate(bands_raw):
        w = f"{where}.bands[{i}]"
        if not isinstance(b, dict):
            raise InputError(f"{w}: expected an object")
        try:
            bands.append(Band(_field(b, "start", w, float, required=True), _field(b, "end", w, float, required=True),
                              _field(b, "rate", w, float, required=True),
                              _field(b, "mean_parking", w, float, required=True)))
        except ValueError as exc:
            if isinstance(exc, InputError):
                raise
            raise InputError(f"{w}: {exc}") from None
    kw = {}
    for key, kind in (("demand_low", float), ("demand_high", float), ("slot_minutes", int),
                      ("horizon_hours", float), ("start_clock", float), ("max_parking_hours", float)):
        val = _field(raw, key, where, kind)
        if val is not None:
            kw[key] = val
    try:
        return TrafficPattern(tuple(bands), **kw)
    except ValueError as exc:
        raise InputError(f"{where}: {exc}") from None


def cost_from_tag(tag) -> CostFunction:
    if tag not in ("quadratic", "quartic"):
        raise InputError(f"cost: unknown tag {tag!r}; valid: quadratic, quartic")
    return CostFunction.named(tag)


def model_from_json(data, where="model") -> DiscreteArrivalModel:
    if not isinstance(data, dict):
        raise InputError(f"{where}: expected an object")
    slots = _field(data, "slots", where, list, required=True)
    built = []
    for t, slot in enumerate(slots, start=1):
        w = f"{where}.slots[{t - 1}]"
        if not isinstance(slot, list):
            raise InputError(f"{w}: expected a list of outcomes")
        outs = []
        for i, o in enumerate(slot):
            wo = f"{w}[{i}]"
            if not isinstance(o, dict):
                raise InputError(f"{wo}: expected an object")
            p = _field(o, "p", wo, float, required=True)
            base = _field(o, "base", wo, float, default=0.0)
            dem = _field(o, "demand", wo, dict, default={})
            try:
                dem = {int(k): float(v) for k, v in dem.items()}
            except (TypeError, ValueError):
                raise InputError(f"{wo}.demand: keys must be slots and values kWh") from None
            outs.append((p, base, dem))
        built.append(outs)
    try:
        return DiscreteArrivalModel.build(built, _field(data, "slot_minutes", where, int, default=10))
    except ValueError as exc:
        raise InputError(f"{where}: {exc}") from None


# outputs ---------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_schedule(path, rates, base):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot", "rate_kwh", "base_kwh", "total_kwh"])
        for t, (s, l) in enumerate(zip(rates, base), start=1):
            w.writerow([t, fmt(s), fmt(l), fmt(s + l)])


def write_allocation(path, alloc):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle", "slot", "kwh"])
        for (vid, slot), x in alloc.as_dict().items():
            w.writerow([vid, slot, fmt(x)])


# commands --------------------------------------------------------------------

def cmd_offline(args) -> int:
    scenario = load_scenario(args.scenario, args.base_load, args.horizon)
    sol = solve_offline(scenario, cost_from_tag(args.cost))
    out = _out_dir(args)
    write_schedule(out / "schedule.csv", sol.schedule.rates, scenario.base_loads)
    write_allocation(out / "allocation.csv", edf_allocate(scenario, sol.schedule))
    print(f"cost {fmt(sol.cost)}")
    return 0


def cmd_online(args) -> int:
    scenario = load_scenario(args.scenario, args.base_load, args.horizon)
    if args.forecast == "perfect":
        profile = ExpectedProfile.from_scenario(scenario)
    elif args.forecast == "zero":
        profile = ExpectedProfile(scenario.base_loads, np.zeros((scenario.T, scenario.T)))
    else:
        pattern = TrafficPattern.scenario(int(args.forecast))
        if pattern.grid.T != scenario.T:
            raise InputError(f"forecast pattern has {pattern.grid.T} slots, scenario has {scenario.T}")
        profile = expected_profile(pattern, scenario.base_loads)
    run = run_elf(scenario, profile, cost_from_tag(args.cost))
    out = _out_dir(args)
    write_schedule(out / "schedule.csv", run.schedule.rates, scenario.base_loads)
    write_allocation(out / "allocation.csv", edf_allocate(scenario, run.schedule))
    print(f"cost {fmt(run.cost)}")
    return 0


def simulate_config(cfg, args):
    if not isinstance(cfg, dict):
        raise InputError("config: expected an object")
    where = "config"
    pattern = pattern_from_config(cfg.get("pattern", 1))
    runs = args.runs if args.runs is not None else _field(cfg, "runs", where, int, default=100)
    seed = args.seed if args.seed is not None else _field(cfg, "seed", where, int, default=0)
    algos = args.algo or _field(cfg, "algorithms", where, list, default=list(ALGORITHMS))
    bad = [a for a in algos if a not in ALGORITHMS]
    if bad:
        raise InputError(f"{where}.algorithms: unknown {', '.join(map(repr, bad))}; valid: {', '.join(ALGORITHMS)}")
    if runs < 1:
        raise InputError(f"{where}.runs: must be >= 1")
    cost = cost_from_tag(args.cost or _field(cfg, "cost", where, str, default="quadratic"))
    base_path = args.base_load or _field(cfg, "base_load", where, str)
    base = None
    if base_path is not None:
        try:
            base = read_base_load(base_path, pattern.grid.T)
        except ValueError as exc:
            raise InputError(str(exc)) from None
    reference = _field(cfg, "reference", where, str, default="offline")
    if reference not in ALGORITHMS:
        raise InputError(f"{where}.reference: unknown {reference!r}; valid: {', '.join(ALGORITHMS)}")
    threads = _field(cfg, "threads", where, int)
    return pattern, runs, seed, algos, cost, base, reference, threads


def cmd_simulate(args) -> int:
    pattern, runs, seed, algos, cost, base, reference, threads = simulate_config(read_json(args.config), args)
    res = monte_carlo(pattern, algos, runs, seed, base, cost, reference, threads)
    out = _out_dir(args)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "metric", "value"])
        for name in algos:
            s = res[name]
            for metric, val in (("runs", s.runs), ("mean_cost", s.mean_cost), ("ci95", s.ci95),
                                ("relative_loss", s.relative_loss), ("mean_normalized", s.mean_normalized),
                                ("mean_variance", s.mean_variance)):
                w.writerow([name, metric, fmt(val)])
    with open(out / "loads.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot"] + list(algos))
        for t in range(pattern.grid.T):
            w.writerow([t + 1] + [fmt(res[a].mean_loads[t]) for a in algos])
    for name in algos:
        s = res[name]
        print(f"{name}: mean cost {fmt(s.mean_cost)} loss vs {reference} {fmt(s.relative_loss)}")
    return 0


def cmd_bounds(args) -> int:
    model = model_from_json(read_json(args.model))
    cost = cost_from_tag(args.cost)
    try:
        rep = expected_costs(model, cost, n_samples=args.runs, seed=args.seed or 0)
    except BudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = _out_dir(args)
    with open(out / "bounds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "value"])
        for name, val in rep.as_rows():
            w.writerow([name, fmt(val)])
    for name, val in rep.as_rows():
        print(f"{name} {fmt(val)}")
    return 0


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_bench(args) -> int:
    pattern = TrafficPattern.constant(args.rate, args.parking, 1.0, max_parking_hours=args.max_parking)
    algos = args.algo or ["elf", "avg", "stationary"]
    bad = [a for a in algos if a not in BENCH_ALGORITHMS]
    if bad:
        raise InputError(f"--algo: unknown {', '.join(map(repr, bad))}; valid: {', '.join(BENCH_ALGORITHMS)}")
    base = float(args.base) if args.base_load is None else read_base_load(args.base_load)
    if args.rates:
        rows = bench_cpu(pattern.with_horizon(args.rate_horizon), algos, rates=args.rates, runs=args.runs or 3,
                         seed=args.seed or 0, base_load=base)
    else:
        rows = bench_cpu(pattern, algos, horizons_hours=args.horizons, runs=args.runs or 3,
                         seed=args.seed or 0, base_load=base)
    out = _out_dir(args)
    write_bench_csv(rows, out / "bench.csv")
    for r in rows:
        print(f"{r.algorithm} T={r.horizon_slots} run {fmt(r.seconds_per_run)}s decision {fmt(r.seconds_per_decision)}s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evflat", description="Load-flattening EV charging schedules.")
    ap.add_argument("--version", action="version", version=f"evflat {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, cost=True):
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--runs", type=int)
        if cost:
            p.add_argument("--cost", choices=("quadratic", "quartic"))
        p.add_argument("--base-load", help="CSV with header slot,load_kwh")

    p = sub.add_parser("offline", help="optimal schedule with all arrivals known")
    p.add_argument("scenario")
    p.add_argument("--horizon", type=int)
    common(p)
    p.set_defaults(func=cmd_offline, cost="quadratic")

    p = sub.add_parser("online", help="ELF schedule against a forecast")
    p.add_argument("scenario")
    p.add_argument("--horizon", type=int)
    p.add_argument("--forecast", choices=("perfect", "zero", "1", "2", "3"), default="zero")
    common(p)
    p.set_defaults(func=cmd_online, cost="quadratic")

    p = sub.add_parser("simulate", help="Monte-Carlo comparison of algorithms")
    p.add_argument("config")
    p.add_argument("--algo", action="append", help="repeatable; overrides config algorithms")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bounds", help="expected costs and bounds of a small arrival model")
    p.add_argument("model")
    common(p)
    p.set_defaults(func=cmd_bounds, cost="quadratic")

    p = sub.add_parser("bench", help="CPU time over horizons or arrival rates")
    p.add_argument("--algo", action="append")
    p.add_argument("--horizons", type=_float_list, default=list(range(1, 11)), help="hours, comma separated")
    p.add_argument("--rates", type=_float_list, help="PEVs/hour, comma separated; replaces the horizon sweep")
    p.add_argument("--rate-horizon", type=float, default=10.0, help="hours simulated in a rate sweep")
    p.add_argument("--rate", type=float, default=35.0)
    p.add_argument("--parking", type=float, default=2.0, help="mean parking hours")
    p.add_argument("--max-parking", type=float, default=4.0, help="parking cap in hours")
    p.add_argument("--base", type=float, default=100.0, help="constant base load per slot in kWh")
    common(p, cost=False)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "cost", None) is None and args.command != "simulate":
        args.cost = "quadratic"
    try:
        return args.func(args)
    except (InputError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
