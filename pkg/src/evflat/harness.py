"""Traffic patterns, scenario generation, the AVG baseline and experiment drivers.

A day starts at ``start_clock`` (08:00 by default) and is cut into slots of
``slot_minutes``. Arrivals per slot are Poisson with the hourly band rate
scaled to the slot length; each vehicle parks for an exponential time that is
rounded up to whole slots and cut at the horizon.
"""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .elf import ElfPlanner, run_elf
from .fastpath import PeriodicProfile, StationaryProfile, periodic_step, stationary_step
from .flatten import solve_offline
from .model import (QUADRATIC, AggregateSchedule, CostFunction, ExpectedProfile, Scenario, TimeGrid,
                    Vehicle, initial_state, scenario_from_vehicles, state_transition)

ALGORITHMS = ("offline", "elf", "avg")
BENCH_ALGORITHMS = ("offline", "elf", "avg", "periodic", "stationary")


@dataclass(frozen=True)
class Band:
    """Clock interval ``[start, end)`` in hours with its arrival rate and mean parking time."""

    start: float
    end: float
    rate: float
    mean_parking: float

    def __post_init__(self):
        if self.rate < 0 or self.mean_parking < 0:
            raise ValueError("band rate and mean parking must be nonnegative")
        if self.rate > 0 and self.mean_parking <= 0:
            raise ValueError("a band with arrivals needs a positive mean parking time")

    def covers(self, hour: float) -> bool:
        h = hour % 24.0
        lo, hi = self.start % 24.0, self.end % 24.0
        if self.end - self.start >= 24:
            return True
        if lo < hi:
            return lo <= h < hi
        return h >= lo or h < hi


# rates S1, S2, S3 per band, then mean parking in hours
_TABLE = (
    (8, 10, (7, 7, 7), 10.0),
    (10, 12, (5, 5, 5), 0.5),
    (12, 14, (10, 35, 60), 2.0),
    (14, 18, (5, 5, 5), 0.5),
    (18, 20, (10, 35, 60), 2.0),
    (20, 24, (5, 5, 5), 10.0),
    (0, 8, (0, 0, 0), 0.0),
)


@dataclass(frozen=True)
class TrafficPattern:
    bands: tuple
    demand_low: float = 25.0
    demand_high: float = 35.0
    slot_minutes: int = 10
    horizon_hours: float = 24.0
    start_clock: float = 8.0
    max_parking_hours: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "bands", tuple(self.bands))
        if not 0 <= self.demand_low <= self.demand_high:
            raise ValueError("need 0 <= demand_low <= demand_high")
        if self.horizon_hours <= 0 or self.slot_minutes < 1:
            raise ValueError("horizon and slot length must be positive")
        slots = self.horizon_hours * 60.0 / self.slot_minutes
        if abs(slots - round(slots)) > 1e-9:
            raise ValueError("horizon must be a whole number of slots")

    @classmethod
    def scenario(cls, n: int, **kw) -> "TrafficPattern":
        """Light (1), moderate (2) or heavy (3) traffic over one day from 08:00."""
        if n not in (1, 2, 3):
            raise ValueError("traffic scenario must be 1, 2 or 3")
        bands = tuple(Band(a, b, rates[n - 1], park) for a, b, rates, park in _TABLE)
        return cls(bands, **kw)

    @classmethod
    def constant(cls, rate: float, mean_parking: float, horizon_hours: float, **kw) -> "TrafficPattern":
        return cls((Band(0, 24, rate, mean_parking),), horizon_hours=horizon_hours, **kw)

    def with_horizon(self, hours: float) -> "TrafficPattern":
        return replace(self, horizon_hours=hours)

    def with_rate(self, rate: float) -> "TrafficPattern":
        """Same bands with every nonzero rate replaced by ``rate``."""
        return replace(self, bands=tuple(replace(b, rate=rate if b.rate > 0 else 0.0) for b in self.bands))

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(int(round(self.horizon_hours * 60.0 / self.slot_minutes)), self.slot_minutes)

    @property
    def slot_hours(self) -> float:
        return self.slot_minutes / 60.0

    def _band_at(self, t: int) -> Optional[Band]:
        hour = self.start_clock + (t - 1) * self.slot_hours
        for b in self.bands:
            if b.covers(hour):
                return b
        return None

    def slot_rates(self) -> np.ndarray:
        """Mean arrivals per slot."""
        return np.array([(b.rate if b else 0.0) * self.slot_hours
                         for b in map(self._band_at, range(1, self.grid.T + 1))])

    def slot_parking(self) -> np.ndarray:
        return np.array([b.mean_parking if b else 0.0 for b in map(self._band_at, range(1, self.grid.T + 1))])

    @property
    def expected_vehicles(self) -> float:
        return float(self.slot_rates().sum())

    @property
    def mean_demand(self) -> float:
        return 0.5 * (self.demand_low + self.demand_high)

    def parking_slots(self, hours: np.ndarray) -> np.ndarray:
        slots = np.maximum(1, np.ceil(hours / self.slot_hours - 1e-12)).astype(int)
        if self.max_parking_hours is not None:
            slots = np.minimum(slots, self.cap_slots)
        return slots

    @property
    def cap_slots(self) -> int:
        return max(1, int(math.ceil(self.max_parking_hours / self.slot_hours - 1e-12)))

    def span_distribution(self, mean_parking: float, n_max: int) -> np.ndarray:
        """``P(stay = m slots)`` for ``m = 1..n_max``; longer stays are piled on ``n_max``."""
        if self.max_parking_hours is not None:
            n_max = min(n_max, self.cap_slots)
        m = np.arange(1, n_max + 1)
        delta = self.slot_hours
        upper = np.exp(-m * delta / mean_parking)
        prob = np.exp(-(m - 1) * delta / mean_parking) - upper
        prob[-1] += upper[-1]
        return prob


def synthetic_base_load(T: int, slot_minutes: int = 10, start_clock: float = 8.0) -> np.ndarray:
    """Double-peaked non-EV load in kWh per slot: a midday shoulder and an evening peak."""
    hours = start_clock + (np.arange(T) + 0.5) * slot_minutes / 60.0
    h = hours % 24.0
    per_hour = (540.0 + 270.0 * np.exp(-((h - 13.0) / 2.5) ** 2) + 450.0 * np.exp(-((h - 19.0) / 2.0) ** 2)
                - 180.0 * np.exp(-((h - 3.5) / 3.0) ** 2))
    return per_hour * slot_minutes / 60.0


def read_base_load(path, T: Optional[int] = None) -> np.ndarray:
    """Read a ``slot,load_kwh`` CSV; slots must be 1..T in order."""
    loads = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None or [h.strip() for h in header] != ["slot", "load_kwh"]:
            raise ValueError(f"{path}:1: expected header 'slot,load_kwh'")
        for lineno, row in enumerate(rows, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                slot, load = int(row[0]), float(row[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: cannot parse {row!r}") from None
            if slot != len(loads) + 1:
                raise ValueError(f"{path}:{lineno}: expected slot {len(loads) + 1}, got {slot}")
            if not load >= 0:
                raise ValueError(f"{path}:{lineno}: load must be nonnegative")
            loads.append(load)
    if T is not None and len(loads) != T:
        raise ValueError(f"{path}: {len(loads)} slots for a horizon of {T}")
    return np.array(loads)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(seed))


def _base_array(pattern: TrafficPattern, base_load) -> np.ndarray:
    T = pattern.grid.T
    if base_load is None:
        return synthetic_base_load(T, pattern.slot_minutes, pattern.start_clock)
    arr = np.broadcast_to(np.asarray(base_load, dtype=float), (T,)) if np.ndim(base_load) == 0 \
        else np.asarray(base_load, dtype=float)
    if arr.shape != (T,):
        raise ValueError(f"base load has {arr.shape[0]} slots, horizon has {T}")
    return np.array(arr)


def generate_scenario(pattern: TrafficPattern, seed, base_load=None) -> Scenario:
    rng = _rng(seed)
    T = pattern.grid.T
    counts = rng.poisson(pattern.slot_rates())
    arrive = np.repeat(np.arange(1, T + 1), counts)
    means = np.repeat(pattern.slot_parking(), counts)
    hours = rng.exponential(1.0, arrive.shape[0]) * means
    stay = pattern.parking_slots(hours)
    depart = np.minimum(arrive + stay - 1, T)
    demand = rng.uniform(pattern.demand_low, pattern.demand_high, arrive.shape[0])
    vehicles = [Vehicle(i, int(a), int(d), float(x)) for i, (a, d, x) in enumerate(zip(arrive, depart, demand))]
    return scenario_from_vehicles(vehicles, _base_array(pattern, base_load), pattern.grid)


def expected_profile(pattern: TrafficPattern, base_load=None) -> ExpectedProfile:
    """Mean arrivals of ``generate_scenario``, including the pile-up of stays cut at ``T``."""
    T = pattern.grid.T
    rates = pattern.slot_rates()
    parking = pattern.slot_parking()
    demand = np.zeros((T, T))
    for t in range(1, T + 1):
        if rates[t - 1] == 0:
            continue
        prob = pattern.span_distribution(parking[t - 1], T - t + 1)
        demand[t - 1, t - 1:t - 1 + prob.shape[0]] = rates[t - 1] * pattern.mean_demand * prob
    return ExpectedProfile(_base_array(pattern, base_load), demand)


def stationary_profile(pattern: TrafficPattern, base_load: float) -> StationaryProfile:
    """Forecast of a single-band pattern with a parking cap and a constant base load."""
    if len({(b.rate, b.mean_parking) for b in pattern.bands if b.rate > 0}) > 1 \
            or np.ptp(pattern.slot_rates()) > 0:
        raise ValueError("stationary forecast needs the same band over the whole horizon")
    if pattern.max_parking_hours is None:
        raise ValueError("stationary forecast needs max_parking_hours")
    if np.ndim(base_load) != 0:
        raise ValueError("stationary forecast needs a constant base load")
    rate = float(pattern.slot_rates()[0])
    prob = pattern.span_distribution(float(pattern.slot_parking()[0]), pattern.cap_slots)
    return StationaryProfile(float(base_load), rate * pattern.mean_demand * prob)


def avg_schedule(scenario: Scenario) -> AggregateSchedule:
    """Each vehicle charges at its demand divided by its parking slots."""
    A = scenario.demand_matrix
    T = scenario.T
    span = np.arange(T)[None, :] - np.arange(T)[:, None] + 1
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.where(span > 0, A / span, 0.0)
    starts = rate.sum(axis=1)
    ends = rate.sum(axis=0)
    return AggregateSchedule(np.maximum(np.cumsum(starts - np.concatenate(([0.0], ends[:-1]))), 0.0))


@dataclass(frozen=True)
class AvgRun:
    schedule: AggregateSchedule
    cost: float


def run_avg(scenario: Scenario, cost: Optional[CostFunction] = None) -> AvgRun:
    cost = cost or QUADRATIC
    sched = avg_schedule(scenario)
    return AvgRun(sched, float(np.sum(cost(sched.rates + scenario.base_loads))))


def run_policy(scenario: Scenario, policy: Callable, cost: Optional[CostFunction] = None):
    """Closed loop with ``policy(state) -> rate``; returns (rates, cost, seconds spent in the policy)."""
    cost = cost or QUADRATIC
    T = scenario.T
    rates = np.zeros(T)
    state = initial_state(scenario)
    spent = 0.0
    for k in range(1, T + 1):
        t0 = time.perf_counter()
        s = policy(state)
        spent += time.perf_counter() - t0
        rates[k - 1] = s
        if k < T:
            state = state_transition(state, s, scenario.events[k])
    return rates, float(np.sum(cost(rates + scenario.base_loads))), spent


@dataclass(frozen=True)
class RunMetrics:
    cost: float
    relative_loss: float
    load_variance: float
    loads: np.ndarray = field(repr=False)
    seconds_per_decision: float


@dataclass(frozen=True)
class AlgorithmSummary:
    name: str
    runs: int
    mean_cost: float
    ci95: float
    relative_loss: float  # (mean cost - mean reference cost) / mean reference cost
    mean_normalized: float  # mean over runs of cost / reference cost
    mean_variance: float
    seconds_per_decision: float
    mean_loads: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class MonteCarloResult:
    reference: str
    summaries: dict

    def __getitem__(self, name) -> AlgorithmSummary:
        return self.summaries[name]


def _threads(threads: Optional[int]) -> int:
    if threads is None:
        env = os.environ.get("EVFLAT_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def _solve(name: str, scenario: Scenario, cost: CostFunction, planner: Optional[ElfPlanner]):
    t0 = time.perf_counter()
    if name == "offline":
        sol = solve_offline(scenario, cost)
        rates, value = sol.schedule.rates, sol.cost
    elif name == "elf":
        run = run_elf(scenario, planner.profile, cost, planner=planner)
        rates, value = run.schedule.rates, run.cost
    elif name == "avg":
        run = run_avg(scenario, cost)
        rates, value = run.schedule.rates, run.cost
    else:
        raise ValueError(f"unknown algorithm {name!r}; valid: {', '.join(ALGORITHMS)}")
    return rates, value, (time.perf_counter() - t0) / scenario.T


def _check_algorithms(algorithms, valid):
    bad = [a for a in algorithms if a not in valid]
    if bad:
        raise ValueError(f"unknown algorithm(s) {', '.join(map(repr, bad))}; valid: {', '.join(valid)}")


def monte_carlo(pattern: TrafficPattern, algorithms: Sequence[str], n_runs: int, seed: int,
                base_load=None, cost: Optional[CostFunction] = None, reference: str = "offline",
                threads: Optional[int] = None) -> MonteCarloResult:
    """Run every algorithm on ``n_runs`` seeded scenarios.

    Run ``i`` draws from its own stream ``SeedSequence(seed, spawn_key=(i,))``,
    so results do not depend on the worker count or scheduling order.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    algorithms = list(dict.fromkeys(algorithms))
    _check_algorithms(algorithms + [reference], ALGORITHMS)
    cost = cost or QUADRATIC
    base = _base_array(pattern, base_load)
    names = algorithms + ([reference] if reference not in algorithms else [])
    planner = ElfPlanner(expected_profile(pattern, base)) if "elf" in names else None

    def one(i):
        scenario = generate_scenario(pattern, np.random.SeedSequence(seed, spawn_key=(i,)), base)
        return {name: _solve(name, scenario, cost, planner) for name in names}

    with ThreadPoolExecutor(max_workers=_threads(threads)) as pool:
        runs = list(pool.map(one, range(n_runs)))

    ref_costs = [r[reference][1] for r in runs]
    ref_mean = math.fsum(ref_costs) / n_runs
    out = {}
    for name in algorithms:
        costs = np.array([r[name][1] for r in runs])
        loads = np.stack([r[name][0] + base for r in runs])
        mean = math.fsum(costs) / n_runs
        sd = math.sqrt(math.fsum((costs - mean) ** 2) / (n_runs - 1)) if n_runs > 1 else 0.0
        ratios = [c / rc if rc > 0 else 1.0 for c, rc in zip(costs, ref_costs)]
        variances = [float(np.var(row)) for row in loads]
        out[name] = AlgorithmSummary(
            name=name,
            runs=n_runs,
            mean_cost=mean,
            ci95=1.96 * sd / math.sqrt(n_runs),
            relative_loss=(mean - ref_mean) / ref_mean if ref_mean > 0 else 0.0,
            mean_normalized=math.fsum(ratios) / n_runs,
            mean_variance=math.fsum(variances) / n_runs,
            seconds_per_decision=math.fsum(r[name][2] for r in runs) / n_runs,
            mean_loads=np.array([math.fsum(col) for col in loads.T]) / n_runs,
        )
    return MonteCarloResult(reference, out)


def single_run(pattern: TrafficPattern, name: str, seed, base_load=None,
               cost: Optional[CostFunction] = None, reference: str = "offline") -> RunMetrics:
    _check_algorithms([name, reference], ALGORITHMS)
    cost = cost or QUADRATIC
    base = _base_array(pattern, base_load)
    scenario = generate_scenario(pattern, seed, base)
    planner = ElfPlanner(expected_profile(pattern, base))
    rates, value, per = _solve(name, scenario, cost, planner)
    ref = _solve(reference, scenario, cost, planner)[1]
    loads = rates + base
    return RunMetrics(value, (value - ref) / ref if ref > 0 else 0.0, float(np.var(loads)), loads, per)


@dataclass(frozen=True)
class BenchRow:
    algorithm: str
    horizon_slots: int
    rate: float
    seconds_per_run: float
    seconds_per_decision: float


def _bench_one(name: str, pattern: TrafficPattern, base, scenarios, cost):
    """Mean seconds per run and per decision over the given scenarios."""
    per_run, per_dec = [], []
    T = pattern.grid.T
    for scenario in scenarios:
        t0 = time.perf_counter()
        if name == "offline":
            solve_offline(scenario, cost)
            spent = time.perf_counter() - t0
        elif name == "elf":
            run_elf(scenario, expected_profile(pattern, base), cost)
            spent = time.perf_counter() - t0
        elif name == "avg":
            run_avg(scenario, cost)
            spent = time.perf_counter() - t0
        elif name in ("periodic", "stationary"):
            prof = stationary_profile(pattern, float(np.asarray(base).ravel()[0]))
            if name == "periodic":
                per = PeriodicProfile.from_stationary(prof)
                _, _, spent_policy = run_policy(scenario, lambda st: periodic_step(st, per), cost)
            else:
                _, _, spent_policy = run_policy(scenario, lambda st: stationary_step(st, prof), cost)
            per_run.append(time.perf_counter() - t0)
            per_dec.append(spent_policy / T)
            continue
        else:
            raise ValueError(f"unknown algorithm {name!r}; valid: {', '.join(BENCH_ALGORITHMS)}")
        per_run.append(spent)
        per_dec.append(spent / T)
    return float(np.mean(per_run)), float(np.mean(per_dec))


def bench_cpu(pattern: TrafficPattern, algorithms: Sequence[str], horizons_hours: Optional[Sequence[float]] = None,
              rates: Optional[Sequence[float]] = None, runs: int = 3, seed: int = 0, base_load=None,
              cost: Optional[CostFunction] = None) -> list:
    """Wall-clock timing per run and per decision over horizons or arrival rates.

    ``base_load`` defaults to the synthetic profile; the fast paths need a
    scalar. Scenarios are shared by all algorithms at each point.
    """
    algorithms = list(algorithms)
    _check_algorithms(algorithms, BENCH_ALGORITHMS)
    if horizons_hours is not None and rates is not None:
        raise ValueError("sweep either horizons or rates, not both")
    if horizons_hours is not None:
        hs = list(horizons_hours)
        if any(b < a for a, b in zip(hs, hs[1:])):
            raise ValueError("horizons must be nondecreasing")
        points = [(pattern.with_horizon(h), None) for h in hs]
    elif rates is not None:
        points = [(pattern.with_rate(r), r) for r in rates]
    else:
        points = [(pattern, None)]
    cost = cost or QUADRATIC
    rows = []
    if not algorithms:
        return rows
    for i, (pat, rate) in enumerate(points):
        base = float(base_load) if np.ndim(base_load) == 0 and base_load is not None else base_load
        base_arr = _base_array(pat, base)
        scenarios = [generate_scenario(pat, np.random.SeedSequence(seed, spawn_key=(i, r)), base_arr)
                     for r in range(runs)]
        for name in algorithms:
            per_run, per_dec = _bench_one(name, pat, base if base is not None else base_arr, scenarios, cost)
            rows.append(BenchRow(name, pat.grid.T, rate if rate is not None else float("nan"), per_run, per_dec))
    return rows


def write_bench_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "horizon_slots", "rate", "seconds_per_run", "seconds_per_decision"])
        for r in rows:
            w.writerow([r.algorithm, r.horizon_slots, f"{r.rate:.9g}", f"{r.seconds_per_run:.9g}",
                        f"{r.seconds_per_decision:.9g}"])
