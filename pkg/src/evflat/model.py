"""Domain types, the online state transition, feasibility predicates and costs.

Slots are 1-indexed throughout the public API. Internally, arrays are
0-indexed, so slot ``t`` lives at index ``t - 1`` unless a docstring says
otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

TOL = 1e-9  # absolute energy tolerance in kWh


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    horizon_slots: int
    slot_minutes: int = 10

    def __post_init__(self):
        if int(self.horizon_slots) != self.horizon_slots or self.horizon_slots < 1:
            raise ValueError(f"horizon_slots must be a positive integer, got {self.horizon_slots}")
        if int(self.slot_minutes) != self.slot_minutes or self.slot_minutes < 1:
            raise ValueError(f"slot_minutes must be a positive integer, got {self.slot_minutes}")

    @property
    def T(self) -> int:
        return self.horizon_slots

    @property
    def slot_hours(self) -> float:
        return self.slot_minutes / 60.0


@dataclass(frozen=True)
class Vehicle:
    """One charging job: present from ``arrive_slot`` to ``depart_slot`` inclusive."""

    id: object
    arrive_slot: int
    depart_slot: int
    demand: float

    def __post_init__(self):
        if self.arrive_slot < 1 or self.depart_slot < self.arrive_slot:
            raise ValueError(f"vehicle {self.id!r}: need 1 <= arrive_slot <= depart_slot")
        if not self.demand >= 0:
            raise ValueError(f"vehicle {self.id!r}: demand must be nonnegative")

    @property
    def window(self) -> int:
        return self.depart_slot - self.arrive_slot + 1


@dataclass(frozen=True)
class ArrivalEvent:
    """What is revealed at ``slot``: the base load and new demand keyed by deadline."""

    slot: int
    base_load: float = 0.0
    demand_by_deadline: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.slot < 1:
            raise ValueError("event slot must be >= 1")
        if not self.base_load >= 0:
            raise ValueError(f"slot {self.slot}: base load must be nonnegative")
        clean = {}
        for deadline, amount in dict(self.demand_by_deadline).items():
            deadline = int(deadline)
            if deadline < self.slot:
                raise ValueError(f"slot {self.slot}: deadline {deadline} precedes arrival")
            if not amount >= 0:
                raise ValueError(f"slot {self.slot}: negative demand for deadline {deadline}")
            if amount > 0:
                clean[deadline] = clean.get(deadline, 0.0) + float(amount)
        object.__setattr__(self, "demand_by_deadline", MappingProxyType(dict(sorted(clean.items()))))

    @property
    def total_demand(self) -> float:
        return float(sum(self.demand_by_deadline.values()))

    @property
    def last_deadline(self) -> int:
        return max(self.demand_by_deadline, default=self.slot)


@dataclass(frozen=True)
class Scenario:
    """A full realization: one event per slot plus, optionally, the vehicles behind it."""

    grid: TimeGrid
    events: tuple
    vehicles: Optional[tuple] = None

    def __post_init__(self):
        events = tuple(self.events)
        T = self.grid.horizon_slots
        if len(events) != T:
            raise ValueError(f"scenario needs exactly {T} events, got {len(events)}")
        demand = np.zeros((T, T))
        for t, ev in enumerate(events, start=1):
            if ev.slot != t:
                raise ValueError(f"event {t} carries slot {ev.slot}")
            for deadline, amount in ev.demand_by_deadline.items():
                if deadline > T:
                    raise ValueError(f"slot {t}: deadline {deadline} beyond horizon {T}")
                demand[t - 1, deadline - 1] += amount
        object.__setattr__(self, "events", events)
        if self.vehicles is not None:
            object.__setattr__(self, "vehicles", tuple(self.vehicles))
        demand.setflags(write=False)
        object.__setattr__(self, "_demand", demand)
        object.__setattr__(self, "_base", _frozen_array([ev.base_load for ev in events]))

    @property
    def T(self) -> int:
        return self.grid.horizon_slots

    @property
    def base_loads(self) -> np.ndarray:
        return self._base

    @property
    def demand_matrix(self) -> np.ndarray:
        """``(T, T)`` array; entry ``[a-1, d-1]`` is the energy arriving at ``a`` due by ``d``."""
        return self._demand

    @property
    def total_demand(self) -> float:
        return float(self._demand.sum())

    def due_by(self) -> np.ndarray:
        """Cumulative demand whose deadline is at or before each slot."""
        return np.cumsum(self._demand.sum(axis=0))

    def arrived_by(self) -> np.ndarray:
        """Cumulative demand that has arrived at or before each slot."""
        return np.cumsum(self._demand.sum(axis=1))


@dataclass(frozen=True)
class DemandState:
    """Controller state at ``slot``: current base load and unfinished demand per deadline.

    ``remaining[t - slot]`` is the unfinished energy due by slot ``t`` for
    ``t = slot .. horizon``.
    """

    slot: int
    base_load: float
    remaining: np.ndarray
    horizon: int

    def __post_init__(self):
        rem = np.array(self.remaining, dtype=float)
        if rem.shape != (self.horizon - self.slot + 1,):
            raise ValueError("remaining must cover deadlines slot..horizon")
        if np.any(rem < 0) or not self.base_load >= 0:
            raise ValueError("state entries must be nonnegative")
        rem.setflags(write=False)
        object.__setattr__(self, "remaining", rem)

    @classmethod
    def from_mapping(cls, slot: int, base_load: float, remaining: Mapping[int, float], horizon: int):
        rem = np.zeros(horizon - slot + 1)
        for deadline, amount in remaining.items():
            if deadline < slot or deadline > horizon:
                raise ValueError(f"deadline {deadline} outside [{slot}, {horizon}]")
            rem[deadline - slot] += amount
        return cls(slot, base_load, rem, horizon)

    @property
    def due_now(self) -> float:
        return float(self.remaining[0])

    @property
    def total(self) -> float:
        return float(self.remaining.sum())

    def as_dict(self) -> dict:
        return {self.slot + i: float(v) for i, v in enumerate(self.remaining) if v > 0}


def initial_state(scenario: Scenario) -> DemandState:
    ev = scenario.events[0]
    return DemandState.from_mapping(1, ev.base_load, ev.demand_by_deadline, scenario.T)


@dataclass(frozen=True)
class ExpectedProfile:
    """First moments of the arrival process for every slot of the horizon.

    ``base[t-1]`` is the mean base load at slot ``t`` and ``demand[t-1, d-1]``
    the mean energy arriving at ``t`` with deadline ``d``. Entries for the
    current slot are ignored by the controller (the realized state is used).
    """

    base: np.ndarray
    demand: np.ndarray

    def __post_init__(self):
        base = np.array(self.base, dtype=float)
        demand = np.array(self.demand, dtype=float)
        T = base.shape[0]
        if base.ndim != 1 or demand.shape != (T, T):
            raise ValueError("profile needs base of shape (T,) and demand of shape (T, T)")
        if np.any(base < 0) or np.any(demand < 0):
            raise ValueError("profile entries must be nonnegative")
        if np.any(np.tril(demand, -1) != 0):
            raise ValueError("profile demand has a deadline before its arrival slot")
        base.setflags(write=False)
        demand.setflags(write=False)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "demand", demand)

    @property
    def T(self) -> int:
        return self.base.shape[0]

    @classmethod
    def zeros(cls, T: int) -> "ExpectedProfile":
        return cls(np.zeros(T), np.zeros((T, T)))

    @classmethod
    def from_scenario(cls, scenario: Scenario) -> "ExpectedProfile":
        """Perfect forecast: the mean equals the realization."""
        return cls(scenario.base_loads, scenario.demand_matrix)

    @classmethod
    def from_mapping(cls, T: int, slots: Mapping[int, tuple]) -> "ExpectedProfile":
        """Build from ``{t: (nu_t, {deadline: mu})}``; missing slots are zero."""
        base = np.zeros(T)
        demand = np.zeros((T, T))
        for t, (nu, mus) in slots.items():
            base[t - 1] = nu
            for d, mu in mus.items():
                if d < t or d > T:
                    raise ValueError(f"slot {t}: deadline {d} outside [{t}, {T}]")
                demand[t - 1, d - 1] += mu
        return cls(base, demand)


@dataclass(frozen=True)
class AggregateSchedule:
    """Total charging energy per slot, starting at ``start_slot``."""

    rates: np.ndarray
    start_slot: int = 1

    def __post_init__(self):
        rates = np.array(self.rates, dtype=float)
        if rates.ndim != 1:
            raise ValueError("rates must be one-dimensional")
        if np.any(rates < -TOL):
            raise ValueError("rates must be nonnegative")
        rates = np.maximum(rates, 0.0)
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    def __len__(self):
        return self.rates.shape[0]

    @property
    def slots(self) -> range:
        return range(self.start_slot, self.start_slot + len(self))


@dataclass(frozen=True)
class CostFunction:
    """Strictly convex increasing per-slot cost of the total load."""

    tag: str
    fn: Callable = field(compare=False, repr=False, default=None)

    def __post_init__(self):
        if self.tag == "quadratic":
            object.__setattr__(self, "fn", np.square)
        elif self.tag == "quartic":
            object.__setattr__(self, "fn", lambda x: np.power(x, 4))
        elif self.tag == "custom":
            if self.fn is None:
                raise ValueError("custom cost needs a callable")
        else:
            raise ValueError(f"unknown cost tag {self.tag!r}; use quadratic, quartic or custom")

    def __call__(self, load):
        return self.fn(np.asarray(load, dtype=float))

    @classmethod
    def named(cls, tag: str) -> "CostFunction":
        return cls(tag)

    @classmethod
    def custom(cls, fn: Callable) -> "CostFunction":
        return cls("custom", fn)


QUADRATIC = CostFunction("quadratic")
QUARTIC = CostFunction("quartic")


def state_transition(state: DemandState, s_k: float, event: ArrivalEvent) -> DemandState:
    """Serve ``s_k`` earliest-deadline-first, then add the arrivals of ``event``."""
    if event.slot != state.slot + 1:
        raise ValueError(f"event for slot {event.slot} cannot follow state at slot {state.slot}")
    if event.slot > state.horizon:
        raise ValueError("no slot left after the horizon")
    rem = state.remaining
    if s_k < rem[0] - TOL:
        raise ValueError(f"slot {state.slot}: rate {s_k} misses due-now demand {rem[0]}")
    if s_k > rem.sum() + TOL:
        raise ValueError(f"slot {state.slot}: rate {s_k} exceeds remaining demand {rem.sum()}")
    before = np.concatenate(([0.0], np.cumsum(rem)[:-1]))
    drained = np.clip(s_k - before, 0.0, rem)
    new = (rem - drained)[1:].copy()
    for deadline, amount in event.demand_by_deadline.items():
        if deadline > state.horizon:
            raise ValueError(f"deadline {deadline} beyond horizon {state.horizon}")
        new[deadline - event.slot] += amount
    return DemandState(event.slot, event.base_load, new, state.horizon)


@dataclass(frozen=True)
class Feasibility:
    ok: bool
    slot: Optional[int] = None
    reason: str = ""
    window: Optional[tuple] = None

    def __bool__(self):
        return self.ok


def _check_shape(scenario: Scenario, sched: AggregateSchedule):
    if sched.start_slot != 1 or len(sched) != scenario.T:
        raise ValueError("schedule must cover slots 1..T")


def check_aggregate_feasible(scenario: Scenario, sched: AggregateSchedule) -> Feasibility:
    """Cumulative due/arrived bounds on every prefix of the schedule.

    This prefix test is necessary for a per-vehicle allocation to exist but
    not sufficient; see :func:`check_realizable` for the exact test.
    """
    _check_shape(scenario, sched)
    cum = np.cumsum(sched.rates)
    due = scenario.due_by()
    arrived = scenario.arrived_by()
    for n in range(scenario.T):
        if cum[n] < due[n] - TOL:
            return Feasibility(False, n + 1, "below demand due")
        if cum[n] > arrived[n] + TOL:
            return Feasibility(False, n + 1, "above demand arrived")
    if abs(cum[-1] - due[-1]) > TOL:
        return Feasibility(False, scenario.T, "total differs from demand")
    return Feasibility(True)


def window_energy(demand: np.ndarray) -> np.ndarray:
    """``W[i, j]`` = energy of jobs whose whole window lies in ``[i, j]`` (0-based)."""
    return np.cumsum(np.cumsum(demand[::-1], axis=0)[::-1], axis=1)


def check_realizable(scenario: Scenario, sched: AggregateSchedule) -> Feasibility:
    """Exact test that some per-vehicle allocation produces ``sched``.

    Every interval of slots must carry at least the energy of the jobs whose
    window lies inside it, and the total must match. By Hall's condition on
    interval windows this is equivalent to the existence of an allocation.
    """
    _check_shape(scenario, sched)
    T = scenario.T
    s = sched.rates
    cs = np.concatenate(([0.0], np.cumsum(s)))
    served = cs[None, 1:] - cs[:T, None]
    need = window_energy(scenario.demand_matrix)
    gap = np.triu(need - served)
    if abs(cs[-1] - scenario.total_demand) > TOL:
        return Feasibility(False, T, "total differs from demand")
    if gap.max() > TOL:
        i, j = np.unravel_index(int(np.argmax(gap)), gap.shape)
        return Feasibility(False, int(j) + 1, "window under-served", (int(i) + 1, int(j) + 1))
    return Feasibility(True)


def evaluate_cost(sched, base, f: CostFunction = QUADRATIC) -> float:
    rates = sched.rates if isinstance(sched, AggregateSchedule) else np.asarray(sched, dtype=float)
    base = np.asarray(base, dtype=float)
    if rates.shape != base.shape:
        raise ValueError(f"length mismatch: {rates.shape[0]} rates vs {base.shape[0]} base loads")
    return float(np.sum(f(rates + base)))


def scenario_from_vehicles(vehicles: Iterable[Vehicle], base_loads: Sequence[float],
                           grid: Optional[TimeGrid] = None, slot_minutes: int = 10) -> Scenario:
    """Aggregate vehicles into per-slot arrival events.

    Departures past the horizon are truncated to ``T``; arrivals outside
    ``[1, T]`` are rejected.
    """
    base_loads = list(base_loads)
    if grid is None:
        grid = TimeGrid(len(base_loads), slot_minutes)
    T = grid.horizon_slots
    if len(base_loads) != T:
        raise ValueError(f"need {T} base loads, got {len(base_loads)}")
    buckets = [dict() for _ in range(T)]
    kept = []
    for v in vehicles:
        if v.arrive_slot < 1 or v.arrive_slot > T:
            raise ValueError(f"vehicle {v.id!r} arrives outside the horizon [1, {T}]")
        if v.depart_slot > T:
            v = Vehicle(v.id, v.arrive_slot, T, v.demand)
        kept.append(v)
        b = buckets[v.arrive_slot - 1]
        b[v.depart_slot] = b.get(v.depart_slot, 0.0) + v.demand
    events = tuple(ArrivalEvent(t + 1, base_loads[t], buckets[t]) for t in range(T))
    return Scenario(grid, events, tuple(kept))


def scenario_from_matrix(demand: np.ndarray, base_loads: Sequence[float], slot_minutes: int = 10) -> Scenario:
    """Scenario from a ``(T, T)`` arrival-by-deadline energy matrix (0-based)."""
    demand = np.asarray(demand, dtype=float)
    T = demand.shape[0]
    events = []
    for a in range(T):
        row = {d + 1: float(demand[a, d]) for d in range(a, T) if demand[a, d] > 0}
        events.append(ArrivalEvent(a + 1, float(base_loads[a]), row))
    return Scenario(TimeGrid(T, slot_minutes), tuple(events))
