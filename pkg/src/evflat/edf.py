"""Earliest-deadline-first split of an aggregate schedule into per-vehicle rates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import TOL, AggregateSchedule, Scenario, Vehicle


class EdfInfeasibleError(ValueError):
    def __init__(self, slot: int, message: str):
        super().__init__(f"slot {slot}: {message}")
        self.slot = slot


@dataclass(frozen=True)
class VehicleAllocation:
    """Per-vehicle energy per slot; row ``r`` belongs to ``vehicle_ids[r]``."""

    vehicle_ids: tuple
    rates: np.ndarray
    start_slot: int = 1

    def __post_init__(self):
        rates = np.array(self.rates, dtype=float)
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    def rate(self, vehicle_id, slot: int) -> float:
        return float(self.rates[self.vehicle_ids.index(vehicle_id), slot - self.start_slot])

    def as_dict(self) -> dict:
        out = {}
        for r, vid in enumerate(self.vehicle_ids):
            for c in np.flatnonzero(self.rates[r]):
                out[(vid, self.start_slot + int(c))] = float(self.rates[r, c])
        return out

    def totals_per_slot(self) -> np.ndarray:
        return self.rates.sum(axis=0)

    def totals_per_vehicle(self) -> np.ndarray:
        return self.rates.sum(axis=1)


def _sort_key(v: Vehicle):
    # ids of mixed types still sort deterministically through their repr
    return (v.depart_slot, (0, v.id) if isinstance(v.id, (int, float)) else (1, repr(v.id)))


def edf_allocate(vehicles, sched: AggregateSchedule) -> VehicleAllocation:
    """Pour each slot's energy into present vehicles, earliest deadline first.

    ``vehicles`` may be a :class:`Scenario` carrying its vehicle list. Raises
    :class:`EdfInfeasibleError` at the first slot where energy is left over
    or a vehicle departs unfinished.
    """
    if isinstance(vehicles, Scenario):
        if vehicles.vehicles is None:
            raise ValueError("scenario carries no vehicle list")
        vehicles = vehicles.vehicles
    vehicles = list(vehicles)
    ids = tuple(v.id for v in vehicles)
    if len(set(ids)) != len(ids):
        raise ValueError("vehicle ids must be unique")
    s = sched.rates
    start = sched.start_slot
    end = start + len(s) - 1
    for v in vehicles:
        if v.arrive_slot < start or v.depart_slot > end:
            raise ValueError(f"vehicle {v.id!r} outside schedule slots [{start}, {end}]")
    order = sorted(range(len(vehicles)), key=lambda r: _sort_key(vehicles[r]))
    left = np.array([v.demand for v in vehicles], dtype=float)
    x = np.zeros((len(vehicles), len(s)))
    for c, t in enumerate(range(start, end + 1)):
        cap = float(s[c])
        for r in order:
            v = vehicles[r]
            if cap <= 0:
                break
            if v.arrive_slot <= t <= v.depart_slot and left[r] > 0:
                give = min(left[r], cap)
                x[r, c] = give
                left[r] -= give
                cap -= give
        if cap > TOL:
            raise EdfInfeasibleError(t, f"{cap:.9g} kWh scheduled but no present vehicle needs it")
        for r, v in enumerate(vehicles):
            if v.depart_slot == t and left[r] > TOL:
                raise EdfInfeasibleError(t, f"vehicle {v.id!r} departs with {left[r]:.9g} kWh unmet")
    return VehicleAllocation(ids, x, start)
