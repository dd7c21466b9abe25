"""Max-density peeling and the exact offline solver built on it.

Work is described by a base load per slot plus an upper-triangular matrix of
energy released at one slot and due by another. The density of a window is
the base load inside it plus every job whose (release, deadline) pair lies
inside it, divided by its length. Repeatedly fixing the densest window at its
density and contracting it out yields the unique flattest feasible load.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import TOL, QUADRATIC, AggregateSchedule, CostFunction, DemandState, ExpectedProfile, Scenario

log = logging.getLogger(__name__)

DENSITY_RTOL = 1e-12


@dataclass(frozen=True)
class DensityWindow:
    """A window of live slots, reported by original slot labels and working positions."""

    start: int
    end: int
    density: float
    first: int = 0
    last: int = 0

    @property
    def length(self) -> int:
        return self.last - self.first + 1


@dataclass(frozen=True)
class WorkProfile:
    """Live slots of a flattening problem.

    ``demand[a, d]`` is the energy released at working position ``a`` and due
    by position ``d``; ``slots`` maps positions to original slots.
    """

    base: np.ndarray
    demand: np.ndarray
    slots: np.ndarray

    def __post_init__(self):
        base = np.array(self.base, dtype=float)
        demand = np.array(self.demand, dtype=float)
        slots = np.array(self.slots, dtype=int)
        n = base.shape[0]
        if demand.shape != (n, n) or slots.shape != (n,):
            raise ValueError("inconsistent work profile shapes")
        if n and np.any(np.diff(slots) <= 0):
            raise ValueError("slot map must be strictly increasing")
        if np.any(base < 0) or np.any(demand < -TOL):
            raise ValueError("work profile entries must be nonnegative")
        if np.any(np.tril(demand, -1) != 0):
            raise ValueError("demand due before it is released")
        for arr in (base, demand, slots):
            arr.setflags(write=False)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "demand", demand)
        object.__setattr__(self, "slots", slots)

    def __len__(self):
        return self.base.shape[0]

    @classmethod
    def from_scenario(cls, scenario: Scenario) -> "WorkProfile":
        return cls(scenario.base_loads, scenario.demand_matrix, np.arange(1, scenario.T + 1))

    @classmethod
    def from_state(cls, state: DemandState, profile: ExpectedProfile) -> "WorkProfile":
        """Realized demand at the current slot, expected arrivals afterwards."""
        k, T = state.slot, state.horizon
        if profile.T != T:
            raise ValueError(f"profile horizon {profile.T} does not match state horizon {T}")
        n = T - k + 1
        demand = np.zeros((n, n))
        demand[0] = state.remaining
        demand[1:] = profile.demand[k:, k - 1:]
        base = np.concatenate(([state.base_load], profile.base[k:]))
        return cls(base, demand, np.arange(k, T + 1))

    def delete(self, first: int, last: int) -> "WorkProfile":
        demand, base = contract(self.demand.copy(), self.base, first, last)
        keep = np.r_[0:first, last + 1:len(self)]
        return WorkProfile(base, demand, self.slots[keep])


def density_matrix(base: np.ndarray, demand: np.ndarray) -> np.ndarray:
    """Density of every window ``[i, j]``; ``-inf`` below the diagonal."""
    n = base.shape[0]
    inside = np.cumsum(np.cumsum(demand[::-1], axis=0)[::-1], axis=1)
    cb = np.concatenate(([0.0], np.cumsum(base)))
    energy = inside + (cb[None, 1:] - cb[:n, None])
    length = np.arange(n)[None, :] - np.arange(n)[:, None] + 1
    with np.errstate(divide="ignore", invalid="ignore"):
        dens = energy / length
    dens[length <= 0] = -np.inf
    return dens


def densest(dens: np.ndarray):
    """Argmax with relative tolerance; ties go to the smallest start, then end."""
    top = dens.max()
    hit = dens >= top - DENSITY_RTOL * abs(top)
    flat = int(np.argmax(hit.ravel()))
    n = dens.shape[1]
    return flat // n, flat % n, float(dens[flat // n, flat % n])


def contract(demand: np.ndarray, base: np.ndarray, first: int, last: int):
    """Remove positions ``first..last`` after moving spanning jobs to live neighbours.

    Jobs released inside the window but due later now start at the next live
    slot; jobs due inside the window but released earlier now end at the live
    slot before it. Jobs wholly inside are covered by the window's level.
    ``demand`` is modified in place before slicing.
    """
    n = base.shape[0]
    if last + 1 < n:
        demand[last + 1, last + 1:] += demand[first:last + 1, last + 1:].sum(axis=0)
    if first > 0:
        demand[:first, first - 1] += demand[:first, first:last + 1].sum(axis=1)
    keep = np.r_[0:first, last + 1:n]
    return demand[np.ix_(keep, keep)], base[keep]


def max_density_interval(profile: WorkProfile) -> DensityWindow:
    if len(profile) == 0:
        raise ValueError("empty work profile")
    i, j, rho = densest(density_matrix(profile.base, profile.demand))
    return DensityWindow(int(profile.slots[i]), int(profile.slots[j]), rho, i, j)


def peel(base: np.ndarray, demand: np.ndarray, stop_at_first: bool = False):
    """Run the peeling loop on raw arrays.

    Returns ``(levels, windows)`` where ``levels[p]`` is the total-load level
    of original position ``p`` (NaN if never reached) and ``windows`` lists
    ``(first, last, density)`` in original positions. With
    ``stop_at_first`` the loop ends once position 0 has been levelled.
    """
    demand = np.array(demand, dtype=float)
    base = np.array(base, dtype=float)
    alive = np.arange(base.shape[0])
    levels = np.full(base.shape[0], np.nan)
    windows = []
    while alive.shape[0]:
        i, j, rho = densest(density_matrix(base, demand))
        levels[alive[i:j + 1]] = rho
        windows.append((int(alive[i]), int(alive[j]), rho))
        if stop_at_first and i == 0:
            break
        demand, base = contract(demand, base, i, j)
        alive = np.r_[alive[:i], alive[j + 1:]]
    return levels, windows


def rates_from_levels(levels: np.ndarray, base: np.ndarray):
    """``s = y - base`` clamped at zero; returns the rates and the count of real clamps."""
    raw = levels - base
    clamped = int(np.sum(raw < -TOL))
    if clamped:
        log.warning("flattening level below base load in %d slot(s); clamped to zero", clamped)
    return np.maximum(raw, 0.0), clamped


@dataclass(frozen=True)
class FlattenResult:
    levels: np.ndarray
    rates: np.ndarray
    slots: np.ndarray
    windows: tuple = field(default=())
    clamped: int = 0

    @property
    def schedule(self) -> AggregateSchedule:
        return AggregateSchedule(self.rates, int(self.slots[0]) if len(self.slots) else 1)


def flatten_window(profile: WorkProfile) -> FlattenResult:
    """Peel the whole profile; returns per-slot load targets and charging rates."""
    if len(profile) == 0:
        raise ValueError("empty work profile")
    levels, wins = peel(profile.base, profile.demand)
    rates, clamped = rates_from_levels(levels, profile.base)
    windows = tuple(DensityWindow(int(profile.slots[a]), int(profile.slots[b]), rho, a, b)
                    for a, b, rho in wins)
    return FlattenResult(levels, rates, profile.slots, windows, clamped)


@dataclass(frozen=True)
class OfflineSolution:
    schedule: AggregateSchedule
    cost: float
    levels: np.ndarray
    windows: tuple = ()
    clamped: int = 0


def solve_offline(scenario: Scenario, cost: Optional[CostFunction] = None) -> OfflineSolution:
    """Cheapest per-vehicle-realizable schedule when every arrival is known in advance.

    The result is the same for every strictly convex increasing cost.
    """
    cost = cost or QUADRATIC
    res = flatten_window(WorkProfile.from_scenario(scenario))
    total = float(np.sum(cost(res.rates + scenario.base_loads)))
    return OfflineSolution(res.schedule, total, res.levels, res.windows, res.clamped)
