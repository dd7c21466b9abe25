"""Expected Load Flattening: re-solve the mean-forecast problem every slot.

:func:`elf_step` is the literal controller: build the work profile from the
realized state and the forecast, then peel until the current slot is levelled.

:class:`ElfPlanner` gives the same answer faster for repeated use with one
forecast. The future slots ``k+1..T`` carry forecast demand only, so their
peel order does not depend on the realized state and can be cached per ``k``.
At run time only the windows starting at ``k`` need evaluating, against each
prefix of that cached order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .flatten import DENSITY_RTOL, WorkProfile, peel
from .model import (TOL, QUADRATIC, AggregateSchedule, CostFunction, DemandState, ExpectedProfile,
                    Scenario, initial_state, state_transition)

log = logging.getLogger(__name__)


def elf_step(state: DemandState, profile: ExpectedProfile) -> float:
    """Charging energy for the current slot under the mean forecast."""
    if profile.T != state.horizon:
        raise ValueError(f"profile horizon {profile.T} does not match state horizon {state.horizon}")
    work = WorkProfile.from_state(state, profile)
    levels, _ = peel(work.base, work.demand, stop_at_first=True)
    return _commit(levels[0] - state.base_load, state)


def _clip(s: float, rem: np.ndarray):
    """Clip into ``[due now, total remaining]``; flags corrections larger than float noise."""
    lo, hi = float(rem[0]), float(rem.sum())
    out = min(max(s, lo), hi)
    if abs(out - s) > TOL:
        log.warning("ELF rate %.12g clipped to %.12g", s, out)
        return out, 1
    return out, 0


def _commit(s: float, state: DemandState) -> float:
    return _clip(s, state.remaining)[0]


@dataclass
class _FutureOrder:
    # columns c = 0..T-k stand for windows [k, k+c] before contraction
    levels: np.ndarray  # level of peel m+1 at index m
    live: np.ndarray  # live[m, c]: slot k+1+c still present after m peels (last column always)
    energy: np.ndarray  # energy[m, c]: forecast energy in (k, k+c] not yet consumed
    length: np.ndarray  # length[m, c]: live slots in [k, k+c]


class ElfPlanner:
    """Cached ELF controller for one forecast profile."""

    def __init__(self, profile: ExpectedProfile):
        self.profile = profile
        self.T = profile.T
        self._orders = {}

    def _order(self, k: int) -> _FutureOrder:
        got = self._orders.get(k)
        if got is not None:
            return got
        T, prof = self.T, self.profile
        n = T - k
        cols = n + 1
        fut_base = prof.base[k:]
        fut_dem = prof.demand[k:, k:]
        wins = peel(fut_base, fut_dem)[1] if n else []
        rank = np.empty(n, dtype=int)
        lev = np.array([w[2] for w in wins])
        # a contracted window may straddle earlier peels; only its live slots get its rank
        alive = np.arange(n)
        for m, (a, b, _) in enumerate(wins, start=1):
            ia = int(np.searchsorted(alive, a))
            ib = int(np.searchsorted(alive, b))
            rank[alive[ia:ib + 1]] = m
            alive = np.r_[alive[:ia], alive[ib + 1:]]
        P = len(wins)
        # forecast energy of jobs inside (k, k+c] plus base, c = 0..n
        inside = np.zeros(cols)
        if n:
            col_tot = np.cumsum(np.triu(fut_dem).sum(axis=0))
            inside[1:] = col_tot + np.cumsum(fut_base)
        gone = (rank[None, :] <= np.arange(P + 1)[:, None]) if n else np.zeros((P + 1, 0), bool)
        eaten = gone * (lev[rank - 1][None, :] if n else 0.0)
        energy = inside[None, :] - np.concatenate((np.zeros((P + 1, 1)), np.cumsum(eaten, axis=1)), axis=1)
        length = (np.arange(cols) + 1)[None, :] - np.concatenate(
            (np.zeros((P + 1, 1), int), np.cumsum(gone, axis=1)), axis=1)
        live = np.ones((P + 1, cols), bool)
        live[:, :n] = ~gone
        got = _FutureOrder(lev, live, energy, length)
        self._orders[k] = got
        return got

    def level(self, k: int, base_load: float, remaining: np.ndarray) -> float:
        """Flattened total-load level of slot ``k`` given the realized state there."""
        order = self._order(k)
        num = order.energy + (base_load + np.cumsum(remaining))[None, :]
        dens = np.where(order.live, num / order.length, -np.inf)
        best = dens.max(axis=1)
        nxt = order.levels
        P = nxt.shape[0]
        ok = best[:P] >= nxt - DENSITY_RTOL * np.maximum(np.abs(best[:P]), np.abs(nxt))
        m = int(np.argmax(ok)) if ok.any() else P
        return float(best[m])

    def step(self, state: DemandState) -> float:
        if state.horizon != self.T:
            raise ValueError("state horizon does not match the planner profile")
        return _commit(self.level(state.slot, state.base_load, state.remaining) - state.base_load, state)


@dataclass(frozen=True)
class ElfRun:
    schedule: AggregateSchedule
    cost: float
    clamped: int = 0


def run_elf(scenario: Scenario, profile: ExpectedProfile, cost: Optional[CostFunction] = None,
            planner: Optional[ElfPlanner] = None, fast: bool = True) -> ElfRun:
    """Closed-loop ELF over the realized scenario."""
    cost = cost or QUADRATIC
    if profile.T != scenario.T:
        raise ValueError("scenario and profile must share the horizon")
    T = scenario.T
    rates = np.zeros(T)
    clipped = 0
    if fast:
        planner = planner or ElfPlanner(profile)
        A = scenario.demand_matrix
        base = scenario.base_loads
        rem = A[0].copy()
        for k in range(1, T + 1):
            live = rem[k - 1:]
            s, c = _clip(planner.level(k, base[k - 1], live) - base[k - 1], live)
            clipped += c
            rates[k - 1] = s
            if k < T:
                rem[k - 1:] = live - np.clip(s - np.concatenate(([0.0], np.cumsum(live)[:-1])), 0.0, live)
                rem[k - 1] = 0.0
                rem[k:] += A[k, k:]
    else:
        state = initial_state(scenario)
        for k in range(1, T + 1):
            s = elf_step(state, profile)
            rates[k - 1] = s
            if k < T:
                state = state_transition(state, s, scenario.events[k])
    total = float(np.sum(cost(rates + scenario.base_loads)))
    return ElfRun(AggregateSchedule(rates), total, clipped)
