"""Fast ELF steps for periodic and stationary forecasts.

Both forecast types are anchored to absolute slots and unroll onto a finite
horizon by dropping arrivals whose deadline would fall after ``T``.

The stationary step is a closed form. The periodic step runs the same
peeling as :func:`evflat.elf.elf_step` but on a constant-size set of
candidate windows, using two facts about a periodic forecast:

* shifting a window by whole periods does not change its density while the
  shifted copy stays inside the regular part of the horizon;
* extending a long window by one period adds a fixed energy and a fixed
  length, so along each residue class the density is monotone and only the
  two ends of the class need checking.

When a future window wins, all of its periodic copies have the same density
and are removed together, so the number of rounds does not grow with ``T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .flatten import DENSITY_RTOL, density_matrix, densest
from .model import DemandState, ExpectedProfile


@dataclass(frozen=True)
class StationaryProfile:
    """Time-invariant forecast: mean base load and mean demand by parking span.

    ``demand[j - 1]`` is the mean energy arriving in a slot and due ``j - 1``
    slots later (a stay of ``j`` slots), ``j = 1..max_parking``.
    """

    base: float
    demand: np.ndarray

    def __post_init__(self):
        mu = np.array(self.demand, dtype=float).ravel()
        if self.base < 0 or np.any(mu < 0):
            raise ValueError("stationary profile entries must be nonnegative")
        mu.setflags(write=False)
        object.__setattr__(self, "demand", mu)

    @property
    def max_parking(self) -> int:
        nz = np.flatnonzero(self.demand)
        return int(nz[-1]) + 1 if nz.size else 0

    def unroll(self, T: int) -> ExpectedProfile:
        return PeriodicProfile(np.array([self.base]), self.demand[None, :]).unroll(T)


@dataclass(frozen=True)
class PeriodicProfile:
    """Forecast repeating every ``period`` slots.

    ``base[o]`` and ``demand[o, j - 1]`` describe slots at offset ``o`` from
    ``anchor`` (mod the period), with ``j`` the parking span as in
    :class:`StationaryProfile`.
    """

    base: np.ndarray
    demand: np.ndarray
    anchor: int = 1

    def __post_init__(self):
        base = np.array(self.base, dtype=float).ravel()
        mu = np.array(self.demand, dtype=float)
        if mu.ndim == 1:
            mu = mu[None, :]
        if mu.shape[0] != base.shape[0] or base.shape[0] < 1:
            raise ValueError("need one demand row per offset and at least one offset")
        if np.any(base < 0) or np.any(mu < 0):
            raise ValueError("periodic profile entries must be nonnegative")
        base.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "demand", mu)

    @property
    def period(self) -> int:
        return self.base.shape[0]

    def offset(self, t: int) -> int:
        return (t - self.anchor) % self.period

    def max_parking_at(self, offset: int) -> int:
        nz = np.flatnonzero(self.demand[offset])
        return int(nz[-1]) + 1 if nz.size else 0

    @property
    def max_parking(self) -> int:
        return max(self.max_parking_at(o) for o in range(self.period))

    def repetitions(self, j_bar: int, T: int) -> int:
        """Whole-period shifts of a window ending at ``j_bar`` that fit before ``T``."""
        return (T - j_bar) // self.period + 1

    @classmethod
    def from_stationary(cls, prof: StationaryProfile) -> "PeriodicProfile":
        return cls(np.array([prof.base]), prof.demand[None, :])

    def unroll(self, T: int) -> ExpectedProfile:
        base = np.array([self.base[self.offset(t)] for t in range(1, T + 1)])
        demand = np.zeros((T, T))
        width = self.demand.shape[1]
        for t in range(1, T + 1):
            row = self.demand[self.offset(t)]
            n = min(width, T - t + 1)
            demand[t - 1, t - 1:t - 1 + n] = row[:n]
        return ExpectedProfile(base, demand)


def _check_state(state: DemandState, T: Optional[int], k: Optional[int]):
    if k is not None and k != state.slot:
        raise ValueError(f"k={k} does not match state slot {state.slot}")
    if T is not None and T != state.horizon:
        raise ValueError(f"T={T} does not match state horizon {state.horizon}")


def stationary_step(state: DemandState, profile: StationaryProfile, k: Optional[int] = None,
                    T: Optional[int] = None) -> float:
    """Closed-form ELF rate for a stationary forecast.

    ``X`` is the best window ``[k, n]`` with ``n`` up to the forecast reach (or
    the last realized deadline), ``Y`` the window ``[k, T]`` and ``Z`` the whole
    future ``[k+1, T]``. If ``Z`` is strictly largest the future is levelled
    first and the current slot must clear everything already arrived.
    """
    _check_state(state, T, k)
    k, T = state.slot, state.horizon
    l_k, nu = state.base_load, profile.base
    mu = profile.demand
    e_bar = profile.max_parking
    rem = state.remaining
    cum = np.cumsum(rem)
    total = float(cum[-1])
    spans = np.arange(1, mu.shape[0] + 1)

    def future_jobs(n):
        # expected demand released in (k, n] and due by n
        return float(np.sum(np.clip(n - k - spans + 1, 0, None) * mu))

    last_due = int(np.flatnonzero(rem)[-1]) + k if total > 0 else k
    reach = min(T, k + max(e_bar, last_due - k))
    ns = np.arange(k, reach + 1)
    jobs = np.clip(ns[:, None] - k - spans[None, :] + 1, 0, None) @ mu
    x_vals = (cum[ns - k] + jobs + l_k - nu) / (ns - k + 1) + nu
    X = float(x_vals.max())
    Y = (total + future_jobs(T) + l_k - nu) / (T - k + 1) + nu
    if k == T:
        return float(min(max(X - l_k, rem[0]), total))
    Z = future_jobs(T) / (T - k) + nu
    best = max(X, Y)
    if best >= Z - DENSITY_RTOL * max(abs(best), abs(Z)):
        s = best - l_k
    else:
        s = total
    return float(min(max(s, rem[0]), total))


class OpCounter:
    """Counts window-density evaluations made by :func:`periodic_step`."""

    def __init__(self):
        self.count = 0
        self.rounds = 0

    def reset(self):
        self.count = 0
        self.rounds = 0


@dataclass
class _Block:
    # copies [first + m*step, last + m*step] for m in lo..hi; each removed
    # `size` live slots and consumed `energy`
    first: int
    last: int
    lo: int
    hi: int
    size: int
    energy: float


class _PeriodicSystem:
    """Peeling state of one periodic step, in original slot coordinates."""

    def __init__(self, state: DemandState, profile: PeriodicProfile, counter: Optional[OpCounter]):
        self.k = state.slot
        self.T = state.horizon
        self.l_k = state.base_load
        self.R = np.cumsum(state.remaining)
        nz = np.flatnonzero(state.remaining)
        self.last_due = int(nz[-1]) + self.k if nz.size else self.k
        self.prof = profile
        self.p = profile.period
        self.e = max(profile.max_parking, 1)
        self.counter = counter
        self.blocks = []
        p, e = self.p, self.e
        mu = np.zeros((p, e))
        w = min(e, profile.demand.shape[1])
        mu[:, :w] = profile.demand[:, :w]
        partial = profile.base[:, None] + np.cumsum(mu, axis=1)  # partial[o, s-1]
        self.full = partial[:, -1]
        self.cycle = float(self.full.sum())
        self.prefix = np.concatenate(([0.0], np.cumsum(self.full)))
        # tail[o, n]: energy of the last n slots of a window ending at offset o,
        # counting only jobs due inside it (n <= e)
        tail = np.zeros((p, e + 1))
        for o in range(p):
            acc = 0.0
            for u in range(e):
                acc += partial[(o - u) % p, u]
                tail[o, u + 1] = acc
        self.tail = tail

    # forecast energy ------------------------------------------------------
    def _full_upto(self, u: int) -> float:
        q, r = divmod(u, self.p)
        return q * self.cycle + self.prefix[r]

    def raw_energy(self, x: int, y: int) -> float:
        """Forecast energy released in ``[x, y]`` and due by ``y`` (future slots only)."""
        if y < x:
            return 0.0
        n = y - x + 1
        oy = self.prof.offset(y)
        if n <= self.e:
            return float(self.tail[oy, n])
        a0 = self.prof.anchor
        head = self._full_upto(y - self.e - a0 + 1) - self._full_upto(x - a0)
        return float(head + self.tail[oy, self.e])

    # deletions ------------------------------------------------------------
    def _cover_end(self, t: int):
        end = None
        p = self.p
        for b in self.blocks:
            lo = max(b.lo, -((b.last - t) // p))
            hi = min(b.hi, (t - b.first) // p)
            if lo <= hi:
                e = b.last + hi * p
                end = e if end is None or e > end else end
        return end

    def _cover_start(self, t: int):
        start = None
        p = self.p
        for b in self.blocks:
            lo = max(b.lo, -((b.last - t) // p))
            hi = min(b.hi, (t - b.first) // p)
            if lo <= hi:
                s = b.first + lo * p
                start = s if start is None or s < start else start
        return start

    def next_live(self, t: int) -> int:
        while t <= self.T:
            end = self._cover_end(t)
            if end is None:
                return t
            t = end + 1
        return self.T + 1

    def prev_live(self, t: int) -> int:
        while t > self.k:
            start = self._cover_start(t)
            if start is None:
                return t
            t = start - 1
        return self.k

    def live_in(self, x: int, y: int) -> list:
        out = []
        t = self.next_live(max(x, self.k + 1))
        while t <= min(y, self.T):
            out.append(t)
            t = self.next_live(t + 1)
        return out

    def removed(self, x: int, y: int):
        """Deleted slot count and consumed energy of blocks inside ``[x, y]``."""
        count, energy = 0, 0.0
        p = self.p
        for b in self.blocks:
            lo = max(b.lo, -((b.first - x) // p))
            hi = min(b.hi, (y - b.last) // p)
            if lo <= hi:
                n = hi - lo + 1
                count += n * b.size
                energy += n * b.energy
        return count, energy

    # densities ------------------------------------------------------------
    def span(self, a: int, b: int):
        """Original range covered by the live window ``[a, b]`` once deleted runs are absorbed."""
        x = self.k if a == self.k else self.prev_live(a - 1) + 1
        y = self.next_live(b + 1) - 1
        return x, y

    def density(self, a: int, b: int):
        if self.counter is not None:
            self.counter.count += 1
        x, y = self.span(a, b)
        lo = max(x, self.k + 1)
        gone, eaten = self.removed(lo, y) if y >= lo else (0, 0.0)
        energy = self.raw_energy(lo, y) - eaten
        if a == self.k:
            energy += self.l_k + self.R[y - self.k]
        return energy / ((y - x + 1) - gone), x, y

    def live_count(self, a: int, b: int) -> int:
        x, y = self.span(a, b)
        return (y - x + 1) - self.removed(x, y)[0]

    # candidate windows ----------------------------------------------------
    def candidates(self, region):
        k, p, e, T = self.k, self.p, self.e, self.T
        pairs = set()
        if region is not None and region[1] - region[0] + 1 < 8 * p:
            region = None
        if region is None:
            live = self.live_in(k + 1, T)
            for i, a in enumerate(live):
                for b in live[i:]:
                    pairs.add((a, b))
            for b in [k] + live:
                pairs.add((k, b))
            return pairs, None
        g_lo, g_hi = region
        c_lo, c_hi = g_lo + 2 * p, g_hi - 2 * p
        front = self.live_in(k + 1, c_lo - 1)
        back = self.live_in(c_hi + 1, T)
        first = self.live_in(c_lo, c_lo + p - 1)
        last = self.live_in(c_hi - p + 1, c_hi)
        edges = front + back
        near_front = self.live_in(c_lo, min(c_hi, max(c_lo, self.last_due) + e + 3 * p))
        for a in [k] + front:
            for b in edges + near_front + last:
                if b >= a:
                    pairs.add((a, b))
            if a == k:
                pairs.add((k, k))
        for b in back:
            for a in first + self.live_in(max(c_lo, b - e - 2 * p), c_hi) + back:
                if a <= b:
                    pairs.add((a, b))
        for a in first:
            for b in self.live_in(a, min(c_hi, a + e + 2 * p)) + last:
                if b >= a:
                    pairs.add((a, b))
        return pairs, (c_lo, c_hi)

    # main loop ------------------------------------------------------------
    def solve(self) -> float:
        k, p = self.k, self.p
        region = (k + 1, self.T) if self.T > k else None
        while True:
            if self.counter is not None:
                self.counter.rounds += 1
            pairs, core = self.candidates(region)
            if core is None:
                region = None
            best_k = -np.inf
            future = []
            for a, b in sorted(pairs):
                rho, x, y = self.density(a, b)
                if a == k:
                    best_k = max(best_k, rho)
                else:
                    future.append((rho, a, b, x, y))
            if not future:
                return best_k
            best_f = max(f[0] for f in future)
            if best_k >= best_f - DENSITY_RTOL * max(abs(best_k), abs(best_f)):
                return best_k
            # ties within float noise: smallest window first, but a tied periodic
            # family goes before that so the round count does not depend on T
            tied = [f for f in future if f[0] >= best_f - DENSITY_RTOL * abs(best_f)]
            if core is not None:
                tied = [f for f in tied if core[0] <= f[1] and f[2] <= core[1]] or tied
            best_f, a, b, x, y = tied[0]
            size = self.live_count(a, b)
            regular = core is not None and core[0] <= a and b <= core[1]
            if regular:
                g_lo, g_hi = region
                lo = -((x - 1 - g_lo) // p)
                hi = (g_hi - (y + 1)) // p
                if b - a + 1 < p:
                    self.blocks.append(_Block(a, b, lo, hi, size, best_f * size))
                    region = (max(g_lo, b + (lo - 1) * p + 1), min(g_hi, a + (hi + 1) * p - 1))
                else:
                    # overlapping or touching copies merge into one window at the same level
                    ua, ub = a + lo * p, b + hi * p
                    usize = self.live_count(ua, ub)
                    self.blocks.append(_Block(ua, ub, 0, 0, usize, best_f * usize))
                    region = None
                continue
            self.blocks.append(_Block(a, b, 0, 0, size, best_f * size))
            if region is not None and not (y < region[0] or x > region[1]):
                touches_front = a < core[0]
                touches_back = b > core[1]
                if touches_front and touches_back:
                    region = None
                elif touches_front:
                    region = (y + 1, region[1])
                else:
                    region = (region[0], x - 1)


def periodic_step(state: DemandState, profile: PeriodicProfile, counter: Optional[OpCounter] = None) -> float:
    """ELF rate for a periodic forecast using constant-size candidate sets."""
    y = _PeriodicSystem(state, profile, counter).solve()
    rem = state.remaining
    return float(min(max(y - state.base_load, rem[0]), rem.sum()))


def periodic_candidates(profile: PeriodicProfile, k: int, T: int, last_due: Optional[int] = None) -> list:
    """Windows examined in the first peeling round of :func:`periodic_step`.

    Their densest member is the densest window of the whole horizon for any
    realized state whose deadlines end by ``last_due``.
    """
    sys = _PeriodicSystem(DemandState(k, 0.0, np.zeros(T - k + 1), T), profile, None)
    sys.last_due = k if last_due is None else last_due
    pairs, _ = sys.candidates((k + 1, T) if T > k else None)
    return sorted(pairs)


def first_period_candidates(profile: PeriodicProfile, k: int, T: int):
    """The reduced search set built from the densest window of the first forecast period.

    Returns ``(pairs, (i_bar, j_bar))``. This set can miss the true densest
    window; it is kept for comparison with :func:`periodic_candidates`.
    """
    e_hat = profile.max_parking
    hi = min(T, k + max(e_hat, 1))
    window = profile.unroll(T)
    base = window.base[k:hi]
    dem = window.demand[k:hi, k:hi]
    i0, j0, _ = densest(density_matrix(base, dem))
    i_bar, j_bar = k + 1 + i0, k + 1 + j0
    p = profile.period
    if j_bar >= i_bar + p:
        j_bar = j_bar + (profile.repetitions(j_bar, T) - 1) * p
        j_bar = min(j_bar, T)
    pairs = set()
    for i in range(k, i_bar + 1):
        for j in list(range(i, i_bar + 1)) + [j_bar]:
            if i <= j <= T:
                pairs.add((i, j))
    return sorted(pairs), (i_bar, j_bar)
