"""Ground truth on small finite arrival models.

A :class:`DiscreteArrivalModel` gives every slot a short list of weighted
outcomes, independent across slots, so the scenario tree can be enumerated.
On such models this module computes:

* the optimal online cost on an integer rate grid by backward induction
  (:func:`dp_optimal_policy`), and over continuous rates by solving the
  tree-structured quadratic program directly (:func:`optimal_online_value`);
* the expected offline, ELF and AVG costs (:func:`expected_costs`);
* the lower and upper bounds on the value of the stochastic solution.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import quadprog

from .elf import ElfPlanner, run_elf
from .flatten import solve_offline
from .harness import run_avg
from .model import (QUADRATIC, TOL, ArrivalEvent, CostFunction, DemandState, ExpectedProfile, Scenario,
                    TimeGrid, state_transition)

MAX_SUPPORT = 4


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class DiscreteArrivalModel:
    """Independent per-slot outcome lists ``outcomes[t-1] = ((prob, ArrivalEvent), ...)``."""

    grid: TimeGrid
    outcomes: tuple

    def __post_init__(self):
        T = self.grid.T
        outs = tuple(tuple((float(p), ev) for p, ev in slot if p > 0) for slot in self.outcomes)
        if len(outs) != T:
            raise ValueError(f"need outcomes for {T} slots, got {len(outs)}")
        for t, slot in enumerate(outs, start=1):
            if not slot:
                raise ValueError(f"slot {t}: no outcome with positive probability")
            if len(slot) > MAX_SUPPORT:
                raise ValueError(f"slot {t}: support {len(slot)} exceeds {MAX_SUPPORT}")
            if abs(sum(p for p, _ in slot) - 1.0) > 1e-9:
                raise ValueError(f"slot {t}: probabilities sum to {sum(p for p, _ in slot)}")
            for _, ev in slot:
                if ev.slot != t or ev.last_deadline > T:
                    raise ValueError(f"slot {t}: outcome event for slot {ev.slot} or deadline past {T}")
        object.__setattr__(self, "outcomes", outs)

    @property
    def T(self) -> int:
        return self.grid.T

    @classmethod
    def build(cls, slots: Sequence, slot_minutes: int = 10) -> "DiscreteArrivalModel":
        """From ``slots[t-1] = [(prob, base_load, {deadline: kWh}), ...]``."""
        outs = tuple(tuple((p, ArrivalEvent(t, base, dem)) for p, base, dem in slot)
                     for t, slot in enumerate(slots, start=1))
        return cls(TimeGrid(len(outs), slot_minutes), outs)

    @classmethod
    def deterministic(cls, scenario: Scenario) -> "DiscreteArrivalModel":
        return cls(scenario.grid, tuple(((1.0, ev),) for ev in scenario.events))

    @property
    def n_scenarios(self) -> int:
        return math.prod(len(s) for s in self.outcomes)

    @property
    def is_deterministic(self) -> bool:
        return self.n_scenarios == 1

    def scenarios(self):
        """Yield ``(probability, Scenario)`` over the whole tree."""
        for combo in itertools.product(*self.outcomes):
            yield math.prod(p for p, _ in combo), Scenario(self.grid, tuple(ev for _, ev in combo))

    def sample(self, rng: np.random.Generator) -> Scenario:
        events = []
        for slot in self.outcomes:
            i = int(rng.choice(len(slot), p=[p for p, _ in slot]))
            events.append(slot[i][1])
        return Scenario(self.grid, tuple(events))

    def mean_profile(self) -> ExpectedProfile:
        T = self.T
        base = np.zeros(T)
        demand = np.zeros((T, T))
        for t, slot in enumerate(self.outcomes, start=1):
            for p, ev in slot:
                base[t - 1] += p * ev.base_load
                for d, x in ev.demand_by_deadline.items():
                    demand[t - 1, d - 1] += p * x
        return ExpectedProfile(base, demand)


# optimal online policy on a rate grid -------------------------------------

@dataclass(frozen=True)
class DpPolicy:
    """Optimal online value and actions found by backward induction."""

    value: float
    actions: dict
    n_states: int
    step: float

    def action(self, state: DemandState) -> float:
        key = _key(state)
        if key not in self.actions:
            raise KeyError(f"state at slot {state.slot} was not reached by the model")
        return self.actions[key]


def _key(state: DemandState):
    return state.slot, round(state.base_load, 9), tuple(np.round(state.remaining, 9))


def _grid_actions(state: DemandState, step: float):
    lo, hi = state.due_now, state.total
    if hi - lo <= TOL:
        return [hi]
    first = math.ceil(lo / step - 1e-9)
    last = math.floor(hi / step + 1e-9)
    pts = [lo] + [n * step for n in range(first, last + 1) if lo + TOL < n * step < hi - TOL] + [hi]
    return pts


def dp_optimal_policy(model: DiscreteArrivalModel, cost: Optional[CostFunction] = None,
                      budget: int = 10 ** 6, step: float = 1.0) -> DpPolicy:
    """Backward induction over reachable states with rates on a grid of ``step`` kWh.

    The rate at each slot is chosen from the grid points inside
    ``[due now, total remaining]`` plus both end points. Ties go to the
    smallest rate. Raises :class:`BudgetExceeded` past ``budget`` states.
    """
    cost = cost or QUADRATIC
    T = model.T
    memo, actions = {}, {}

    def value(state: DemandState) -> float:
        key = _key(state)
        got = memo.get(key)
        if got is not None:
            return got
        if len(memo) >= budget:
            raise BudgetExceeded(f"more than {budget} states; use a smaller instance or a coarser grid")
        best, arg = math.inf, None
        for s in _grid_actions(state, step):
            here = float(cost(s + state.base_load))
            if state.slot < T:
                here += sum(p * value(state_transition(state, s, ev)) for p, ev in model.outcomes[state.slot])
            if arg is None or here < best - 1e-12 * max(1.0, abs(best)):
                best, arg = here, s
        memo[key] = best
        actions[key] = arg
        return best

    total = 0.0
    for p, ev in model.outcomes[0]:
        total += p * value(DemandState.from_mapping(1, ev.base_load, ev.demand_by_deadline, T))
    return DpPolicy(total, actions, len(memo), step)


# optimal online value over continuous rates ---------------------------------

@dataclass
class _Node:
    depth: int  # slot of this node
    parent: int
    prob: float
    base: float
    path: list  # node index per slot 1..depth
    demand: np.ndarray  # realized arrivals up to this slot, release x deadline


def _tree(model: DiscreteArrivalModel, max_nodes: int):
    T = model.T
    nodes = []
    frontier = []
    for p, ev in model.outcomes[0]:
        dem = np.zeros((T, T))
        for d, x in ev.demand_by_deadline.items():
            dem[0, d - 1] += x
        nodes.append(_Node(1, -1, p, ev.base_load, [len(nodes)], dem))
        frontier.append(len(nodes) - 1)
    for t in range(2, T + 1):
        nxt = []
        for v in frontier:
            for p, ev in model.outcomes[t - 1]:
                dem = nodes[v].demand.copy()
                for d, x in ev.demand_by_deadline.items():
                    dem[t - 1, d - 1] += x
                idx = len(nodes)
                nodes.append(_Node(t, v, nodes[v].prob * p, ev.base_load, nodes[v].path + [idx], dem))
                nxt.append(idx)
                if len(nodes) > max_nodes:
                    raise BudgetExceeded(f"scenario tree exceeds {max_nodes} nodes")
        frontier = nxt
    return nodes, frontier


@dataclass(frozen=True)
class OnlineOptimum:
    value: float
    rates: np.ndarray  # one rate per tree node
    n_nodes: int


def optimal_online_value(model: DiscreteArrivalModel, max_nodes: int = 20000) -> OnlineOptimum:
    """Exact optimal online expected cost for the quadratic cost over continuous rates.

    One rate per tree node, so decisions only see the past. Along every
    root-to-leaf path the rates must serve each window at least the energy
    of the jobs whose window lies inside it, and must serve all demand in
    total; these are exactly the conditions for a per-vehicle split to exist.
    """
    nodes, leaves = _tree(model, max_nodes)
    n = len(nodes)
    prob = np.array([v.prob for v in nodes])
    base = np.array([v.base for v in nodes])
    rows, rhs = [], []
    eq_rows, eq_rhs = [], []
    for idx, v in enumerate(nodes):
        j = v.depth
        # windows [i, j] end at this node; jobs due by j have already arrived
        dem = v.demand[:j, :j]
        for i in range(1, j + 1):
            need = float(dem[i - 1:, i - 1:].sum())
            if i < j and need <= TOL:
                continue
            row = np.zeros(n)
            row[v.path[i - 1:j]] = 1.0
            rows.append(row)
            rhs.append(need)
    for leaf in leaves:
        row = np.zeros(n)
        row[nodes[leaf].path] = 1.0
        eq_rows.append(row)
        eq_rhs.append(float(nodes[leaf].demand.sum()))
    C = np.array(eq_rows + rows).T
    b = np.array(eq_rhs + rhs)
    G = np.diag(2.0 * prob)
    a = -2.0 * prob * base
    x = None
    for slack in (0.0, 1e-12, 1e-10):
        bb = b.copy()
        bb[len(eq_rows):] -= slack * (1.0 + np.abs(bb[len(eq_rows):]))
        try:
            x = quadprog.solve_qp(G, a, C, bb, len(eq_rows))[0]
            break
        except ValueError:
            continue
    if x is None:
        raise RuntimeError("tree program could not be solved")
    x = np.maximum(x, 0.0)
    return OnlineOptimum(float(np.sum(prob * (x + base) ** 2)), x, n)


# bounds ---------------------------------------------------------------------

def _obligation(first_remaining: np.ndarray, profile: ExpectedProfile) -> float:
    # realized first-slot demand, then means of every later arrival, plus all base loads
    return float(np.sum(first_remaining) + profile.demand[1:].sum() + profile.base.sum())


def vss_lower_bound(first_state: DemandState, profile: ExpectedProfile, cost: Optional[CostFunction] = None) -> float:
    """``T f(total expected obligation / T)``: the cost of a perfectly flat load."""
    cost = cost or QUADRATIC
    T = profile.T
    if first_state.slot != 1 or first_state.horizon != T:
        raise ValueError("lower bound needs the state at slot 1 on the profile's horizon")
    base = profile.base.copy()
    base[0] = first_state.base_load
    gamma = _obligation(first_state.remaining, ExpectedProfile(base, profile.demand))
    return float(T * cost(gamma / T))


def model_lower_bound(model: DiscreteArrivalModel, cost: Optional[CostFunction] = None) -> float:
    """Lower bound with the first slot's outcome replaced by its mean."""
    mean = model.mean_profile()
    T = model.T
    first = DemandState(1, float(mean.base[0]), mean.demand[0].copy(), T)
    return vss_lower_bound(first, mean, cost)


def scenario_upper_load(scenario: Scenario) -> np.ndarray:
    """Per slot, base load plus every arrived job still open: ``t`` in ``[release, deadline]``."""
    A = scenario.demand_matrix
    T = scenario.T
    t = np.arange(T)
    open_at = (t[None, None, :] >= t[:, None, None]) & (t[None, None, :] <= t[None, :, None])
    return scenario.base_loads + np.einsum("ad,adt->t", A, open_at)


def vss_upper_bound(model: DiscreteArrivalModel, cost: Optional[CostFunction] = None,
                    samples: Optional[int] = None, seed: int = 0) -> float:
    """Expected cost if every open job were charged in full at every slot.

    Exact over the tree unless ``samples`` is given.
    """
    cost = cost or QUADRATIC
    if samples is None:
        return float(sum(p * np.sum(cost(scenario_upper_load(sc))) for p, sc in model.scenarios()))
    rng = np.random.Generator(np.random.PCG64(seed))
    vals = [float(np.sum(cost(scenario_upper_load(model.sample(rng))))) for _ in range(samples)]
    return math.fsum(vals) / samples


# expected costs --------------------------------------------------------------

@dataclass(frozen=True)
class VssReport:
    phi1: float  # offline
    phi2: float  # optimal online
    phi3: float  # ELF
    phi4: float  # AVG
    lower_bound: float
    upper_bound: float
    phi2_grid: float = float("nan")  # optimal online on the integer rate grid
    stderr: Optional[dict] = None  # Monte-Carlo standard errors, None when exact
    exact: bool = True

    @property
    def vss(self) -> float:
        return self.phi3 - self.phi2

    @property
    def vss_bound(self) -> float:
        return self.upper_bound - self.lower_bound

    def as_rows(self):
        return [("phi1", self.phi1), ("phi2", self.phi2), ("phi2_grid", self.phi2_grid), ("phi3", self.phi3),
                ("phi4", self.phi4), ("vss", self.vss), ("lower_bound", self.lower_bound),
                ("upper_bound", self.upper_bound), ("vss_bound", self.vss_bound)]


def expected_costs(model: DiscreteArrivalModel, cost: Optional[CostFunction] = None,
                   n_samples: Optional[int] = None, seed: int = 0, max_scenarios: int = 20000,
                   grid_dp: bool = True, budget: int = 10 ** 6) -> VssReport:
    """Offline, optimal online, ELF and AVG expected costs with the bounds.

    Enumerates the tree when it has at most ``max_scenarios`` leaves and
    ``n_samples`` is not given; otherwise samples with a fixed seed. The
    continuous optimal online value needs the quadratic cost and the full
    tree; otherwise the grid value stands in for it.
    """
    cost = cost or QUADRATIC
    planner = ElfPlanner(model.mean_profile())
    exact = n_samples is None and model.n_scenarios <= max_scenarios

    def per(sc):
        return (solve_offline(sc, cost).cost, run_elf(sc, planner.profile, cost, planner=planner).cost,
                run_avg(sc, cost).cost)

    if exact:
        acc = np.zeros(3)
        for p, sc in model.scenarios():
            acc += p * np.array(per(sc))
        stderr = None
    else:
        rng = np.random.Generator(np.random.PCG64(seed))
        n = n_samples or 1000
        vals = np.array([per(model.sample(rng)) for _ in range(n)])
        acc = np.array([math.fsum(c) / n for c in vals.T])
        sd = vals.std(axis=0, ddof=1) if n > 1 else np.zeros(3)
        stderr = {"phi1": sd[0] / math.sqrt(n), "phi3": sd[1] / math.sqrt(n), "phi4": sd[2] / math.sqrt(n)}
    grid = dp_optimal_policy(model, cost, budget).value if grid_dp else float("nan")
    if cost.tag == "quadratic" and model.n_scenarios <= max_scenarios:
        phi2 = optimal_online_value(model).value
    else:
        phi2 = grid
    lower = model_lower_bound(model, cost)
    upper = vss_upper_bound(model, cost, samples=None if exact else (n_samples or 1000), seed=seed)
    return VssReport(float(acc[0]), float(phi2), float(acc[1]), float(acc[2]), lower, upper, float(grid),
                     stderr, exact)
