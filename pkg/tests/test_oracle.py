import numpy as np
import pytest

from evflat.flatten import solve_offline
from evflat.model import DemandState, ExpectedProfile, Vehicle, scenario_from_matrix, scenario_from_vehicles
from evflat.oracle import (MAX_SUPPORT, BudgetExceeded, DiscreteArrivalModel, dp_optimal_policy, expected_costs,
                           model_lower_bound, optimal_online_value, scenario_upper_load, vss_lower_bound,
                           vss_upper_bound)
from oracles import brute_online, enumerate_first_rate, open_job_load, random_toy_slots

# demand 2 due at slot 2 known at slot 1; a Bernoulli(1/2) arrival of 2 due at slot 2
FIXTURE = [[(1.0, 0, {2: 2.0})], [(0.5, 0, {}), (0.5, 0, {2: 2.0})]]


def fixture():
    return DiscreteArrivalModel.build(FIXTURE)


class TestModel:
    def test_validation(self):
        with pytest.raises(ValueError):
            DiscreteArrivalModel.build([[(0.5, 0, {})]])
        with pytest.raises(ValueError):
            DiscreteArrivalModel.build([[(1.0, 0, {2: 1.0})]])
        with pytest.raises(ValueError):
            DiscreteArrivalModel.build([[(1.0 / (MAX_SUPPORT + 1), 0, {})] * (MAX_SUPPORT + 1)])

    def test_enumeration_and_mean(self):
        m = fixture()
        assert m.n_scenarios == 2 and not m.is_deterministic
        assert sum(p for p, _ in m.scenarios()) == pytest.approx(1.0)
        mean = m.mean_profile()
        assert mean.demand[0, 1] == 2.0 and mean.demand[1, 1] == 1.0

    def test_sampling_is_seeded(self):
        m = fixture()
        a = [m.sample(np.random.default_rng(3)).total_demand for _ in range(5)]
        b = [m.sample(np.random.default_rng(3)).total_demand for _ in range(5)]
        assert a == b


class TestOptimalOnline:
    def test_fixture_on_integer_grid(self):
        table = {0: 0.5 * ((2 + 0) ** 2 + (2 + 2) ** 2),
                 1: 1 + 0.5 * ((1 + 0) ** 2 + (1 + 2) ** 2),
                 2: 4 + 0.5 * (0 ** 2 + 2 ** 2)}
        assert table == {0: 10.0, 1: 6.0, 2: 6.0}
        assert brute_online(FIXTURE, h=1.0) == enumerate_first_rate(table) == 6.0
        pol = dp_optimal_policy(fixture())
        assert pol.value == pytest.approx(6.0)
        assert pol.action(DemandState.from_mapping(1, 0.0, {2: 2.0}, 2)) == 1.0

    def test_fixture_continuous(self):
        # min over s of s^2 + E[(2 - s + xi)^2] is at s = 1.5
        assert optimal_online_value(fixture()).value == pytest.approx(5.5, abs=1e-9)
        assert dp_optimal_policy(fixture(), step=0.5).value == pytest.approx(5.5)

    def test_unreached_state(self):
        with pytest.raises(KeyError):
            dp_optimal_policy(fixture()).action(DemandState.from_mapping(1, 0.0, {2: 9.0}, 2))

    def test_deterministic_equals_offline(self):
        rng = np.random.default_rng(40)
        for _ in range(20):
            T = int(rng.integers(1, 5))
            A = np.triu(rng.integers(0, 3, (T, T)) * (rng.random((T, T)) < 0.5)).astype(float)
            sc = scenario_from_matrix(A, rng.integers(0, 2, T))
            m = DiscreteArrivalModel.deterministic(sc)
            off = solve_offline(sc).cost
            assert optimal_online_value(m).value == pytest.approx(off, abs=1e-7)
            assert dp_optimal_policy(m, step=1.0).value >= off - 1e-9

    def test_grid_dp_matches_brute_force(self):
        rng = np.random.default_rng(41)
        for _ in range(15):
            slots = random_toy_slots(rng, T_max=3, support=2, dmax=2)
            m = DiscreteArrivalModel.build(slots)
            for h in (1.0, 0.5):
                assert dp_optimal_policy(m, step=h).value == pytest.approx(brute_online(slots, h), abs=1e-9)

    def test_continuous_below_every_grid(self):
        rng = np.random.default_rng(42)
        for _ in range(15):
            slots = random_toy_slots(rng, T_max=3, support=2, dmax=2)
            m = DiscreteArrivalModel.build(slots)
            exact = optimal_online_value(m).value
            fine = brute_online(slots, 0.125)
            assert exact <= fine + 1e-7
            assert fine - exact <= 0.05 * max(1.0, exact)

    def test_budget(self):
        with pytest.raises(BudgetExceeded):
            dp_optimal_policy(fixture(), budget=1)
        with pytest.raises(BudgetExceeded):
            optimal_online_value(fixture(), max_nodes=2)


class TestBounds:
    def test_lower_bound_examples(self):
        state = DemandState.from_mapping(1, 0.0, {3: 6.0}, 3)
        assert vss_lower_bound(state, ExpectedProfile.zeros(3)) == pytest.approx(12.0)
        assert vss_lower_bound(DemandState(1, 0.0, np.zeros(3), 3), ExpectedProfile.zeros(3)) == 0.0
        with pytest.raises(ValueError):
            vss_lower_bound(DemandState(2, 0.0, np.zeros(2), 3), ExpectedProfile.zeros(3))

    def test_upper_bound_example(self):
        sc = scenario_from_vehicles([Vehicle(1, 1, 3, 6.0)], [0, 0, 0])
        np.testing.assert_allclose(scenario_upper_load(sc), [6, 6, 6])
        assert vss_upper_bound(DiscreteArrivalModel.deterministic(sc)) == pytest.approx(108.0)

    def test_upper_load_matches_loops(self):
        rng = np.random.default_rng(43)
        for _ in range(30):
            T = int(rng.integers(1, 7))
            A = np.triu(rng.integers(0, 4, (T, T)) * (rng.random((T, T)) < 0.4)).astype(float)
            sc = scenario_from_matrix(A, rng.integers(0, 3, T))
            np.testing.assert_allclose(scenario_upper_load(sc), open_job_load(sc))

    def test_upper_bound_sampled_close_to_exact(self):
        m = fixture()
        assert vss_upper_bound(m, samples=4000, seed=1) == pytest.approx(vss_upper_bound(m), rel=0.05)


class TestExpectedCosts:
    def test_zero_demand_costs_equal_base_cost(self):
        m = DiscreteArrivalModel.build([[(0.5, 1, {}), (0.5, 3, {})], [(1.0, 2, {})]])
        r = expected_costs(m)
        want = 0.5 * (1 + 9) + 4
        for v in (r.phi1, r.phi2, r.phi3, r.phi4, r.phi2_grid, r.upper_bound):
            assert v == pytest.approx(want)

    def test_deterministic_model(self):
        sc = scenario_from_vehicles([Vehicle("A", 1, 1, 4.0), Vehicle("B", 1, 3, 2.0)], [0, 0, 0])
        r = expected_costs(DiscreteArrivalModel.deterministic(sc))
        assert r.phi1 == pytest.approx(18) and r.phi2 == pytest.approx(18) and r.phi3 == pytest.approx(18)
        assert r.phi4 >= r.phi3 - 1e-9
        assert r.exact and r.stderr is None

    def test_fixture_report(self):
        r = expected_costs(fixture())
        assert r.phi1 == pytest.approx(0.5 * 2 + 0.5 * 8)
        assert r.phi2 == pytest.approx(5.5) and r.phi2_grid == pytest.approx(6.0)
        assert r.vss == pytest.approx(r.phi3 - 5.5)
        assert dict(r.as_rows())["vss_bound"] == pytest.approx(r.upper_bound - r.lower_bound)

    def test_toy_ordering_and_bounds(self):
        rng = np.random.default_rng(44)
        for _ in range(20):
            r = expected_costs(DiscreteArrivalModel.build(random_toy_slots(rng)))
            assert r.phi1 <= r.phi2 + 1e-9 <= r.phi3 + 2e-9
            assert r.phi2 <= r.phi2_grid + 1e-9
            assert r.lower_bound <= r.phi1 + 1e-9
            assert r.vss <= r.vss_bound + 1e-9
            assert r.phi3 <= r.upper_bound + 1e-9

    def test_elf_beats_avg_on_a_hedging_model(self):
        # the known job can spread over three slots while the random one cannot
        m = DiscreteArrivalModel.build([[(1.0, 0, {3: 6.0})], [(0.5, 0, {}), (0.5, 0, {2: 3.0})], [(1.0, 0, {})]])
        r = expected_costs(m)
        assert (r.phi3 - r.phi2) / r.phi2 < (r.phi4 - r.phi2) / r.phi2

    def test_monte_carlo_mode(self):
        m = DiscreteArrivalModel.build(random_toy_slots(np.random.default_rng(45), T_max=3))
        exact = expected_costs(m)
        mc = expected_costs(m, n_samples=3000, seed=2)
        assert not mc.exact and set(mc.stderr) == {"phi1", "phi3", "phi4"}
        for key in ("phi1", "phi3", "phi4"):
            assert abs(getattr(mc, key) - getattr(exact, key)) <= 5 * mc.stderr[key] + 1e-9
        assert mc.phi2 == pytest.approx(exact.phi2)
        again = expected_costs(m, n_samples=3000, seed=2)
        assert again == mc

    def test_model_lower_bound_uses_first_slot_mean(self):
        m = DiscreteArrivalModel.build([[(0.5, 0, {2: 2.0}), (0.5, 0, {2: 6.0})], [(1.0, 0, {})]])
        assert model_lower_bound(m) == pytest.approx(2 * (4 / 2) ** 2)
