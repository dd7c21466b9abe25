import numpy as np
import pytest
from hypothesis import given, strategies as st

from evflat.elf import elf_step
from evflat.fastpath import (OpCounter, PeriodicProfile, StationaryProfile, first_period_candidates, periodic_candidates,
                             periodic_step, stationary_step)
from evflat.flatten import WorkProfile, density_matrix
from evflat.model import DemandState


def random_periodic(rng):
    p = int(rng.integers(1, 4))
    e = int(rng.integers(1, 5))
    base = rng.random(p) * rng.choice([0, 1, 3])
    mu = rng.random((p, e)) * (rng.random((p, e)) < 0.6) * rng.choice([1, 5])
    return PeriodicProfile(base, mu, anchor=int(rng.integers(1, 4)))


def random_state(rng, k, T, reach):
    rem = np.zeros(T - k + 1)
    m = min(reach, T - k + 1)
    rem[:m] = rng.random(m) * (rng.random(m) < 0.5) * rng.choice([0, 0.2, 1, 4])
    return DemandState(k, float(rng.random() * 3), rem, T)


class TestProfiles:
    def test_validation(self):
        with pytest.raises(ValueError):
            StationaryProfile(-1.0, [1.0])
        with pytest.raises(ValueError):
            PeriodicProfile([0.0, 0.0], [[1.0]])
        with pytest.raises(ValueError):
            PeriodicProfile([0.0], [[-1.0]])

    def test_unroll_drops_late_deadlines(self):
        prof = StationaryProfile(1.0, [2.0, 0.0, 3.0]).unroll(4)
        np.testing.assert_allclose(prof.base, 1.0)
        assert prof.demand[0, 0] == 2.0 and prof.demand[0, 2] == 3.0
        assert prof.demand[2, 2] == 2.0 and prof.demand[2].sum() == 2.0

    def test_periodic_offsets_and_anchor(self):
        prof = PeriodicProfile([1.0, 2.0], [[0.0], [5.0]], anchor=2)
        assert prof.period == 2 and prof.offset(2) == 0 and prof.offset(5) == 1
        un = prof.unroll(4)
        np.testing.assert_allclose(un.base, [2, 1, 2, 1])
        np.testing.assert_allclose(np.diag(un.demand), [5, 0, 5, 0])
        assert prof.max_parking == 1 and prof.max_parking_at(0) == 0

    def test_repetitions(self):
        prof = PeriodicProfile([0.0, 0.0, 0.0], [[1.0], [0.0], [0.0]])
        assert prof.repetitions(4, 10) == 3
        assert prof.repetitions(10, 10) == 1


class TestStationary:
    def test_zero_forecast_levels_realized_demand(self):
        state = DemandState.from_mapping(1, 0.0, {3: 6.0}, 3)
        assert stationary_step(state, StationaryProfile(0.0, [0.0])) == pytest.approx(2.0)

    def test_heavy_future_clears_current_slot(self):
        # the future is denser than anything including slot k, so everything arrived is served now
        state = DemandState.from_mapping(1, 0.0, {4: 1.0}, 4)
        assert stationary_step(state, StationaryProfile(5.0, [0.0])) == pytest.approx(1.0)

    def test_last_slot(self):
        state = DemandState.from_mapping(3, 1.0, {3: 2.0}, 3)
        assert stationary_step(state, StationaryProfile(1.0, [1.0])) == 2.0

    def test_rejects_mismatched_slot(self):
        state = DemandState(1, 0.0, np.zeros(3), 3)
        with pytest.raises(ValueError):
            stationary_step(state, StationaryProfile(0.0, [1.0]), k=2)
        with pytest.raises(ValueError):
            stationary_step(state, StationaryProfile(0.0, [1.0]), T=4)

    def test_matches_elf_step(self):
        rng = np.random.default_rng(30)
        for _ in range(120):
            T = int(rng.integers(1, 40))
            k = int(rng.integers(1, T + 1))
            prof = StationaryProfile(float(rng.random() * 2), rng.random(int(rng.integers(1, 6))) * 3)
            state = random_state(rng, k, T, reach=8)
            assert stationary_step(state, prof) == pytest.approx(elf_step(state, prof.unroll(T)), abs=1e-9)


@given(st.floats(0, 5), st.lists(st.floats(0, 5), min_size=1, max_size=6), st.integers(1, 20), st.integers(8, 40))
def test_stationary_future_density_depends_only_on_length(nu, mu, k, T):
    if k >= T:
        return
    prof = StationaryProfile(nu, mu)
    state = DemandState(k, 0.0, np.zeros(T - k + 1), T)
    w = WorkProfile.from_state(state, prof.unroll(T))
    dens = density_matrix(w.base, w.demand)
    n = T - k
    by_len = [dens[1:, 1:].diagonal(L - 1) for L in range(1, n + 1)]
    for L, vals in enumerate(by_len, start=1):
        np.testing.assert_allclose(vals, vals[0], rtol=1e-9, atol=1e-9)
    heads = [v[0] for v in by_len]
    assert all(b >= a - 1e-9 * max(1.0, abs(a)) for a, b in zip(heads, heads[1:]))


class TestPeriodic:
    def test_period_one_equals_stationary(self):
        rng = np.random.default_rng(31)
        for _ in range(80):
            T = int(rng.integers(2, 50))
            k = int(rng.integers(1, T + 1))
            sp = StationaryProfile(float(rng.random() * 2), rng.random(int(rng.integers(1, 5))) * 2)
            state = random_state(rng, k, T, reach=6)
            got = periodic_step(state, PeriodicProfile.from_stationary(sp))
            assert got == pytest.approx(stationary_step(state, sp), abs=1e-9)

    def test_zero_forecast_equals_elf(self):
        state = DemandState.from_mapping(2, 1.0, {2: 1.0, 5: 4.0}, 8)
        prof = PeriodicProfile([0.0, 0.0], np.zeros((2, 2)))
        assert periodic_step(state, prof) == pytest.approx(elf_step(state, prof.unroll(8)), abs=1e-12)

    def test_matches_elf_step(self):
        rng = np.random.default_rng(32)
        for _ in range(150):
            T = int(rng.integers(1, 60))
            k = int(rng.integers(1, T + 1))
            prof = random_periodic(rng)
            state = random_state(rng, k, T, reach=prof.demand.shape[1] + 2)
            assert periodic_step(state, prof) == pytest.approx(elf_step(state, prof.unroll(T)), abs=1e-9)

    def test_long_horizons_match_elf_step(self):
        rng = np.random.default_rng(33)
        for _ in range(10):
            prof = random_periodic(rng)
            state = random_state(rng, 1, 150, reach=prof.demand.shape[1] + 2)
            assert periodic_step(state, prof) == pytest.approx(elf_step(state, prof.unroll(150)), abs=1e-9)

    def test_counter_constant_for_fixed_profile(self):
        prof = PeriodicProfile([0.5, 2.0], [[1.0, 0.5], [0.0, 3.0]])
        counts = []
        for T in (30, 60, 120, 240):
            rem = np.zeros(T)
            rem[:3] = [1.0, 0.0, 2.0]
            c = OpCounter()
            periodic_step(DemandState(1, 1.0, rem, T), prof, c)
            counts.append(c.count)
            assert c.rounds >= 1
        assert len(set(counts)) == 1
        c.reset()
        assert c.count == 0 and c.rounds == 0


def first_round_densest(prof, k, T):
    state = DemandState(k, 0.0, np.zeros(T - k + 1), T)
    w = WorkProfile.from_state(state, prof.unroll(T))
    return density_matrix(w.base, w.demand)


class TestCandidateSets:
    def test_corrected_set_contains_the_densest_window(self):
        rng = np.random.default_rng(34)
        for _ in range(60):
            prof = random_periodic(rng)
            T = int(rng.integers(10, 70))
            k = int(rng.integers(1, 5))
            dens = first_round_densest(prof, k, T)
            best = max(dens[a - k, b - k] for a, b in periodic_candidates(prof, k, T))
            assert best == pytest.approx(dens.max(), rel=1e-12)

    def test_first_period_set_can_miss(self):
        # with a heavier slot at the second offset, the one-period window [2, 2] is not densest
        prof = PeriodicProfile([0.0, 0.0], [[3.0], [2.0]])
        pairs, (i_bar, j_bar) = first_period_candidates(prof, 1, 6)
        assert (i_bar, j_bar) == (2, 2)
        dens = first_round_densest(prof, 1, 6)
        assert max(dens[a - 1, b - 1] for a, b in pairs) == pytest.approx(2.0)
        assert dens.max() == pytest.approx(3.0)
        state = DemandState(1, 0.0, np.zeros(6), 6)
        assert periodic_step(state, prof) == pytest.approx(elf_step(state, prof.unroll(6)))
