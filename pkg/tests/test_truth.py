import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from switchfilter.gaussian import Gaussian1
from switchfilter.switching import ModeDistribution, SwitchingParams, stationary_distribution
from switchfilter.truth import (
    ObservationModel,
    euler_maruyama_endpoints,
    mc_moments,
    observe,
    ou_transition,
    sample_mean,
    sample_path,
    sample_variance,
    simulate_endpoints,
    simulate_transition_counts,
)

PLUS = ModeDistribution.pure("+")


class TestObservationModel:
    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            ObservationModel(0.0)
        with pytest.raises(ValueError):
            ObservationModel(1.0, schedule=-1.0)


class TestOuTransition:
    def test_zero_rate_limit(self):
        out = ou_transition(0.0, 1e-12, 2.0, 0.5, 1.0)
        assert out == pytest.approx(0.5 * math.sqrt(2.0), rel=1e-9)

    def test_unstable_rate_variance(self):
        g, dt, s = -0.04, 1.0, 0.1549
        out = ou_transition(0.0, g, dt, s, 1.0)
        assert out**2 == pytest.approx(s**2 * (math.exp(-2 * g * dt) - 1) / (-2 * g), rel=1e-12)


class TestSamplePath:
    def test_deterministic_decay(self):
        p = SwitchingParams(2.27, -0.04, 1.0, 2.0, 1e12, 0.0)
        path = sample_path(p, 1.0, "+", 1.0, [1.0], seed=0)
        assert path.u_samples[0] == pytest.approx(math.exp(-2.27), rel=1e-12)

    def test_structure(self):
        p = SwitchingParams.standard(0.5)
        path = sample_path(p, 0.1, "-", 20.0, np.arange(21.0), seed=3)
        assert np.all(np.diff(path.switch_times) > 0)
        assert len(path.modes) == len(path.switch_times) + 1
        assert all(a != b for a, b in zip(path.modes, path.modes[1:]))
        assert np.all(np.isfinite(path.u_samples))

    def test_reproducible(self):
        p = SwitchingParams.standard(1.0)
        a = sample_path(p, 0.1, "+", 10.0, np.arange(11.0), seed=42)
        b = sample_path(p, 0.1, "+", 10.0, np.arange(11.0), seed=42)
        np.testing.assert_array_equal(a.u_samples, b.u_samples)
        np.testing.assert_array_equal(a.switch_times, b.switch_times)

    def test_rejects_samples_outside_horizon(self):
        with pytest.raises(ValueError):
            sample_path(SwitchingParams.standard(), 0.0, "+", 1.0, [2.0], seed=0)

    def test_holding_time_means(self):
        p = SwitchingParams.standard(1.0)
        path = sample_path(p, 0.0, "+", 75_000.0, [75_000.0], seed=7)
        holds = np.diff(np.concatenate([[0.0], path.switch_times]))
        modes = np.array(path.modes[: len(holds)])
        for mode, rate in (("+", p.rate_plus), ("-", p.rate_minus)):
            est = sample_mean(holds[modes == mode])
            assert (holds[modes == mode]).size > 30_000
            assert est.contains(1.0 / rate)

    def test_csv_dump(self, tmp_path):
        p = SwitchingParams.standard(1.0)
        path = sample_path(p, 0.1, "+", 3.0, [0.0, 1.0, 2.0, 3.0], seed=1)
        out = tmp_path / "path.csv"
        path.write_csv(out)
        rows = list(csv.reader(open(out)))
        assert rows[0] == ["t", "u", "mode"]
        assert len(rows) == 5
        assert {r[2] for r in rows[1:]} <= {"+", "-"}


class TestSwitchingStatistics:
    def test_transition_rate_rare_regime(self):
        p = SwitchingParams.standard(100.0)
        counts, plus_time = simulate_transition_counts(p, "+", 10.0, 100_000, seed=5)
        leaving_plus = (counts + 1) // 2
        rate = leaving_plus.sum() / plus_time.sum()
        se = math.sqrt(leaving_plus.sum()) / plus_time.sum()
        assert abs(rate - p.rate_plus) <= 3 * se

    def test_occupancy_fast_regime(self):
        p = SwitchingParams.standard(0.1)
        s = simulate_endpoints(p, Gaussian1(0.1, 0.0), PLUS, [1.0], 100_000, seed=6)
        est = sample_mean(s.modes[:, 0] == 0)
        assert est.contains(2 / 3)


class TestObserve:
    def test_vanishing_noise(self):
        p = SwitchingParams.standard(1.0)
        path = sample_path(p, 0.1, "+", 2.0, [1.0, 2.0], seed=2)
        obs = ObservationModel(1e-300)
        assert observe(path, obs, 2, seed=2) == pytest.approx(path.u_at(2.0), abs=1e-140)

    def test_reproducible(self):
        p = SwitchingParams.standard(1.0)
        path = sample_path(p, 0.1, "+", 2.0, [1.0, 2.0], seed=2)
        obs = ObservationModel(0.002)
        assert observe(path, obs, 1, seed=9) == observe(path, obs, 1, seed=9)

    def test_missing_sample_time(self):
        p = SwitchingParams.standard(1.0)
        path = sample_path(p, 0.1, "+", 2.0, [1.0], seed=2)
        with pytest.raises(KeyError):
            observe(path, ObservationModel(0.002), 2, seed=2)

    def test_noise_variance(self):
        p = SwitchingParams.standard(1.0)
        n_steps = 100_000
        path = sample_path(p, 0.1, "+", float(n_steps), np.arange(1.0, n_steps + 1), seed=2)
        obs = ObservationModel(0.002)
        noise = np.array([observe(path, obs, n, seed=2) - path.u_samples[n - 1] for n in range(1, n_steps + 1)])
        assert sample_variance(noise).contains(0.002)


class TestMonteCarlo:
    def test_frozen_linear_map(self):
        p = SwitchingParams(2.27, -0.04, 1.0, 2.0, 1e9, 0.0)
        u0 = Gaussian1(0.1, 0.0016)
        mc = mc_moments(p, u0, PLUS, 1.0, 100_000, seed=3)
        assert mc.mean.contains(math.exp(-2.27) * 0.1)
        assert mc.variance.contains(math.exp(-4.54) * 0.0016)

    def test_minimum_paths(self):
        with pytest.raises(ValueError):
            mc_moments(SwitchingParams.standard(), Gaussian1(0, 1), PLUS, 1.0, 999, seed=0)

    def test_standard_error_scaling(self):
        p = SwitchingParams.standard(1.0)
        u0 = Gaussian1(0.1, 0.0016)
        a = mc_moments(p, u0, stationary_distribution(p), 1.0, 50_000, seed=4)
        b = mc_moments(p, u0, stationary_distribution(p), 1.0, 100_000, seed=4)
        assert b.mean.std_error / a.mean.std_error == pytest.approx(1 / math.sqrt(2), rel=0.1)

    def test_reproducible_across_chunks(self):
        p = SwitchingParams.standard(1.0)
        u0 = Gaussian1(0.1, 0.0016)
        a = simulate_endpoints(p, u0, PLUS, [0.5, 1.0], 5000, seed=8, chunk_size=2048)
        b = simulate_endpoints(p, u0, PLUS, [0.5, 1.0], 5000, seed=8, chunk_size=2048)
        np.testing.assert_array_equal(a.u, b.u)
        np.testing.assert_array_equal(a.integral, b.integral)

    def test_exact_simulator_matches_euler_maruyama(self):
        p = SwitchingParams.standard(1.0)
        u0 = Gaussian1(0.1, 0.0016)
        init = stationary_distribution(p)
        exact = simulate_endpoints(p, u0, init, [1.0], 10_000, seed=21).u[:, 0]
        em = euler_maruyama_endpoints(p, u0, init, 1.0, 1e-4, 10_000, seed=22)
        m_e, m_r = sample_mean(exact), sample_mean(em)
        v_e, v_r = sample_variance(exact), sample_variance(em)
        assert abs(m_e.value - m_r.value) <= 3 * math.hypot(m_e.std_error, m_r.std_error)
        assert abs(v_e.value - v_r.value) <= 3 * math.hypot(v_e.std_error, v_r.std_error)


class TestReproducibility:
    @settings(max_examples=1000, deadline=None)
    @given(st.floats(0.1, 10.0), st.integers(0, 2**32), st.integers(1, 300), st.integers(1, 128))
    def test_fixed_seed_and_chunking(self, eps, seed, n_paths, chunk):
        p = SwitchingParams.standard(eps)
        init = stationary_distribution(p)
        a = simulate_endpoints(p, Gaussian1(0.1, 0.0016), init, [0.5, 1.0], n_paths, seed, chunk_size=chunk)
        b = simulate_endpoints(p, Gaussian1(0.1, 0.0016), init, [0.5, 1.0], n_paths, seed, chunk_size=chunk)
        np.testing.assert_array_equal(a.u, b.u)
        np.testing.assert_array_equal(a.integral, b.integral)
        assert np.all(np.isfinite(a.u))
        inc = np.diff(a.integral, axis=1)
        assert np.all(inc >= 0.5 * p.gamma_minus - 1e-12) and np.all(inc <= 0.5 * p.gamma_plus + 1e-12)
