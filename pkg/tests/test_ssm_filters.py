import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from conftest import generator_mgf
from switchfilter.experiment import ExperimentConfig, scaled_posterior_error, simulate_truth
from switchfilter.gaussian import Gaussian1, moment_match
from switchfilter.reduced import dmsm_initial_state, dmsm_predict, msm_predict
from switchfilter.ssm_filters import (
    MgfSettings,
    SsmFilterState,
    enumerated_ssm_filter,
    mode_conditioned_forecast,
    run_ssm_filter,
    ssm_filter_step,
    ssm_gaussian_predict,
    ssm_mixture_predict,
)
from switchfilter.switching import ModeDistribution, SwitchingParams, stationary_distribution, transition_probs
from switchfilter.truth import ObservationModel, mc_moments

U0 = Gaussian1(0.1, 0.0016)
CONFIG = ExperimentConfig()

params_strategy = st.builds(
    SwitchingParams,
    gamma_plus=st.floats(0.1, 3.0),
    gamma_minus=st.floats(-1.0, -0.01),
    lambda_plus=st.floats(0.2, 3.0),
    lambda_minus=st.floats(0.2, 3.0),
    epsilon=st.floats(0.1, 100.0),
    sigma_u=st.floats(0.01, 1.0),
)


def van_loan_forecast(params, u0, mode, T):
    """Forecast moments from matrix exponentials only.

    The forcing integral ``int_0^T e^{tQ} e^{(T-t)G} dt`` is the upper-right
    block of ``expm(T [[Q, I], [0, G]])`` with ``G = Q - 2 diag(gamma)``.
    """
    a, b = params.rate_plus, params.rate_minus
    Q = np.array([[-a, a], [b, -b]])
    G = Q - 2 * np.diag([params.gamma_plus, params.gamma_minus])
    block = np.zeros((4, 4))
    block[:2, :2], block[:2, 2:], block[2:, 2:] = Q, np.eye(2), G
    F = expm(T * block)[:2, 2:]
    i = 0 if mode == "+" else 1
    mgf1 = generator_mgf(params, -1.0, T)[i]
    mgf2 = generator_mgf(params, -2.0, T)[i]
    forcing = params.sigma_u**2 * (F @ np.ones(2))[i]
    mean = mgf1 * u0.mean
    return mean, mgf2 * (u0.variance + u0.mean**2) - mean**2 + forcing


def stationary_state(params, u0=U0):
    return SsmFilterState(u0, stationary_distribution(params), 0)


class TestGaussianPredict:
    def test_deterministic_rate(self):
        p = SwitchingParams(0.7, 0.7, 1.0, 2.0, 1.0, 0.0)
        pred = ssm_gaussian_predict(stationary_state(p), p, 1.3)
        assert pred.u_belief.mean == pytest.approx(math.exp(-0.91) * 0.1, rel=1e-12)
        assert pred.u_belief.variance == pytest.approx(math.exp(-1.82) * 0.0016, rel=1e-12)

    def test_mode_belief_advanced(self):
        p = SwitchingParams.standard(1.0)
        state = SsmFilterState(U0, ModeDistribution.pure("+"), 0)
        pred = ssm_gaussian_predict(state, p, 1.0)
        expected = transition_probs(p, ModeDistribution.pure("+"), 1.0)
        assert pred.mode_belief.p_plus == pytest.approx(expected.p_plus, rel=1e-14)
        assert pred.step == 1

    @pytest.mark.parametrize("eps", [0.1, 1.0, 10.0])
    @pytest.mark.parametrize("mode", ["+", "-"])
    def test_van_loan_oracle(self, eps, mode):
        p = SwitchingParams.standard(eps)
        g = mode_conditioned_forecast(p, U0, ModeDistribution.pure(mode), 1.0)
        mean, var = van_loan_forecast(p, U0, mode, 1.0)
        assert g.mean == pytest.approx(mean, rel=1e-10)
        assert abs(g.variance - var) < 1e-8

    @pytest.mark.parametrize("eps", [0.1, 1.0, 10.0, 100.0])
    def test_quadrature_refinement(self, eps):
        p = SwitchingParams.standard(eps)
        init = stationary_distribution(p)
        a = mode_conditioned_forecast(p, U0, init, 1.0, MgfSettings(quad_nodes=65))
        b = mode_conditioned_forecast(p, U0, init, 1.0, MgfSettings(quad_nodes=129))
        assert abs(a.variance - b.variance) < 1e-8

    def test_positive_variance_with_forcing(self):
        p = SwitchingParams.standard(1.0)
        pred = ssm_gaussian_predict(stationary_state(p, Gaussian1(0.0, 0.0)), p, 1e-3)
        assert pred.u_belief.variance > 0

    def test_monte_carlo_fast_switching(self):
        p = SwitchingParams.standard(0.1)
        pred = ssm_gaussian_predict(stationary_state(p), p, 1.0)
        mc = mc_moments(p, U0, stationary_distribution(p), 1.0, 200_000, seed=11)
        assert mc.mean.contains(pred.u_belief.mean)
        assert mc.variance.contains(pred.u_belief.variance)

    def test_fast_switching_limit(self):
        p = SwitchingParams.standard(1e-4)
        pred = ssm_gaussian_predict(stationary_state(p), p, 1.0)
        msm = msm_predict(U0, 1.5, p.sigma_u, 1.0)
        assert pred.u_belief.mean == pytest.approx(msm.mean, rel=1e-3)
        assert pred.u_belief.variance == pytest.approx(msm.variance, rel=1e-3)

    def test_rejects_nonpositive_horizon(self):
        p = SwitchingParams.standard(1.0)
        with pytest.raises(ValueError):
            ssm_gaussian_predict(stationary_state(p), p, 0.0)


class TestMixturePredict:
    @settings(max_examples=1000, deadline=None)
    @given(params_strategy, st.floats(0.0, 1.0), st.floats(0.2, 2.0))
    def test_invariants(self, p, p_plus, T):
        state = SsmFilterState(U0, ModeDistribution(p_plus, 1 - p_plus), 0)
        single = ssm_gaussian_predict(state, p, T)
        mix = ssm_mixture_predict(state, p, T)
        assert single.u_belief.variance > 0
        assert sum(mix.u_belief.weights) == pytest.approx(1.0, abs=1e-12)
        assert single.mode_belief.p_plus + single.mode_belief.p_minus == pytest.approx(1.0, abs=1e-12)
        merged = moment_match(mix.u_belief)
        assert merged.mean == pytest.approx(single.u_belief.mean, rel=1e-12, abs=1e-15)
        assert merged.variance == pytest.approx(single.u_belief.variance, rel=1e-8)

    def test_pure_mode_single_kernel(self):
        p = SwitchingParams.standard(1.0)
        pred = ssm_mixture_predict(SsmFilterState(U0, ModeDistribution.pure("+"), 0), p, 1.0)
        assert len(pred.u_belief) == 1
        assert pred.u_belief.kernels[0].label == "+"
        assert pred.u_belief.kernels[0].dist == mode_conditioned_forecast(p, U0, ModeDistribution.pure("+"), 1.0)

    def test_weights_are_mode_belief(self):
        p = SwitchingParams.standard(1.0)
        pred = ssm_mixture_predict(stationary_state(p), p, 1.0)
        np.testing.assert_allclose(pred.u_belief.weights, [2 / 3, 1 / 3], rtol=1e-14)

    @pytest.mark.parametrize("eps", [0.1, 1.0, 10.0, 100.0])
    def test_moment_match_equals_gaussian_predict(self, eps):
        p = SwitchingParams.standard(eps)
        mix = moment_match(ssm_mixture_predict(stationary_state(p), p, 1.0).u_belief)
        single = ssm_gaussian_predict(stationary_state(p), p, 1.0).u_belief
        assert mix.mean == pytest.approx(single.mean, rel=1e-12)
        assert mix.variance == pytest.approx(single.variance, rel=1e-8)

    def test_frozen_mode_limit(self):
        p = SwitchingParams.standard(1e4)
        pred = ssm_mixture_predict(stationary_state(p), p, 1.0).u_belief
        frozen = dmsm_predict(dmsm_initial_state(U0, 2 / 3), (2.27, -0.04), p.sigma_u, 1.0)
        for k in frozen.kernels:
            ref = pred.kernel(k.label).dist
            assert ref.mean == pytest.approx(k.dist.mean, rel=1e-3)
            assert ref.variance == pytest.approx(k.dist.variance, rel=1e-3)
        merged, frozen_merged = moment_match(pred), moment_match(frozen)
        assert merged.mean == pytest.approx(frozen_merged.mean, rel=1e-3)
        assert merged.variance == pytest.approx(frozen_merged.variance, rel=1e-3)

    def test_monte_carlo_rare_switching(self):
        p = SwitchingParams.standard(10.0)
        g = moment_match(ssm_mixture_predict(stationary_state(p), p, 1.0).u_belief)
        mc = mc_moments(p, U0, stationary_distribution(p), 1.0, 200_000, seed=12)
        assert mc.mean.contains(g.mean)
        assert mc.variance.contains(g.variance)


class TestFilterStep:
    @pytest.mark.parametrize("mode", ["gaussian", "mixture"])
    def test_uninformative_observation(self, mode):
        p = SwitchingParams.standard(1.0)
        obs = ObservationModel(1e14)
        _, rec = ssm_filter_step(stationary_state(p), p, obs, 0.3, mode)
        assert rec.posterior.mean == pytest.approx(rec.prior.mean, rel=1e-9)
        assert rec.posterior.variance == pytest.approx(rec.prior.variance, rel=1e-9)

    def test_centered_observation(self):
        p = SwitchingParams.standard(0.1)
        obs = CONFIG.observation_model()
        prior = ssm_gaussian_predict(stationary_state(p), p, 1.0).u_belief
        _, rec = ssm_filter_step(stationary_state(p), p, obs, prior.mean, "gaussian")
        assert rec.posterior.mean == pytest.approx(prior.mean, rel=1e-14)
        v, R = prior.variance, obs.r_n
        assert rec.posterior.variance == pytest.approx(v * R / (v + R), rel=1e-14)

    def test_mode_belief_handoff(self):
        p = SwitchingParams.standard(10.0)
        obs = CONFIG.observation_model()
        state, rec = ssm_filter_step(stationary_state(p), p, obs, 0.08, "mixture")
        start = ModeDistribution(*rec.weights)
        expected = transition_probs(p, start, 1.0)
        assert state.mode_belief.p_plus == pytest.approx(expected.p_plus, rel=1e-14)
        assert isinstance(state.u_belief, Gaussian1)

    def test_rejects_nonfinite_observation(self):
        p = SwitchingParams.standard(1.0)
        with pytest.raises(ValueError):
            ssm_filter_step(stationary_state(p), p, CONFIG.observation_model(), math.nan, "gaussian")

    def test_rejects_unknown_mode(self):
        p = SwitchingParams.standard(1.0)
        with pytest.raises(ValueError):
            ssm_filter_step(stationary_state(p), p, CONFIG.observation_model(), 0.0, "exact")

    def test_long_run_rare_switching(self):
        eps = 100.0
        p = CONFIG.switching(eps)
        truth = simulate_truth(CONFIG, eps, seed=0)
        state = stationary_state(p)
        for y in truth.ys:
            state, rec = ssm_filter_step(state, p, CONFIG.observation_model(), y, "mixture")
            assert np.isfinite(rec.posterior.mean)
            assert rec.posterior.variance > 0
            assert sum(rec.weights) == pytest.approx(1.0, abs=1e-12)
        assert state.step == 50


class TestEnumeratedOracle:
    def test_single_step_matches(self):
        p = CONFIG.switching(1.0)
        obs = CONFIG.observation_model()
        ys = simulate_truth(CONFIG, 1.0, seed=1, steps=1).ys
        exact = enumerated_ssm_filter(p, obs, U0, stationary_distribution(p), ys)
        merged = run_ssm_filter(p, obs, U0, stationary_distribution(p), ys, "mixture")
        assert merged[0].posterior.mean == pytest.approx(exact[0].posterior.mean, rel=1e-13)
        assert merged[0].posterior.variance == pytest.approx(exact[0].posterior.variance, rel=1e-13)

    def test_kernel_limit(self):
        p = CONFIG.switching(1.0)
        with pytest.raises(ValueError):
            enumerated_ssm_filter(p, CONFIG.observation_model(), U0, stationary_distribution(p), np.zeros(13))

    # thresholds sit between the carried mode law and the uncarried posterior weights
    @pytest.mark.parametrize("eps, tol", [(1.0, 1e-3), (10.0, 2e-2)])
    def test_merged_filter_tracks_exact(self, eps, tol):
        p = CONFIG.switching(eps)
        obs = CONFIG.observation_model()
        ys = simulate_truth(CONFIG, eps, seed=0, steps=10).ys
        exact = enumerated_ssm_filter(p, obs, U0, stationary_distribution(p), ys)
        merged = run_ssm_filter(p, obs, U0, stationary_distribution(p), ys, "mixture")
        err = [
            scaled_posterior_error(m.posterior.mean, m.posterior.variance, e.posterior.mean, e.posterior.variance)
            for m, e in zip(merged, exact)
        ]
        assert np.mean(err) < tol
