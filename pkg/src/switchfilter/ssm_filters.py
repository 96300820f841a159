"""Reference filters for the switching model.

Both filters assume that ``u`` and the mode are independent at the start of
each forecast, so the forecast moments follow from the MGF of ``Gamma``::

    <u_T>    = <e^{-Gamma_T}> <u_0>
    Var(u_T) = <e^{-2 Gamma_T}> <u_0^2> - <e^{-Gamma_T}>^2 <u_0>^2
               + sigma_u^2 int_0^T <e^{-2 (Gamma_T - Gamma_t)}> dt

The Gaussian filter uses the unconditioned MGFs; the Gaussian-sum filter
splits the forecast on the initial mode and uses the conditioned MGFs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .gaussian import (
    Gaussian1,
    GaussianMixture,
    MixtureKernel,
    kalman_update,
    mixture_update,
    moment_match,
)
from .quadrature import DEFAULT_QUAD_NODES, trapezoid
from .switching import (
    DEFAULT_N_TERMS,
    ModeDistribution,
    SwitchingParams,
    increment_mgf_profile,
    transition_matrix,
    transition_probs,
)
from .truth import ObservationModel


@dataclass(frozen=True)
class MgfSettings:
    """Numerical settings shared by every MGF-driven forecast."""

    quad_nodes: int = DEFAULT_QUAD_NODES
    n_terms: int = DEFAULT_N_TERMS
    engine: str = "auto"


@dataclass(frozen=True)
class SsmFilterState:
    u_belief: Gaussian1 | GaussianMixture
    mode_belief: ModeDistribution
    step: int = 0


@dataclass(frozen=True)
class StepRecord:
    """Forecast and analysis moments of one assimilation cycle."""

    n: int
    y: float
    prior: Gaussian1
    posterior: Gaussian1
    weights: tuple[float, ...] | None = None


def mode_conditioned_forecast(
    params: SwitchingParams,
    u0: Gaussian1,
    init: ModeDistribution,
    T: float,
    settings: MgfSettings = MgfSettings(),
) -> Gaussian1:
    """Moments of ``u_T`` for ``u_0 ~ u0`` independent of ``gamma_0 ~ init``."""
    if T <= 0:
        raise ValueError("forecast horizon must be positive")
    m, v = u0.mean, u0.variance
    mgf1 = float(increment_mgf_profile(params, -1.0, init, T, 0.0, settings.engine, settings.n_terms))
    mgf2 = float(increment_mgf_profile(params, -2.0, init, T, 0.0, settings.engine, settings.n_terms))
    forcing = 0.0
    if params.sigma_u > 0:
        forcing = params.sigma_u**2 * trapezoid(
            lambda t: increment_mgf_profile(params, -2.0, init, T, t, settings.engine, settings.n_terms),
            0.0,
            T,
            settings.quad_nodes,
        )
    mean = mgf1 * m
    var = mgf2 * (v + m * m) - mean * mean + forcing
    return Gaussian1(mean, max(var, 0.0))


def _u_gaussian(belief) -> Gaussian1:
    g = moment_match(belief)
    return g.u_marginal()


def ssm_gaussian_predict(
    state: SsmFilterState,
    params: SwitchingParams,
    T: float,
    settings: MgfSettings = MgfSettings(),
) -> SsmFilterState:
    """Single-Gaussian forecast with the unconditioned MGFs."""
    u0 = _u_gaussian(state.u_belief)
    prior = mode_conditioned_forecast(params, u0, state.mode_belief, T, settings)
    return SsmFilterState(prior, transition_probs(params, state.mode_belief, T), state.step + 1)


def ssm_mixture_predict(
    state: SsmFilterState,
    params: SwitchingParams,
    T: float,
    settings: MgfSettings = MgfSettings(),
) -> SsmFilterState:
    """Two-kernel forecast, one kernel per initial mode, weighted by the mode belief.

    Kernels labeled ``+``/``-`` hold the moments of ``u_T`` conditioned on
    ``gamma_0 = gamma_+`` / ``gamma_-``.  Zero-weight modes are dropped.
    """
    u0 = _u_gaussian(state.u_belief)
    kernels = []
    for mode, w in (("+", state.mode_belief.p_plus), ("-", state.mode_belief.p_minus)):
        if w > 0:
            dist = mode_conditioned_forecast(params, u0, ModeDistribution.pure(mode), T, settings)
            kernels.append(MixtureKernel(w, dist, mode))
    mix = GaussianMixture.from_parts([k.weight for k in kernels], [k.dist for k in kernels], [k.label for k in kernels])
    return SsmFilterState(mix, transition_probs(params, state.mode_belief, T), state.step + 1)


def ssm_filter_step(
    state: SsmFilterState,
    params: SwitchingParams,
    obs: ObservationModel,
    y: float,
    mode: Literal["gaussian", "mixture"],
    settings: MgfSettings = MgfSettings(),
) -> tuple[SsmFilterState, StepRecord]:
    """One forecast/analysis cycle of the reference filter.

    In mixture mode the posterior kernel weights give the posterior law of
    the mode at the start of the window; it is carried to the end of the
    window with the transition matrix before the next forecast, and the
    ``u`` posterior is collapsed to one Gaussian.
    """
    if not np.isfinite(y):
        raise ValueError("observation must be finite")
    T = obs.schedule
    if mode == "gaussian":
        pred = ssm_gaussian_predict(state, params, T, settings)
        post, _ = kalman_update(pred.u_belief, y, obs.r_n)
        record = StepRecord(pred.step, y, pred.u_belief, post)
        return SsmFilterState(post, pred.mode_belief, pred.step), record
    if mode == "mixture":
        pred = ssm_mixture_predict(state, params, T, settings)
        mix_post = mixture_update(pred.u_belief, y, obs.r_n)
        w = {k.label: k.weight for k in mix_post.kernels}
        start_law = ModeDistribution(w.get("+", 0.0), w.get("-", 0.0))
        end_law = transition_probs(params, start_law, T)
        prior_g = _u_gaussian(pred.u_belief)
        post_g = _u_gaussian(mix_post)
        record = StepRecord(pred.step, y, prior_g, post_g, tuple(mix_post.weights))
        return SsmFilterState(post_g, end_law, pred.step), record
    raise ValueError(f"unknown reference mode {mode!r}")


def run_ssm_filter(
    params: SwitchingParams,
    obs: ObservationModel,
    u0: Gaussian1,
    mode0: ModeDistribution,
    ys: Sequence[float],
    mode: Literal["gaussian", "mixture"],
    settings: MgfSettings = MgfSettings(),
) -> list[StepRecord]:
    state = SsmFilterState(u0, mode0, 0)
    records = []
    for y in ys:
        state, rec = ssm_filter_step(state, params, obs, y, mode, settings)
        records.append(rec)
    return records


def enumerated_ssm_filter(
    params: SwitchingParams,
    obs: ObservationModel,
    u0: Gaussian1,
    mode0: ModeDistribution,
    ys: Sequence[float],
    settings: MgfSettings = MgfSettings(),
) -> list[StepRecord]:
    """Unmerged Gaussian-sum filter over all mode sequences (test oracle).

    Each kernel is indexed by the modes at the start of every window so far;
    its forecast is conditioned on the latest one.  The kernel count doubles
    every step, so at most 12 observations are accepted.
    """
    if len(ys) > 12:
        raise ValueError("enumeration is limited to 12 steps")
    T = obs.schedule
    P = transition_matrix(params, T)
    # (weight, u Gaussian, current start mode index)
    kernels = [(w, u0, i) for i, w in enumerate(mode0.as_array()) if w > 0]
    cache: dict = {}
    records = []
    for n, y in enumerate(ys, start=1):
        forecasts = []
        for w, g, i in kernels:
            key = (g.mean, g.variance, i)
            if key not in cache:
                cache[key] = mode_conditioned_forecast(
                    params, g, ModeDistribution.pure("+" if i == 0 else "-"), T, settings
                )
            forecasts.append((w, cache[key], i))
        prior_mix = GaussianMixture.from_parts([f[0] for f in forecasts], [f[1] for f in forecasts])
        post_mix = mixture_update(prior_mix, y, obs.r_n)
        records.append(StepRecord(n, y, _u_gaussian(prior_mix), _u_gaussian(post_mix)))
        kernels = []
        for k, (_, _, i) in zip(post_mix.kernels, forecasts):
            for j in (0, 1):
                if P[i, j] > 0 and k.weight > 0:
                    kernels.append((k.weight * P[i, j], k.dist, j))
    return records
