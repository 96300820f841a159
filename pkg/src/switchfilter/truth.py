"""Exact simulation of the switching truth model and its noisy observations.

Paths are simulated event by event: exponential holding times with rates
``lambda / epsilon`` and, between switches, the exact Gaussian transition of
an OU process with the current damping rate.  The vectorized simulators in
this module are the Monte Carlo oracles used throughout the test suite.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .gaussian import Gaussian1
from .switching import Mode, ModeDistribution, SwitchingParams

CHUNK_SIZE = 1 << 16


@dataclass(frozen=True)
class ObservationModel:
    """Observation ``y_n = u(n T) + N(0, r_n)`` every ``schedule`` time units."""

    r_n: float
    schedule: float = 1.0

    def __post_init__(self):
        if not (self.r_n > 0 and np.isfinite(self.r_n)):
            raise ValueError(f"observation variance must be positive, got {self.r_n}")
        if not (self.schedule > 0 and np.isfinite(self.schedule)):
            raise ValueError(f"observation interval must be positive, got {self.schedule}")


@dataclass(frozen=True)
class TruthPath:
    """One simulated path.

    ``modes[k]`` is the mode on ``[switch_times[k-1], switch_times[k])`` with
    ``switch_times[-1]`` read as 0, so ``len(modes) == len(switch_times) + 1``.
    """

    switch_times: np.ndarray
    modes: tuple[Mode, ...]
    sample_times: np.ndarray
    u_samples: np.ndarray
    seed: int
    horizon: float

    def mode_at(self, t: float) -> Mode:
        return self.modes[int(np.searchsorted(self.switch_times, t, side="right"))]

    def u_at(self, t: float) -> float:
        i = int(np.searchsorted(self.sample_times, t - 1e-12))
        if i == self.sample_times.size or abs(self.sample_times[i] - t) > 1e-12:
            raise KeyError(f"time {t} is not a sample time")
        return float(self.u_samples[i])

    def write_csv(self, path: str | Path) -> None:
        """Dump ``t,u,mode`` rows, one per sample time."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "u", "mode"])
            for t, u in zip(self.sample_times, self.u_samples):
                writer.writerow([repr(float(t)), repr(float(u)), self.mode_at(t)])


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for the sub-stream ``(seed, *stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def ou_transition(u, gamma, dt, sigma_u, noise):
    """Exact OU step ``u e^{-gamma dt} + sqrt(q) noise`` for any sign of gamma.

    ``q = sigma_u^2 (1 - e^{-2 gamma dt}) / (2 gamma)``, with the limit
    ``sigma_u^2 dt`` when ``|gamma dt|`` is tiny.
    """
    gamma = np.asarray(gamma, dtype=float)
    dt = np.asarray(dt, dtype=float)
    x = gamma * dt
    small = np.abs(x) < 1e-8
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(small, dt * (1.0 - x), -np.expm1(-2 * x) / (2 * gamma))
    return u * np.exp(-x) + sigma_u * np.sqrt(factor) * noise


def _levels(params: SwitchingParams):
    return (
        np.array([params.gamma_plus, params.gamma_minus]),
        np.array([params.rate_plus, params.rate_minus]),
    )


def sample_path(
    params: SwitchingParams,
    u0: float,
    mode0: Mode,
    horizon: float,
    sample_times: Sequence[float],
    seed: int,
) -> TruthPath:
    """Simulate one exact path and record ``u`` at ``sample_times``."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    sample_times = np.sort(np.asarray(sample_times, dtype=float))
    if sample_times.size and (sample_times[0] < 0 or sample_times[-1] > horizon):
        raise ValueError("sample times must lie in [0, horizon]")
    rng = rng_for(seed, 0)
    gammas, rates = _levels(params)
    idx = 0 if mode0 == "+" else 1
    switch_times: list[float] = []
    modes: list[Mode] = [mode0]
    t = 0.0
    u = float(u0)
    samples = np.empty(sample_times.size)
    k = 0
    while True:
        t_next = t + rng.exponential(1.0 / rates[idx])
        seg_end = min(t_next, horizon)
        while k < sample_times.size and sample_times[k] <= seg_end:
            dt = sample_times[k] - t
            u = float(ou_transition(u, gammas[idx], dt, params.sigma_u, rng.standard_normal()))
            t = sample_times[k]
            samples[k] = u
            k += 1
        if t_next >= horizon:
            break
        u = float(ou_transition(u, gammas[idx], t_next - t, params.sigma_u, rng.standard_normal()))
        t = t_next
        idx = 1 - idx
        switch_times.append(t_next)
        modes.append("+" if idx == 0 else "-")
    return TruthPath(np.array(switch_times), tuple(modes), sample_times, samples, seed, horizon)


def observe(path: TruthPath, obs: ObservationModel, n: int, seed: int) -> float:
    """``u(n T) + N(0, r_n)`` with the noise drawn from stream ``(seed, n)``."""
    u = path.u_at(n * obs.schedule)
    return u + math.sqrt(obs.r_n) * float(rng_for(seed, 1, n).standard_normal())


# ---------------------------------------------------------------------------
# vectorized Monte Carlo


@dataclass(frozen=True)
class EndpointSample:
    """Per-path states at checkpoint times ``times`` (axis 1)."""

    times: np.ndarray
    mode0: np.ndarray  # 0 for +, 1 for -
    modes: np.ndarray
    u: np.ndarray
    integral: np.ndarray  # Gamma_t


def _simulate_chunk(params, rng, u0, mode0, times) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    gammas, rates = _levels(params)
    n = u0.size
    u = u0.copy()
    idx = mode0.copy()
    gam = np.zeros(n)
    out_u = np.empty((n, times.size))
    out_g = np.empty((n, times.size))
    out_m = np.empty((n, times.size), dtype=np.int8)
    t_prev = 0.0
    for j, t_stop in enumerate(times):
        # holding times are memoryless, so residuals may be redrawn at checkpoints
        t = np.full(n, t_prev)
        active = np.arange(n)
        while active.size:
            i_act = idx[active]
            hold = rng.exponential(1.0, active.size) / rates[i_act]
            end = np.minimum(t[active] + hold, t_stop)
            dt = end - t[active]
            g = gammas[i_act]
            u[active] = ou_transition(u[active], g, dt, params.sigma_u, rng.standard_normal(active.size))
            gam[active] += g * dt
            t[active] = end
            switched = end < t_stop
            idx[active[switched]] = 1 - i_act[switched]
            active = active[switched]
        out_u[:, j] = u
        out_g[:, j] = gam
        out_m[:, j] = idx
        t_prev = t_stop
    return out_u, out_g, out_m


def simulate_endpoints(
    params: SwitchingParams,
    u0: Gaussian1,
    mode0: ModeDistribution,
    times: Sequence[float],
    n_paths: int,
    seed: int,
    chunk_size: int = CHUNK_SIZE,
) -> EndpointSample:
    """Exact joint samples of ``(u_t, Gamma_t, gamma_t)`` at checkpoint ``times``.

    Paths are generated in chunks; chunk ``c`` draws from stream ``(seed, c)``,
    so results depend only on ``(seed, n_paths, chunk_size)``.
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or times.size == 0 or times[0] < 0:
        raise ValueError("checkpoint times must be nonnegative and nondecreasing")
    parts = []
    for c, start in enumerate(range(0, n_paths, chunk_size)):
        size = min(chunk_size, n_paths - start)
        rng = rng_for(seed, 2, c)
        u_init = u0.mean + u0.std * rng.standard_normal(size)
        m_init = (rng.random(size) >= mode0.p_plus).astype(np.int8)
        uu, gg, mm = _simulate_chunk(params, rng, u_init, m_init, times)
        parts.append((m_init, mm, uu, gg))
    cat = [np.concatenate(p) for p in zip(*parts)]
    return EndpointSample(times, cat[0], cat[1], cat[2], cat[3])


@dataclass(frozen=True)
class MonteCarloEstimate:
    value: float
    std_error: float

    def contains(self, x: float, n_se: float = 3.0) -> bool:
        return abs(x - self.value) <= n_se * self.std_error


@dataclass(frozen=True)
class MonteCarloMoments:
    mean: MonteCarloEstimate
    variance: MonteCarloEstimate
    conditional: dict  # mode -> (mean estimate, variance estimate)
    n_paths: int


def sample_mean(x) -> MonteCarloEstimate:
    x = np.asarray(x, dtype=float)
    return MonteCarloEstimate(float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)))


def sample_variance(x) -> MonteCarloEstimate:
    """Unbiased variance with the delta-method standard error ``sqrt((m4 - s^4) / n)``."""
    x = np.asarray(x, dtype=float)
    d = x - x.mean()
    var = float(d @ d / (x.size - 1))
    m4 = float(np.mean(d**4))
    return MonteCarloEstimate(var, math.sqrt(max(m4 - var * var, 0.0) / x.size))


def sample_covariance(x, y) -> MonteCarloEstimate:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    prod = (x - x.mean()) * (y - y.mean())
    return MonteCarloEstimate(float(prod.sum() / (x.size - 1)), float(prod.std(ddof=1) / math.sqrt(x.size)))


def mc_moments(
    params: SwitchingParams,
    u0_dist: Gaussian1,
    mode0: ModeDistribution,
    T: float,
    n_paths: int,
    seed: int,
) -> MonteCarloMoments:
    """Monte Carlo moments of ``u_T`` overall and conditioned on ``gamma_0``."""
    if n_paths < 1000:
        raise ValueError("n_paths must be at least 1000")
    s = simulate_endpoints(params, u0_dist, mode0, [T], n_paths, seed)
    u = s.u[:, 0]
    cond = {}
    for mode, code in (("+", 0), ("-", 1)):
        sel = u[s.mode0 == code]
        if sel.size > 1:
            cond[mode] = (sample_mean(sel), sample_variance(sel))
    return MonteCarloMoments(sample_mean(u), sample_variance(u), cond, n_paths)


def mc_mgf(
    params: SwitchingParams,
    alpha: float,
    t_hi: float,
    init: ModeDistribution,
    n_paths: int,
    seed: int,
    t_lo: float = 0.0,
) -> MonteCarloEstimate:
    """Monte Carlo ``<exp(alpha (Gamma_{t_hi} - Gamma_{t_lo}))>`` from exact paths."""
    times = [t_lo, t_hi] if t_lo > 0 else [t_hi]
    silent = replace(params, sigma_u=0.0)
    s = simulate_endpoints(silent, Gaussian1(0.0, 0.0), init, times, n_paths, seed)
    inc = s.integral[:, -1] - (s.integral[:, 0] if t_lo > 0 else 0.0)
    return sample_mean(np.exp(alpha * inc))


def simulate_transition_counts(
    params: SwitchingParams, mode0: Mode, horizon: float, n_paths: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Number of switches in ``[0, horizon]`` and the time spent in ``+`` per path."""
    gammas, rates = _levels(params)
    rng = rng_for(seed, 3)
    idx = np.full(n_paths, 0 if mode0 == "+" else 1, dtype=np.int8)
    t = np.zeros(n_paths)
    counts = np.zeros(n_paths, dtype=np.int64)
    plus_time = np.zeros(n_paths)
    active = np.arange(n_paths)
    while active.size:
        i_act = idx[active]
        hold = rng.exponential(1.0, active.size) / rates[i_act]
        end = np.minimum(t[active] + hold, horizon)
        plus_time[active] += np.where(i_act == 0, end - t[active], 0.0)
        t[active] = end
        switched = end < horizon
        counts[active[switched]] += 1
        idx[active[switched]] = 1 - i_act[switched]
        active = active[switched]
    return counts, plus_time


# ---------------------------------------------------------------------------
# reference schemes used only by the tests


def euler_maruyama_endpoints(
    params: SwitchingParams,
    u0: Gaussian1,
    mode0: ModeDistribution,
    T: float,
    dt: float,
    n_paths: int,
    seed: int,
) -> np.ndarray:
    """Small-step Euler-Maruyama ``u_T`` with switching decided per step.

    A slow reference scheme, kept only to cross-check the exact simulator.
    """
    gammas, rates = _levels(params)
    rng = rng_for(seed, 4)
    n_steps = int(round(T / dt))
    u = u0.mean + u0.std * rng.standard_normal(n_paths)
    idx = (rng.random(n_paths) >= mode0.p_plus).astype(np.int8)
    sq = params.sigma_u * math.sqrt(dt)
    p_switch = -np.expm1(-rates * dt)
    for _ in range(n_steps):
        u = u - gammas[idx] * u * dt + sq * rng.standard_normal(n_paths)
        flip = rng.random(n_paths) < p_switch[idx]
        idx = np.where(flip, 1 - idx, idx).astype(np.int8)
    return u


def simulate_ou_rate_endpoints(
    mu: float,
    nu: float,
    sigma: float,
    epsilon: float,
    sigma_u: float,
    u0: Gaussian1,
    gamma0: Gaussian1,
    T: float,
    n_paths: int,
    seed: int,
    dt: float = 1e-3,
    chunk_size: int = CHUNK_SIZE,
) -> tuple[np.ndarray, np.ndarray]:
    """Samples of ``(u_T, gamma_T)`` when the damping is an OU process.

    ``d gamma = -(nu/eps)(gamma - mu) dt + (sigma/sqrt(eps)) dW``.  The pair
    ``(gamma, int gamma)`` is advanced with its exact joint Gaussian step on a
    grid of size ``dt``; given the rate path, ``u_T`` is Gaussian with mean
    ``e^{-Gamma_T} u_0`` and variance ``sigma_u^2 int e^{-2(Gamma_T - Gamma_s)} ds``,
    the latter integrated by the trapezoid rule on the same grid.
    """
    n_steps = int(round(T / dt))
    h = T / n_steps
    d = nu / epsilon
    s2 = sigma**2 / epsilon
    e = math.exp(-d * h)
    b = -math.expm1(-d * h) / d
    # joint covariance of (gamma increment noise, integral noise) over one step
    var_g = s2 * (1 - e * e) / (2 * d)
    var_i = s2 / (2 * d**3) * (2 * d * h - 3 + 4 * e - e * e)
    cov_gi = s2 / (2 * d**2) * (1 - e) ** 2
    chol = np.linalg.cholesky(np.array([[var_g, cov_gi], [cov_gi, var_i]]))
    u_out, g_out = [], []
    for c, start in enumerate(range(0, n_paths, chunk_size)):
        size = min(chunk_size, n_paths - start)
        rng = rng_for(seed, 5, c)
        u_init = u0.mean + u0.std * rng.standard_normal(size)
        g = gamma0.mean + gamma0.std * rng.standard_normal(size)
        big = np.zeros(size)  # Gamma_s
        # int_0^T e^{2 Gamma_s} ds by trapezoid; then scale by e^{-2 Gamma_T}
        acc = 0.5 * np.ones(size) * h
        for k in range(n_steps):
            z = rng.standard_normal((2, size))
            noise = chol @ z
            dev = g - mu
            big += mu * h + b * dev + noise[1]
            g = mu + e * dev + noise[0]
            w = h if k < n_steps - 1 else 0.5 * h
            acc += w * np.exp(2 * big)
        var = sigma_u**2 * acc * np.exp(-2 * big)
        u_t = np.exp(-big) * u_init + np.sqrt(var) * rng.standard_normal(size)
        u_out.append(u_t)
        g_out.append(g)
    return np.concatenate(u_out), np.concatenate(g_out)
