"""Reduced filters with model error: MSM, DSM, dMSM and dDSM.

* MSM freezes the damping at a constant ``gamma_bar`` (exact Kalman filter).
* DSM replaces the damping by an OU process and propagates the exact first
  two moments of the joint ``(u, gamma)`` state (SPEKF moment map).
* dMSM / dDSM pick one of two modes at the start and keep it; each mode gets
  its own Gaussian kernel and the filters are Gaussian-sum filters.

OU damping convention: ``d gamma = -(nu/eps)(gamma - mu) dt + (sigma/sqrt(eps)) dW``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .gaussian import (
    Gaussian1,
    Gaussian2,
    GaussianMixture,
    MixtureKernel,
    clip_psd,
    joint_kalman_update,
    kalman_update,
    merge_to,
    mixture_update,
    moment_match,
)
from .quadrature import DEFAULT_QUAD_NODES, trapezoid
from .ssm_filters import StepRecord
from .switching import Mode
from .truth import ObservationModel

ReducedModel = Literal["MSM", "DSM", "dMSM", "dDSM"]


@dataclass(frozen=True)
class ThetaDSM:
    """OU damping parameters ``(mu, nu, sigma)``."""

    mu: float
    nu: float
    sigma: float

    def __post_init__(self):
        if not np.isfinite(self.mu):
            raise ValueError("mu must be finite")
        if not (self.nu > 0 and np.isfinite(self.nu)):
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def as_array(self) -> np.ndarray:
        return np.array([self.mu, self.nu, self.sigma])

    @classmethod
    def from_array(cls, x) -> "ThetaDSM":
        return cls(float(x[0]), float(x[1]), float(x[2]))

    def stationary_variance(self) -> float:
        """Stationary variance ``sigma^2 / (2 nu)`` of the OU damping."""
        return self.sigma**2 / (2 * self.nu)


@dataclass(frozen=True)
class ThetaDDSM:
    """Mode probability and per-mode OU parameters of the dual-mode DSM."""

    rho_plus: float
    plus: ThetaDSM
    minus: ThetaDSM

    def __post_init__(self):
        if not 0 <= self.rho_plus <= 1:
            raise ValueError(f"rho_plus must lie in [0, 1], got {self.rho_plus}")

    @property
    def rho_minus(self) -> float:
        return 1.0 - self.rho_plus

    def mode(self, label: Mode) -> ThetaDSM:
        return self.plus if label == "+" else self.minus


@dataclass(frozen=True)
class MsmParams:
    gamma_bar: float

    def __post_init__(self):
        if not np.isfinite(self.gamma_bar):
            raise ValueError("gamma_bar must be finite")


# ---------------------------------------------------------------------------
# helpers for OU integrals


def _relax(d: float, t):
    """``(1 - e^{-d t}) / d``, the integral of ``e^{-d s}`` over ``[0, t]``."""
    t = np.asarray(t, dtype=float)
    return -np.expm1(-d * t) / d


def _integral_noise_variance(d: float, s2: float, t):
    """Variance of the noise part of ``int_0^t gamma``: ``s2 / (2 d^3) (2x - 3 + 4e^{-x} - e^{-2x})``.

    The bracket loses all digits for small ``x = d t``; its Taylor series
    ``sum_{k>=3} (-1)^k (4 - 2^k) x^k / k!`` is used there instead.
    """
    t = np.asarray(t, dtype=float)
    x = d * t
    out = np.empty_like(x)
    small = x < 0.1
    xs = x[small]
    series = np.zeros_like(xs)
    for k in range(3, 20):
        series += (-1) ** k * (4.0 - 2.0**k) * xs**k / math.factorial(k)
    out[small] = series
    xl = x[~small]
    out[~small] = 2 * xl - 3 + 4 * np.exp(-xl) - np.exp(-2 * xl)
    return s2 / (2 * d**3) * out


def _ou_rates(theta: ThetaDSM, epsilon: float) -> tuple[float, float]:
    """Relaxation rate ``nu / eps`` and squared noise amplitude ``sigma^2 / eps``."""
    return theta.nu / epsilon, theta.sigma**2 / epsilon


def ou_rate_marginal(theta: ThetaDSM, gamma0: Gaussian1, epsilon: float, t):
    """Mean and variance of the OU damping at time(s) ``t``."""
    d, s2 = _ou_rates(theta, epsilon)
    t = np.asarray(t, dtype=float)
    e = np.exp(-d * t)
    mean = theta.mu + (gamma0.mean - theta.mu) * e
    var = e * e * gamma0.variance + s2 * _relax(2 * d, t)
    return mean, var


def ou_integral_mgf(
    theta: ThetaDSM,
    gamma0: Gaussian1,
    alpha: float,
    t_lo,
    t_hi: float,
    epsilon: float,
):
    """``<exp(alpha int_{t_lo}^{t_hi} gamma)>`` for OU damping started from ``gamma0``.

    The increment is Gaussian with mean ``mu tau + b(tau) (<gamma_lo> - mu)`` and
    variance ``b(tau)^2 Var(gamma_lo) + V(tau)``, ``b`` the relaxation integral and
    ``V`` the integrated-noise variance.  ``t_lo`` may be an array.
    """
    t_lo = np.asarray(t_lo, dtype=float)
    if np.any(t_lo < 0) or np.any(t_lo > t_hi):
        raise ValueError("need 0 <= t_lo <= t_hi")
    d, s2 = _ou_rates(theta, epsilon)
    tau = t_hi - t_lo
    g_mean, g_var = ou_rate_marginal(theta, gamma0, epsilon, t_lo)
    b = _relax(d, tau)
    mean = theta.mu * tau + b * (g_mean - theta.mu)
    var = b * b * g_var + _integral_noise_variance(d, s2, tau)
    out = np.exp(alpha * mean + 0.5 * alpha**2 * var)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# forecasts


def msm_predict(prior: Gaussian1, gamma_bar: float, sigma_u: float, T: float) -> Gaussian1:
    """Exact OU forecast with constant damping ``gamma_bar``."""
    if T <= 0:
        raise ValueError("forecast horizon must be positive")
    x = gamma_bar * T
    decay = math.exp(-x)
    forcing = T * (1 - x) if abs(x) < 1e-8 else -math.expm1(-2 * x) / (2 * gamma_bar)
    return Gaussian1(decay * prior.mean, decay * decay * prior.variance + sigma_u**2 * forcing)


def spekf_predict(
    prior: Gaussian2,
    theta: ThetaDSM,
    sigma_u: float,
    epsilon: float,
    T: float,
    quad_nodes: int = DEFAULT_QUAD_NODES,
) -> Gaussian2:
    """Exact mean and covariance of ``(u_T, gamma_T)`` for OU damping.

    With ``u_T = A + B``, ``A = e^{-Gamma_T} u_0`` and ``B`` the stochastic
    forcing, every moment of ``A`` follows from the Gaussian identity
    ``<e^z x> = e^{<z> + Var z / 2} (<x> + Cov(x, z))`` and its second-order
    analogues; ``<B^2> = sigma_u^2 int_0^T <e^{-2 (Gamma_T - Gamma_s)}> ds`` is
    integrated by the trapezoid rule.
    """
    if T <= 0:
        raise ValueError("forecast horizon must be positive")
    d, s2 = _ou_rates(theta, epsilon)
    mu = theta.mu
    m_u, m_g = prior.mean
    v_u, v_g = prior.cov[0, 0], prior.cov[1, 1]
    c = prior.cov[0, 1]

    e = math.exp(-d * T)
    b = float(_relax(d, T))
    v_int = float(_integral_noise_variance(d, s2, T))
    cov_int_rate = s2 / (2 * d * d) * math.expm1(-d * T) ** 2

    # z = -Gamma_T: mean, variance and covariances with u_0 and gamma_0
    z_mean = -mu * T - b * (m_g - mu)
    z_var = b * b * v_g + v_int
    common = math.exp(z_mean + 0.5 * z_var)
    shifted_u = m_u - b * c  # <u_0> + Cov(u_0, z)

    a1 = common * shifted_u
    a2 = math.exp(2 * z_mean + 2 * z_var) * (v_u + (m_u - 2 * b * c) ** 2)
    a_g0 = common * (c + shifted_u * (m_g - b * v_g))
    a_xi = common * shifted_u * (-cov_int_rate)

    g_mean = mu + (m_g - mu) * e
    g_var = e * e * v_g + s2 * float(_relax(2 * d, T))

    gamma0 = Gaussian1(m_g, v_g)
    forcing = 0.0
    if sigma_u > 0 and s2 == 0 and v_g == 0 and m_g == mu:
        # the damping sits at mu for all time: the frozen-rate forcing is exact
        forcing = msm_predict(Gaussian1(0.0, 0.0), mu, sigma_u, T).variance
    elif sigma_u > 0:
        forcing = sigma_u**2 * trapezoid(
            lambda s: ou_integral_mgf(theta, gamma0, -2.0, s, T, epsilon), 0.0, T, quad_nodes
        )
    var_u = a2 - a1 * a1 + forcing
    cov_ug = mu * (1 - e) * a1 + e * a_g0 + a_xi - a1 * g_mean
    cov = np.array([[var_u, cov_ug], [cov_ug, g_var]])
    return Gaussian2([a1, g_mean], clip_psd(cov))


def dmsm_predict(
    prior: GaussianMixture, gamma_pm: tuple[float, float], sigma_u: float, T: float
) -> GaussianMixture:
    """Forecast each labeled kernel with its frozen mode rate; weights unchanged."""
    rates = {"+": gamma_pm[0], "-": gamma_pm[1]}
    out = []
    for k in prior.kernels:
        if k.label not in rates:
            raise ValueError("dMSM kernels must be labeled '+' or '-'")
        out.append(MixtureKernel(k.weight, msm_predict(k.dist.u_marginal(), rates[k.label], sigma_u, T), k.label))
    return GaussianMixture(tuple(out))


def ddsm_predict(
    prior: GaussianMixture,
    theta2: ThetaDDSM,
    sigma_u: float,
    epsilon: float,
    T: float,
    quad_nodes: int = DEFAULT_QUAD_NODES,
) -> GaussianMixture:
    """Per-mode SPEKF forecast of labeled ``(u, gamma)`` kernels; weights unchanged."""
    out = []
    for k in prior.kernels:
        if k.label not in ("+", "-"):
            raise ValueError("dDSM kernels must be labeled '+' or '-'")
        if not isinstance(k.dist, Gaussian2):
            raise TypeError("dDSM kernels must be joint (u, gamma) Gaussians")
        pred = spekf_predict(k.dist, theta2.mode(k.label), sigma_u, epsilon, T, quad_nodes)
        out.append(MixtureKernel(k.weight, pred, k.label))
    return GaussianMixture(tuple(out))


# ---------------------------------------------------------------------------
# filter cycle


@dataclass(frozen=True)
class ReducedSettings:
    """Numerical and structural options of the reduced filters.

    ``ddsm_gamma_init`` chooses the damping law each dDSM kernel starts a
    forecast window from: ``"mode_value"`` restarts at ``gamma_+/-`` with zero
    variance, ``"stationary"`` restarts at ``N(mu_+/-, sigma_+/-^2 / (2 nu_+/-))``,
    ``"carry"`` keeps the kernel's own posterior damping law.
    """

    sigma_u: float
    epsilon: float
    gamma_bar: float = 1.5
    gamma_pm: tuple[float, float] = (2.27, -0.04)
    quad_nodes: int = DEFAULT_QUAD_NODES
    k_max: int = 1
    ddsm_gamma_init: Literal["mode_value", "stationary", "carry"] = "mode_value"


def ddsm_kernel_start(
    u: Gaussian1, label: Mode, theta2: ThetaDDSM, settings: ReducedSettings, carried: Gaussian2 | None = None
) -> Gaussian2:
    """Joint ``(u, gamma)`` law a dDSM kernel starts its forecast from."""
    if settings.ddsm_gamma_init == "mode_value":
        g = Gaussian1(settings.gamma_pm[0] if label == "+" else settings.gamma_pm[1], 0.0)
        return Gaussian2.independent(u, g)
    if settings.ddsm_gamma_init == "stationary":
        th = theta2.mode(label)
        return Gaussian2.independent(u, Gaussian1(th.mu, th.stationary_variance()))
    if settings.ddsm_gamma_init == "carry":
        if carried is None:
            raise ValueError("carry initialization needs the kernel's previous law")
        # replace the u-marginal and keep the u-gamma correlation coefficient
        cov = carried.cov
        denom = math.sqrt(cov[0, 0] * cov[1, 1])
        rho = cov[0, 1] / denom if denom > 0 else 0.0
        c = rho * math.sqrt(u.variance * cov[1, 1])
        return Gaussian2([u.mean, carried.mean[1]], [[u.variance, c], [c, cov[1, 1]]])
    raise ValueError(f"unknown dDSM initialization {settings.ddsm_gamma_init!r}")


def _collapse(mix: GaussianMixture, k_max: int) -> GaussianMixture:
    """Reduce a labeled posterior: the u-marginals are merged when ``k_max == 1``.

    The mode weights always survive; for ``k_max == 1`` every kernel receives
    the same moment-matched ``u`` law.
    """
    if k_max >= len(mix):
        return mix
    if k_max == 1:
        u = moment_match(mix.u_marginal())
        return GaussianMixture(
            tuple(MixtureKernel(k.weight, _with_u(k.dist, u), k.label) for k in mix.kernels)
        )
    return merge_to(mix, k_max)


def _with_u(dist, u: Gaussian1):
    if isinstance(dist, Gaussian2):
        cov = np.array(dist.cov)
        cov[0, 0] = u.variance
        cov[0, 1] = cov[1, 0] = 0.0
        return Gaussian2([u.mean, dist.mean[1]], cov)
    return u


def reduced_filter_step(
    state,
    model: ReducedModel,
    settings: ReducedSettings,
    y: float,
    obs: ObservationModel,
    theta: ThetaDSM | ThetaDDSM | None = None,
    step: int = 0,
):
    """Forecast over one window then assimilate ``y``.

    ``state`` is a :class:`Gaussian1` (MSM), :class:`Gaussian2` (DSM), or a
    labeled :class:`GaussianMixture` (dMSM with ``Gaussian1`` kernels, dDSM
    with ``Gaussian2`` kernels).  Returns ``(posterior_state, StepRecord)``.
    """
    T, R = obs.schedule, obs.r_n
    if model == "MSM":
        prior = msm_predict(state, settings.gamma_bar, settings.sigma_u, T)
        post, _ = kalman_update(prior, y, R)
        return post, StepRecord(step, y, prior, post)
    if model == "DSM":
        if not isinstance(theta, ThetaDSM):
            raise TypeError("DSM needs a ThetaDSM")
        prior = spekf_predict(state, theta, settings.sigma_u, settings.epsilon, T, settings.quad_nodes)
        post, _ = joint_kalman_update(prior, y, R)
        return post, StepRecord(step, y, prior.u_marginal(), post.u_marginal())
    if model == "dMSM":
        prior = dmsm_predict(state, settings.gamma_pm, settings.sigma_u, T)
        post = mixture_update(prior, y, R)
        record = StepRecord(
            step, y, moment_match(prior), moment_match(post), tuple(post.weights)
        )
        return _collapse(post, settings.k_max), record
    if model == "dDSM":
        if not isinstance(theta, ThetaDDSM):
            raise TypeError("dDSM needs a ThetaDDSM")
        prior = ddsm_predict(state, theta, settings.sigma_u, settings.epsilon, T, settings.quad_nodes)
        post = mixture_update(prior, y, R)
        record = StepRecord(
            step,
            y,
            moment_match(prior.u_marginal()),
            moment_match(post.u_marginal()),
            tuple(post.weights),
        )
        collapsed = _collapse(post, settings.k_max)
        restarted = GaussianMixture(
            tuple(
                MixtureKernel(
                    k.weight,
                    ddsm_kernel_start(k.dist.u_marginal(), k.label, theta, settings, carried=pk.dist),
                    k.label,
                )
                for k, pk in zip(collapsed.kernels, post.kernels)
            )
        )
        return restarted, record
    raise ValueError(f"unknown reduced model {model!r}")


def ddsm_initial_state(
    u0: Gaussian1, theta2: ThetaDDSM, settings: ReducedSettings, gamma0: dict | None = None
) -> GaussianMixture:
    """Labeled dDSM mixture at time zero with weights ``(rho_+, rho_-)``.

    ``gamma0`` optionally maps labels to user-specified damping laws.
    """
    kernels = []
    for label, w in (("+", theta2.rho_plus), ("-", theta2.rho_minus)):
        if w <= 0:
            continue
        if gamma0 and label in gamma0:
            dist = Gaussian2.independent(u0, gamma0[label])
        else:
            start = settings if settings.ddsm_gamma_init != "carry" else _as_mode_value(settings)
            dist = ddsm_kernel_start(u0, label, theta2, start)
        kernels.append(MixtureKernel(w, dist, label))
    return GaussianMixture.from_parts([k.weight for k in kernels], [k.dist for k in kernels], [k.label for k in kernels])


def dmsm_initial_state(u0: Gaussian1, rho_plus: float) -> GaussianMixture:
    kernels = [(w, lab) for lab, w in (("+", rho_plus), ("-", 1 - rho_plus)) if w > 0]
    return GaussianMixture.from_parts([w for w, _ in kernels], [u0] * len(kernels), [lab for _, lab in kernels])


def _as_mode_value(settings: ReducedSettings) -> ReducedSettings:
    return replace(settings, ddsm_gamma_init="mode_value")
