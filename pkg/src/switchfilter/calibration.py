"""Parameters of the OU-damping surrogates: closed-form sets and calibration.

Calibration fits ``(mu, nu, sigma)`` so that a single SPEKF forecast matches
the reference forecast of the switching model,

    J = kappa |<u_T> - <u_T>_ref|^2 + |Var(u_T) - Var(u_T)_ref|^2,

minimized by Nelder-Mead in ``(mu, log nu, log sigma)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .gaussian import Gaussian1, Gaussian2
from .quadrature import DEFAULT_QUAD_NODES
from .reduced import ThetaDDSM, ThetaDSM, spekf_predict
from .ssm_filters import MgfSettings, mode_conditioned_forecast
from .switching import ModeDistribution, SwitchingParams, stationary_distribution, stationary_mode_stats


@dataclass(frozen=True)
class CalibrationConfig:
    kappa: float = 0.0
    optimizer: str = "simplex"
    tol: float = 1e-8
    max_iter: int = 500
    continuation_eps: tuple[float, ...] | None = None
    averaging_window: int = 50
    continuation_levels: int = 5

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.optimizer != "simplex":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class MinimizeResult:
    theta: ThetaDSM
    value: float
    n_iter: int
    hit_max_iter: bool


# ---------------------------------------------------------------------------
# closed-form parameter sets


def theta_naive(params: SwitchingParams) -> ThetaDSM:
    """OU parameters matching the small-eps expansion of the damping MGF.

    ``mu = g_inf``, ``nu = (8/3) l-^2 l+^2 / ((l- + l+)(l+^2 + l-^2))`` and
    ``sigma^2 = (16/3) l-^3 l+^3 (g- - g+)^2 / ((l- + l+)^3 (l+^2 + l-^2))``.
    """
    lp, lm = params.lambda_plus, params.lambda_minus
    mu, _ = stationary_mode_stats(params)
    nu = 8.0 / 3.0 * lm**2 * lp**2 / ((lm + lp) * (lp**2 + lm**2))
    sigma2 = (
        16.0 / 3.0 * lm**3 * lp**3 * (params.gamma_minus - params.gamma_plus) ** 2
        / ((lm + lp) ** 3 * (lp**2 + lm**2))
    )
    return ThetaDSM(mu, nu, math.sqrt(sigma2))


def theta_prime_naive(params: SwitchingParams, T: float) -> ThetaDDSM:
    """Per-mode OU parameters matching the fixed-horizon large-eps expansion.

    With ``V = Var(gamma_inf)``: ``mu_+/- = 2 T V + gamma_+/-``,
    ``nu_+/- = 3 l_+/- / (2 T^2 V)`` and ``sigma_+/-^2 = 3 l_+/- / T^2``.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    _, var = stationary_mode_stats(params)
    rho = stationary_distribution(params).p_plus

    def mode(gamma, lam):
        return ThetaDSM(2 * T * var + gamma, 1.5 * lam / (T * T * var), math.sqrt(3 * lam / T**2))

    return ThetaDDSM(
        rho,
        mode(params.gamma_plus, params.lambda_plus),
        mode(params.gamma_minus, params.lambda_minus),
    )


# ---------------------------------------------------------------------------
# objective


def moment_discrepancy(reference: Gaussian1, approx: Gaussian1, kappa: float) -> float:
    return kappa * (approx.mean - reference.mean) ** 2 + (approx.variance - reference.variance) ** 2


def objective_J(
    theta: ThetaDSM,
    filter_state: Gaussian2,
    params: SwitchingParams,
    obs_T: float,
    kappa: float = 0.0,
    quad_nodes: int = DEFAULT_QUAD_NODES,
    reference: Gaussian1 | None = None,
    mode0: ModeDistribution | None = None,
) -> float:
    """Squared moment mismatch between one SPEKF and one reference forecast.

    The reference starts from the u-marginal of ``filter_state`` with the
    damping mode drawn from ``mode0`` (stationary by default), independent of
    ``u``; it may be passed precomputed as ``reference``.
    """
    if reference is None:
        init = mode0 if mode0 is not None else stationary_distribution(params)
        reference = mode_conditioned_forecast(
            params, filter_state.u_marginal(), init, obs_T, MgfSettings(quad_nodes=quad_nodes)
        )
    pred = spekf_predict(filter_state, theta, params.sigma_u, params.epsilon, obs_T, quad_nodes)
    return moment_discrepancy(reference, pred.u_marginal(), kappa)


# ---------------------------------------------------------------------------
# optimizer


def _to_x(theta: ThetaDSM) -> np.ndarray:
    return np.array([theta.mu, math.log(theta.nu), math.log(theta.sigma)])


def _from_x(x) -> ThetaDSM:
    return ThetaDSM(float(x[0]), math.exp(x[1]), math.exp(x[2]))


def minimize_theta(
    start: ThetaDSM,
    objective: Callable[[ThetaDSM], float],
    config: CalibrationConfig = CalibrationConfig(),
) -> MinimizeResult:
    """Local Nelder-Mead minimization in ``(mu, log nu, log sigma)``.

    Stops when the simplex diameter drops below ``config.tol`` and the
    objective spread below ``config.tol`` times the starting value, or after
    ``config.max_iter`` iterations (reported by ``hit_max_iter``).
    """

    def f(x):
        if not np.all(np.abs(x[1:]) < 50):
            return np.inf
        try:
            val = objective(_from_x(x))
        except (ValueError, OverflowError, FloatingPointError):
            return np.inf
        return val if np.isfinite(val) else np.inf

    x0 = _to_x(start)
    f0 = f(x0)
    scale = f0 if np.isfinite(f0) and f0 > 0 else 1.0
    res = minimize(
        f,
        x0,
        method="Nelder-Mead",
        options={
            "xatol": config.tol,
            "fatol": config.tol * scale,
            "maxiter": config.max_iter,
            "maxfev": 4 * config.max_iter,
        },
    )
    x_best, f_best = (res.x, float(res.fun)) if res.fun <= f0 else (x0, f0)
    hit = not res.success and res.nit >= config.max_iter
    return MinimizeResult(_from_x(x_best), f_best, int(res.nit), bool(hit))


def continuation_ladder(epsilon: float, config: CalibrationConfig) -> list[float]:
    """Epsilon values solved in order, ending at ``epsilon``."""
    if config.continuation_eps is not None:
        ladder = sorted(e for e in config.continuation_eps if e < epsilon)
        return ladder + [epsilon]
    lo = min(epsilon, 0.01)
    if lo >= epsilon:
        return [epsilon]
    return list(np.geomspace(lo, epsilon, config.continuation_levels))


@dataclass
class DynamicCalibrator:
    """Per-step DSM calibration warm-started from the previous step's optimum.

    Call :meth:`step` with the current DSM posterior before each forecast.
    The first call solves an epsilon-continuation ladder starting from the
    closed-form small-eps set.
    """

    params: SwitchingParams
    obs_T: float
    config: CalibrationConfig = field(default_factory=CalibrationConfig)
    quad_nodes: int = DEFAULT_QUAD_NODES
    mode0: ModeDistribution | None = None
    history: list[ThetaDSM] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    flags: list[bool] = field(default_factory=list)

    def _solve(self, params, state, start):
        init = self.mode0 if self.mode0 is not None else stationary_distribution(params)
        reference = mode_conditioned_forecast(
            params, state.u_marginal(), init, self.obs_T, MgfSettings(quad_nodes=self.quad_nodes)
        )

        def obj(theta):
            return objective_J(theta, state, params, self.obs_T, self.config.kappa, self.quad_nodes, reference)

        return minimize_theta(start, obj, self.config)

    def step(self, state: Gaussian2) -> ThetaDSM:
        if self.history:
            res = self._solve(self.params, state, self.history[-1])
        else:
            theta = theta_naive(self.params)
            for eps in continuation_ladder(self.params.epsilon, self.config):
                res = self._solve(self.params.with_epsilon(eps), state, theta)
                theta = res.theta
        self.history.append(res.theta)
        self.values.append(res.value)
        self.flags.append(res.hit_max_iter)
        return res.theta


def static_calibration(sequence: Sequence[ThetaDSM], window: int = 50) -> ThetaDSM:
    """Componentwise time average of the first ``window`` calibrated sets."""
    if not sequence:
        raise ValueError("need at least one calibrated parameter set")
    arr = np.array([t.as_array() for t in sequence[:window]])
    return ThetaDSM.from_array(arr.mean(axis=0))


def static_calibration_ddsm(sequence: Sequence[ThetaDDSM], window: int = 50) -> ThetaDDSM:
    if not sequence:
        raise ValueError("need at least one calibrated parameter set")
    seq = sequence[:window]
    return ThetaDDSM(
        seq[0].rho_plus,
        static_calibration([t.plus for t in seq], window),
        static_calibration([t.minus for t in seq], window),
    )


@dataclass
class DualModeCalibrator:
    """Per-mode dynamic calibration of the dual-mode DSM.

    Each mode's SPEKF forecast, started from that kernel's ``(u, gamma)`` law,
    is fitted to the reference forecast conditioned on the initial mode.  The
    mode probabilities stay at their stationary values.
    """

    params: SwitchingParams
    obs_T: float
    config: CalibrationConfig = field(default_factory=CalibrationConfig)
    quad_nodes: int = DEFAULT_QUAD_NODES
    history: list[ThetaDDSM] = field(default_factory=list)
    values: list[tuple[float, float]] = field(default_factory=list)

    def _solve_mode(self, params, state: Gaussian2, label, start: ThetaDSM):
        reference = mode_conditioned_forecast(
            params, state.u_marginal(), ModeDistribution.pure(label), self.obs_T,
            MgfSettings(quad_nodes=self.quad_nodes),
        )

        def obj(theta):
            return objective_J(theta, state, params, self.obs_T, self.config.kappa, self.quad_nodes, reference)

        return minimize_theta(start, obj, self.config)

    def step(self, kernels: dict) -> ThetaDDSM:
        """``kernels`` maps ``'+'``/``'-'`` to the kernel's starting :class:`Gaussian2`."""
        if self.history:
            prev = self.history[-1]
            res = {lab: self._solve_mode(self.params, kernels[lab], lab, prev.mode(lab)) for lab in ("+", "-")}
        else:
            start = theta_prime_naive(self.params, self.obs_T)
            res = {}
            for lab in ("+", "-"):
                theta = start.mode(lab)
                for eps in continuation_ladder(self.params.epsilon, self.config):
                    r = self._solve_mode(self.params.with_epsilon(eps), kernels[lab], lab, theta)
                    theta = r.theta
                res[lab] = r
        rho = stationary_distribution(self.params).p_plus
        theta2 = ThetaDDSM(rho, res["+"].theta, res["-"].theta)
        self.history.append(theta2)
        self.values.append((res["+"].value, res["-"].value))
        return theta2


def calibrate_ddsm_step(
    params: SwitchingParams,
    kernels: dict,
    start: ThetaDDSM,
    obs_T: float,
    config: CalibrationConfig = CalibrationConfig(),
    quad_nodes: int = DEFAULT_QUAD_NODES,
) -> ThetaDDSM:
    """One per-mode calibration from ``start`` (no continuation)."""
    cal = DualModeCalibrator(params, obs_T, config, quad_nodes, history=[start])
    return cal.step(kernels)
