"""Analytic machinery for the two-state jump process gamma(t).

The damping rate jumps between ``gamma_plus`` and ``gamma_minus`` with
exponential holding times of rates ``lambda_plus / epsilon`` and
``lambda_minus / epsilon``.  This module provides its transition law, the law
of the number of transitions ``N_t`` and the moment generating function (MGF)
of the integral process ``Gamma_t = int_0^t gamma(s) ds`` in three forms:

* an exact series over the number of transitions, each term written with the
  incomplete beta-type integral ``B(m, n; z)`` (a Kummer function),
* an exact closed form from the 2x2 Feynman-Kac generator (cosh/sinh form),
* asymptotic exponential expansions for small and large ``epsilon``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from scipy.special import gammaln, hyp1f1

logger = logging.getLogger(__name__)

Mode = Literal["+", "-"]

DEFAULT_N_TERMS = 30


class MgfTruncationError(RuntimeError):
    """The certified tail bound of a truncated series exceeds the tolerance."""


@dataclass(frozen=True)
class SwitchingParams:
    """Constants of the switching truth model.

    ``lambda_plus`` / ``lambda_minus`` are the unscaled switching intensities;
    the effective rates are ``lambda / epsilon`` (see :attr:`rate_plus`).
    """

    gamma_plus: float
    gamma_minus: float
    lambda_plus: float
    lambda_minus: float
    epsilon: float
    sigma_u: float

    def __post_init__(self):
        for name in ("lambda_plus", "lambda_minus", "epsilon"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value}")
        if not (np.isfinite(self.sigma_u) and self.sigma_u >= 0):
            raise ValueError(f"sigma_u must be nonnegative, got {self.sigma_u}")
        if not (np.isfinite(self.gamma_plus) and np.isfinite(self.gamma_minus)):
            raise ValueError("gamma values must be finite")

    @classmethod
    def standard(cls, epsilon: float = 1.0) -> "SwitchingParams":
        return cls(
            gamma_plus=2.27,
            gamma_minus=-0.04,
            lambda_plus=1.0,
            lambda_minus=2.0,
            epsilon=epsilon,
            sigma_u=0.1549,
        )

    @property
    def rate_plus(self) -> float:
        return self.lambda_plus / self.epsilon

    @property
    def rate_minus(self) -> float:
        return self.lambda_minus / self.epsilon

    def gamma(self, mode: Mode) -> float:
        return self.gamma_plus if mode == "+" else self.gamma_minus

    def with_epsilon(self, epsilon: float) -> "SwitchingParams":
        return replace(self, epsilon=epsilon)


@dataclass(frozen=True)
class ModeDistribution:
    """Probabilities of the two modes, ``(P(gamma=gamma_+), P(gamma=gamma_-))``."""

    p_plus: float
    p_minus: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.p_minus is None:
            object.__setattr__(self, "p_minus", 1.0 - self.p_plus)
        for p in (self.p_plus, self.p_minus):
            if not (-1e-12 <= p <= 1 + 1e-12):
                raise ValueError(f"mode probabilities must lie in [0, 1], got {p}")
        if abs(self.p_plus + self.p_minus - 1.0) > 1e-12:
            raise ValueError(
                f"mode probabilities must sum to 1, got {self.p_plus + self.p_minus}"
            )
        object.__setattr__(self, "p_plus", float(min(max(self.p_plus, 0.0), 1.0)))
        object.__setattr__(self, "p_minus", float(min(max(self.p_minus, 0.0), 1.0)))

    @classmethod
    def pure(cls, mode: Mode) -> "ModeDistribution":
        return cls(1.0, 0.0) if mode == "+" else cls(0.0, 1.0)

    @classmethod
    def from_array(cls, p) -> "ModeDistribution":
        p = np.asarray(p, dtype=float)
        s = p.sum()
        return cls(float(p[0] / s), float(p[1] / s))

    def as_array(self) -> np.ndarray:
        return np.array([self.p_plus, self.p_minus])

    @property
    def pure_mode(self) -> Mode | None:
        if self.p_plus == 1.0:
            return "+"
        if self.p_minus == 1.0:
            return "-"
        return None


@dataclass(frozen=True)
class MgfRequest:
    """What MGF to evaluate: ``<exp(alpha (Gamma_{t_hi} - Gamma_{t_lo})) | init>``.

    ``conditioning`` is the law of ``gamma(0)``; a pure distribution encodes
    conditioning on ``gamma_0 = gamma_+`` or ``gamma_-``.
    """

    alpha: float
    t_hi: float
    t_lo: float = 0.0
    conditioning: ModeDistribution = ModeDistribution(1.0, 0.0)

    def __post_init__(self):
        if not (0 <= self.t_lo <= self.t_hi):
            raise ValueError(f"need 0 <= t_lo <= t_hi, got {self.t_lo}, {self.t_hi}")

    @property
    def duration(self) -> float:
        return self.t_hi - self.t_lo


@dataclass(frozen=True)
class MgfSeriesResult:
    value: float
    tail_bound: float
    n_terms: int

    def __float__(self) -> float:
        return self.value


# ---------------------------------------------------------------------------
# transition law


def transition_matrix(params: SwitchingParams, t) -> np.ndarray:
    """Row-stochastic matrix ``P[i, j] = P(gamma_t = j | gamma_0 = i)``.

    ``t`` may be an array; the matrix axes are then the last two.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("transition time must be nonnegative")
    a, b = params.rate_plus, params.rate_minus
    s = a + b
    decay = np.exp(-s * t)
    p = np.empty(t.shape + (2, 2))
    p[..., 0, 0] = (b + a * decay) / s
    p[..., 0, 1] = (a - a * decay) / s
    p[..., 1, 0] = (b - b * decay) / s
    p[..., 1, 1] = (a + b * decay) / s
    return p


def transition_probs(
    params: SwitchingParams, init: ModeDistribution, t: float
) -> ModeDistribution:
    """Law of ``gamma(t)`` started from ``init``."""
    if t < 0:
        raise ValueError(f"transition time must be nonnegative, got {t}")
    p = init.as_array() @ transition_matrix(params, t)
    return ModeDistribution.from_array(p)


def stationary_distribution(params: SwitchingParams) -> ModeDistribution:
    total = params.lambda_plus + params.lambda_minus
    return ModeDistribution(params.lambda_minus / total, params.lambda_plus / total)


def stationary_mode_stats(params: SwitchingParams) -> tuple[float, float]:
    """Mean and variance of the stationary two-point law of gamma."""
    lp, lm = params.lambda_plus, params.lambda_minus
    total = lp + lm
    mean = (lm * params.gamma_plus + lp * params.gamma_minus) / total
    var = lp * lm * (params.gamma_plus - params.gamma_minus) ** 2 / total**2
    return mean, var


# ---------------------------------------------------------------------------
# series machinery


def _oriented(params: SwitchingParams, mode: Mode):
    """Rates and levels seen from the starting mode (the +/- symbol exchange)."""
    if mode == "+":
        return params.rate_plus, params.rate_minus, params.gamma_plus, params.gamma_minus
    return params.rate_minus, params.rate_plus, params.gamma_minus, params.gamma_plus


def _log_kummer(a, b, z):
    """``log M(a, b, z)`` for ``0 < a <= b``, using Kummer's transform for z < 0.

    After the transform the hypergeometric series has only positive terms.
    """
    a, b, z = np.broadcast_arrays(
        np.asarray(a, float), np.asarray(b, float), np.asarray(z, float)
    )
    neg = z < 0
    aa = np.where(neg, b - a, a)
    zz = np.abs(z)
    return np.where(neg, z, 0.0) + np.log(hyp1f1(aa, b, zz))


def _series_terms(params: SwitchingParams, alpha: float, tau, mode: Mode, n_terms: int):
    """Terms ``E[exp(alpha Gamma_tau); N_tau = n | gamma_0 = mode]``, n < n_terms.

    Returns an array of shape ``tau.shape + (n_terms,)``.

    With ``k`` completed sojourns in the far mode, the even-n term is
    ``exp((alpha g0 - r0) tau) (r0 r1 tau^2)^k / (2k)! M(k, 2k+1, c tau)``,
    ``c = r0 - r1 + alpha (g1 - g0)``, and the odd-n term
    ``exp((alpha g1 - r1) tau) r0^(k+1) r1^k tau^(2k+1) / (2k+1)! M(k+1, 2k+2, d tau)``,
    ``d = -c``.  Both come from integrating the gamma densities of the
    completed sojourns against the survival of the last one; the resulting
    integrals are ``B(m, n; z) = B(m, n) M(m, m+n, z)``.
    """
    r0, r1, g0, g1 = _oriented(params, mode)
    tau = np.asarray(tau, dtype=float)
    n = np.arange(n_terms)
    tt = tau[..., None]
    c = r0 - r1 + alpha * (g1 - g0)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_tau = np.log(tt)
        k_even = n // 2
        log_even = (
            (alpha * g0 - r0) * tt
            + k_even * (np.log(r0 * r1) + 2 * log_tau)
            - gammaln(2 * k_even + 1)
            + _log_kummer(np.maximum(k_even, 1), 2 * k_even + 1, c * tt)
        )
        k_odd = (n - 1) // 2
        log_odd = (
            (alpha * g1 - r1) * tt
            + (k_odd + 1) * np.log(r0)
            + k_odd * np.log(r1)
            + (2 * k_odd + 1) * log_tau
            - gammaln(2 * k_odd + 2)
            + _log_kummer(k_odd + 1, 2 * k_odd + 2, -c * tt)
        )
    log_terms = np.where(n % 2 == 0, log_even, log_odd)
    log_terms = np.where(n == 0, (alpha * g0 - r0) * tt, log_terms)
    terms = np.exp(log_terms)
    # zero duration: only the n = 0 term survives
    terms = np.where((tt == 0) & (n > 0), 0.0, terms)
    return terms


def _sojourn_counts(n, mode: Mode, params: SwitchingParams):
    """Completed sojourns (in + mode, in - mode) after n transitions from ``mode``."""
    n = np.asarray(n)
    first = (n + 1) // 2
    second = n // 2
    return (first, second) if mode == "+" else (second, first)


def transition_count_term_bound(
    params: SwitchingParams, n, t: float, from_mode: Mode = "+"
) -> np.ndarray:
    """Termwise bound on ``P(N_t = n | gamma_0 = from_mode)``.

    ``C(n) t^n / n! + C(n+1) t^(n+1) / (n+1)!`` with ``C(k) = r+^i r-^j`` for the
    ``i``/``j`` completed sojourns of each mode in ``k`` transitions; for even
    ``n`` from ``+`` this is the Weierstrass majorant
    ``(l-/l+)^(n/2) (l+ t)^n / n! + (l+/l-)^(n/2+1) (l- t)^(n+1) / (n+1)!``.
    """
    n = np.asarray(n)

    def part(k):
        i, j = _sojourn_counts(k, from_mode, params)
        with np.errstate(divide="ignore", over="ignore"):
            log = (
                i * math.log(params.rate_plus)
                + j * math.log(params.rate_minus)
                + k * np.log(t if t > 0 else 0.0)
                - gammaln(k + 1)
            )
            return np.where(k == 0, 1.0, np.exp(log))

    with np.errstate(over="ignore"):
        return part(n) + part(n + 1)


def transition_count_tail_bound(
    params: SwitchingParams, n: int, t: float, from_mode: Mode = "+"
) -> float:
    """Certified upper bound on ``P(N_t >= n | gamma_0 = from_mode)``.

    Minimum of the Chernoff bound on the arrival time of the n-th transition,
    ``P(T_n <= t) <= exp(theta t) E exp(-theta T_n)``, and the summed termwise
    majorant of :func:`transition_count_term_bound`.
    """
    if n <= 0:
        return 1.0
    if t <= 0:
        return 0.0
    i, j = _sojourn_counts(n, from_mode, params)
    a, b = params.rate_plus, params.rate_minus
    chernoff = 1.0
    if t < i / a + j / b:
        # stationary point of theta t - i log(1 + theta/a) - j log(1 + theta/b)
        qb = t * (a + b) - i - j
        qc = t * a * b - i * b - j * a
        disc = qb * qb - 4 * t * qc
        with np.errstate(over="ignore", divide="ignore"):
            theta = np.float64(-qb + math.sqrt(disc)) / np.float64(2 * t) if math.isfinite(disc) else math.inf
        if math.isfinite(theta):
            log_bound = theta * t - i * math.log1p(theta / a) - j * math.log1p(theta / b)
            chernoff = math.exp(min(log_bound, 0.0))
    # summed majorant; terms eventually decay like (r t)^k / k!
    rmax = max(a, b)
    extra = int(n + 10 + 4 * rmax * t)
    majorant = float(np.sum(transition_count_term_bound(params, np.arange(n, extra), t, from_mode)))
    majorant += 2 * float(transition_count_term_bound(params, np.array([extra]), t, from_mode)[0])
    return float(min(1.0, chernoff, majorant))


def prob_num_transitions(
    params: SwitchingParams, n, t: float, from_mode: Mode = "+"
) -> np.ndarray | float:
    """``P(N_t = n | gamma_0 = from_mode)`` for the alternating renewal process.

    Equal rates give the Poisson law with mean ``lambda t / epsilon``.
    """
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    n_arr = np.atleast_1d(np.asarray(n))
    if np.any(n_arr < 0):
        raise ValueError("transition count must be nonnegative")
    if params.lambda_plus == params.lambda_minus:
        lam_t = params.rate_plus * t
        with np.errstate(divide="ignore"):
            out = np.exp(-lam_t + n_arr * np.log(lam_t) - gammaln(n_arr + 1)) if t > 0 else (n_arr == 0) * 1.0
    else:
        terms = _series_terms(params, 0.0, np.array(t), from_mode, int(n_arr.max()) + 1)
        out = terms[n_arr]
    out = np.asarray(out, dtype=float)
    return float(out[0]) if np.ndim(n) == 0 else out


# ---------------------------------------------------------------------------
# conditional MGFs of Gamma_tau


def _two_state_mgf(params: SwitchingParams, alpha: float, tau, mode: Mode) -> np.ndarray:
    """Exact ``<exp(alpha Gamma_tau) | gamma_0 = mode>`` from the generator.

    ``m(tau) = exp(tau (Q + alpha diag(gamma))) 1``; with ``s`` and ``D`` the
    mean and half-gap of the eigenvalues this is
    ``exp(s tau) (cosh(D tau) + (h +/- r) / D sinh(D tau))``.
    """
    tau = np.asarray(tau, dtype=float)
    a, b = params.rate_plus, params.rate_minus
    d_plus = alpha * params.gamma_plus - a
    d_minus = alpha * params.gamma_minus - b
    s = 0.5 * (d_plus + d_minus)
    h = 0.5 * (d_plus - d_minus)
    gap = math.sqrt(h * h + a * b)
    coef = (h + a) / gap if mode == "+" else (b - h) / gap
    decay = np.exp(-2 * gap * tau)
    # cosh(D tau) + coef sinh(D tau), written against exp((s + D) tau) to avoid overflow
    return np.exp((s + gap) * tau) * (0.5 * (1 + decay) + 0.5 * coef * (1 - decay))


def mgf_closed_equal_rates(params: SwitchingParams, req: MgfRequest) -> float:
    """Closed-form ``<exp(alpha Gamma_t) | gamma_0>`` when ``lambda_+ = lambda_-``.

    With ``lam = lambda / epsilon``, ``s = -lam + alpha (g+ + g-) / 2``,
    ``h = alpha (g+ - g-) / 2`` and ``D = sqrt(h^2 + lam^2)``::

        <exp(alpha Gamma_t) | gamma_0 = g+> = exp(s t) (cosh(D t) + (h + lam) / D sinh(D t))

    and the ``g-`` case follows from ``h -> -h``.  At ``alpha = 0`` it
    collapses to ``exp(-lam t) (cosh(lam t) + sinh(lam t)) = 1``.
    """
    if params.lambda_plus != params.lambda_minus:
        raise ValueError("closed form requires lambda_plus == lambda_minus")
    return _weighted_mgf(params, req, engine="closed")


def mgf_series_distinct_rates(
    params: SwitchingParams,
    req: MgfRequest,
    n_terms: int = DEFAULT_N_TERMS,
    tol: float | None = None,
) -> MgfSeriesResult:
    """Truncated series over the number of transitions.

    Returns the partial sum over ``n < n_terms`` together with a certified
    bound on the neglected tail, ``max(e^{alpha g+ t}, e^{alpha g- t}) P(N_t >= n_terms)``.
    Raises :class:`MgfTruncationError` if ``tol`` is given and the bound
    exceeds it.
    """
    if n_terms < 1:
        raise ValueError("n_terms must be at least 1")
    mode = req.conditioning.pure_mode
    if mode is None or req.t_lo != 0:
        raise ValueError("series form needs a pure starting mode and t_lo = 0")
    t = req.t_hi
    value = float(_series_terms(params, req.alpha, np.array(t), mode, n_terms).sum())
    tail = _series_tail_bound(params, req.alpha, t, mode, n_terms)
    if tol is not None and tail > tol:
        raise MgfTruncationError(
            f"series tail bound {tail:.3e} exceeds tolerance {tol:.3e} "
            f"with {n_terms} terms at t={t}, epsilon={params.epsilon}"
        )
    return MgfSeriesResult(value, tail, n_terms)


def _series_tail_bound(params, alpha, t, mode, n_terms) -> float:
    envelope = max(math.exp(alpha * params.gamma_plus * t), math.exp(alpha * params.gamma_minus * t))
    return envelope * transition_count_tail_bound(params, n_terms, t, mode)


def conditional_mgf(
    params: SwitchingParams,
    alpha: float,
    tau,
    mode: Mode,
    engine: str = "auto",
    n_terms: int = DEFAULT_N_TERMS,
    tail_tol: float = 1e-10,
) -> np.ndarray:
    """Vectorized ``<exp(alpha Gamma_tau) | gamma_0 = mode>`` over durations ``tau``.

    ``engine``: ``"closed"`` (exact generator form, any rates), ``"series"``
    (``n_terms`` partial sum), or ``"auto"``: closed form for equal rates,
    otherwise the series when its tail bound is below ``tail_tol`` at the
    longest duration, else the exact generator form.
    """
    tau = np.asarray(tau, dtype=float)
    if engine == "auto":
        if params.lambda_plus == params.lambda_minus:
            engine = "closed"
        else:
            tmax = float(tau.max()) if tau.size else 0.0
            ok = _series_tail_bound(params, alpha, tmax, mode, n_terms) <= tail_tol
            engine = "series" if ok else "closed"
    if engine == "closed":
        return _two_state_mgf(params, alpha, tau, mode)
    if engine == "series":
        tmax = float(tau.max()) if tau.size else 0.0
        tail = _series_tail_bound(params, alpha, tmax, mode, n_terms)
        if tail > tail_tol:
            logger.warning("series with %d terms has tail bound %.3e at t=%g", n_terms, tail, tmax)
        return _series_terms(params, alpha, tau, mode, n_terms).sum(axis=-1)
    raise ValueError(f"unknown MGF engine {engine!r}")


def _weighted_mgf(params, req: MgfRequest, engine="auto", n_terms=DEFAULT_N_TERMS) -> float:
    """Combine mode-conditioned MGFs over the law of ``gamma(t_lo)``."""
    if req.duration == 0:
        return 1.0
    at_lo = transition_probs(params, req.conditioning, req.t_lo)
    total = 0.0
    for mode, w in (("+", at_lo.p_plus), ("-", at_lo.p_minus)):
        if w > 0:
            total += w * float(conditional_mgf(params, req.alpha, req.duration, mode, engine, n_terms))
    return total


def mgf_increment(
    params: SwitchingParams,
    req: MgfRequest,
    n_terms: int = DEFAULT_N_TERMS,
    engine: str = "auto",
) -> float:
    """``<exp(alpha (Gamma_{t_hi} - Gamma_{t_lo})) | gamma_0 ~ req.conditioning>``.

    Uses ``<exp(alpha (Gamma_T - Gamma_t)) | gamma_t = g> = <exp(alpha Gamma_{T-t}) | gamma_0 = g>``
    weighted by the law of ``gamma(t_lo)``.
    """
    return _weighted_mgf(params, req, engine=engine, n_terms=n_terms)


def increment_mgf_profile(
    params: SwitchingParams,
    alpha: float,
    init: ModeDistribution,
    t_hi: float,
    t_lo,
    engine: str = "auto",
    n_terms: int = DEFAULT_N_TERMS,
) -> np.ndarray:
    """:func:`mgf_increment` evaluated on an array of lower limits ``t_lo``."""
    t_lo = np.asarray(t_lo, dtype=float)
    probs = init.as_array() @ transition_matrix(params, t_lo)
    tau = t_hi - t_lo
    m_plus = conditional_mgf(params, alpha, tau, "+", engine, n_terms)
    m_minus = conditional_mgf(params, alpha, tau, "-", engine, n_terms)
    return probs[..., 0] * m_plus + probs[..., 1] * m_minus


def mgf_asymptotic(
    params: SwitchingParams,
    req: MgfRequest,
    regime: Literal["small_eps", "large_eps"],
) -> float:
    """Exponential expansions of the increment MGF for extreme ``epsilon``.

    ``small_eps`` keeps ``alpha g_inf (T-t)``, the ``alpha^2`` diffusion term
    built on the harmonic-mean rate, and the O(eps) initial-mode correction
    weighted by ``P(gamma_0 = +/-)``.  ``large_eps`` keeps the no-transition
    term ``exp(alpha g(+/-) T - lambda(+/-) T / eps)`` for each starting mode.
    """
    gp, gm = params.gamma_plus, params.gamma_minus
    lp, lm = params.lambda_plus, params.lambda_minus
    eps = params.epsilon
    alpha = req.alpha
    init = req.conditioning
    if regime == "small_eps":
        g_inf, _ = stationary_mode_stats(params)
        dt = req.duration
        diffusion = 3.0 / 8.0 * (gm - gp) ** 2 * (lm**2 + lp**2) / (lm * lp * (lp + lm))
        initial = init.p_plus * (gp - gm) / (4 * lp) + init.p_minus * (gm - gp) / (4 * lm)
        return math.exp(alpha * g_inf * dt + alpha**2 * diffusion * dt * eps + alpha * initial * eps)
    if regime == "large_eps":
        T = req.t_hi
        return init.p_plus * math.exp(alpha * gp * T - lp * T / eps) + init.p_minus * math.exp(
            alpha * gm * T - lm * T / eps
        )
    raise ValueError(f"unknown regime {regime!r}")
