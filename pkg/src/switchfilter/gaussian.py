"""Gaussian and Gaussian-mixture beliefs with Kalman analysis and reduction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence, Union

import numpy as np
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

KernelLabel = Literal["+", "-", "none"]

_LOG_2PI = math.log(2 * math.pi)


def _check_noise(R: float) -> None:
    if not (np.isfinite(R) and R > 0):
        raise ValueError(f"observation noise variance must be positive, got {R}")


def normal_logpdf(x, mean, var):
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        return -0.5 * (_LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


@dataclass(frozen=True)
class Gaussian1:
    """Scalar Gaussian ``N(mean, variance)``; ``variance = 0`` is a point mass."""

    mean: float
    variance: float

    def __post_init__(self):
        if not np.isfinite(self.mean):
            raise ValueError(f"mean must be finite, got {self.mean}")
        if not (np.isfinite(self.variance) and self.variance >= 0):
            raise ValueError(f"variance must be finite and nonnegative, got {self.variance}")
        object.__setattr__(self, "mean", float(self.mean))
        object.__setattr__(self, "variance", float(self.variance))

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def pdf(self, x):
        return np.exp(normal_logpdf(x, self.mean, self.variance))

    def u_marginal(self) -> "Gaussian1":
        return self


def clip_psd(cov: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """Symmetrize a 2x2 covariance and clip eigenvalues at zero.

    Eigenvalues below ``-rel_tol * trace`` indicate a genuinely indefinite
    matrix and raise; smaller negative values are round-off and are clipped.
    """
    cov = 0.5 * (np.asarray(cov, dtype=float) + np.asarray(cov, dtype=float).T)
    w, v = np.linalg.eigh(cov)
    scale = max(float(np.trace(cov)), 0.0)
    if w.min() < -rel_tol * scale - 1e-300:
        raise ValueError(f"covariance is not positive semidefinite: eigenvalues {w}")
    if w.min() >= 0:
        return cov
    w = np.clip(w, 0.0, None)
    return (v * w) @ v.T


@dataclass(frozen=True)
class Gaussian2:
    """Joint Gaussian of ``(u, gamma)`` with mean 2-vector and 2x2 covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(2)
        cov = np.array(self.cov, dtype=float).reshape(2, 2)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("Gaussian2 entries must be finite")
        if abs(cov[0, 1] - cov[1, 0]) > 1e-12 * max(1.0, abs(cov[0, 1])):
            raise ValueError("covariance must be symmetric")
        cov = clip_psd(cov)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def independent(cls, u: Gaussian1, gamma: Gaussian1) -> "Gaussian2":
        return cls([u.mean, gamma.mean], np.diag([u.variance, gamma.variance]))

    def u_marginal(self) -> Gaussian1:
        return Gaussian1(self.mean[0], self.cov[0, 0])

    def gamma_marginal(self) -> Gaussian1:
        return Gaussian1(self.mean[1], self.cov[1, 1])

    def pdf(self, x):
        """Density of the u component (the observed coordinate)."""
        return self.u_marginal().pdf(x)


Kernel = Union[Gaussian1, Gaussian2]


@dataclass(frozen=True)
class MixtureKernel:
    weight: float
    dist: Kernel
    label: KernelLabel = "none"


@dataclass(frozen=True)
class GaussianMixture:
    """Weighted mixture of Gaussian kernels, each optionally labeled by mode."""

    kernels: tuple[MixtureKernel, ...] = field(default_factory=tuple)

    def __post_init__(self):
        kernels = tuple(self.kernels)
        if not kernels:
            raise ValueError("a mixture needs at least one kernel")
        weights = np.array([k.weight for k in kernels], dtype=float)
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError(f"weights must be finite and nonnegative, got {weights}")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {weights.sum()!r}")
        kinds = {type(k.dist) for k in kernels}
        if len(kinds) > 1:
            raise ValueError("all kernels must share one representation")
        object.__setattr__(self, "kernels", kernels)

    @classmethod
    def from_parts(
        cls,
        weights: Sequence[float],
        dists: Sequence[Kernel],
        labels: Sequence[KernelLabel] | None = None,
    ) -> "GaussianMixture":
        """Build a mixture, renormalizing the weights."""
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
        labels = labels if labels is not None else ["none"] * len(w)
        return cls(tuple(MixtureKernel(float(wi), d, lab) for wi, d, lab in zip(w, dists, labels)))

    @property
    def weights(self) -> np.ndarray:
        return np.array([k.weight for k in self.kernels])

    @property
    def labels(self) -> list[KernelLabel]:
        return [k.label for k in self.kernels]

    def __len__(self) -> int:
        return len(self.kernels)

    def kernel(self, label: KernelLabel) -> MixtureKernel:
        for k in self.kernels:
            if k.label == label:
                return k
        raise KeyError(label)

    def u_marginal(self) -> "GaussianMixture":
        return GaussianMixture(
            tuple(MixtureKernel(k.weight, k.dist.u_marginal(), k.label) for k in self.kernels)
        )

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return sum(k.weight * k.dist.u_marginal().pdf(x) for k in self.kernels)


# ---------------------------------------------------------------------------
# analysis


def kalman_update(prior: Gaussian1, y: float, R: float) -> tuple[Gaussian1, float]:
    """Scalar Kalman analysis.

    Returns
    -------
    posterior : Gaussian1
    log_likelihood : float
        Log of the predictive density ``N(y; m, v + R)``.
    """
    _check_noise(R)
    m, v = prior.mean, prior.variance
    s = v + R
    gain = v / s
    post = Gaussian1(m + gain * (y - m), v * R / s)
    return post, float(normal_logpdf(y, m, s))


def joint_kalman_update(prior: Gaussian2, y: float, R: float) -> tuple[Gaussian2, float]:
    """Kalman analysis of ``(u, gamma)`` observing only ``u`` (``H = (1, 0)``)."""
    _check_noise(R)
    m, P = prior.mean, prior.cov
    s = P[0, 0] + R
    gain = P[:, 0] / s
    mean = m + gain * (y - m[0])
    cov = P - np.outer(gain, P[0, :])
    return Gaussian2(mean, clip_psd(cov)), float(normal_logpdf(y, m[0], s))


def update_kernel(dist: Kernel, y: float, R: float) -> tuple[Kernel, float]:
    if isinstance(dist, Gaussian2):
        return joint_kalman_update(dist, y, R)
    return kalman_update(dist, y, R)


_TINY = np.finfo(float).tiny


def mixture_update(prior: GaussianMixture, y: float, R: float) -> GaussianMixture:
    """Kalman-update every kernel and reweight by its predictive likelihood.

    Weights are combined in log space and floored at the smallest normal
    double, so a kernel never reaches exactly zero weight.  If every
    kernel's likelihood underflows, the weights fall back to uniform with a
    warning.
    """
    _check_noise(R)
    posts, logliks = zip(*(update_kernel(k.dist, y, R) for k in prior.kernels))
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights) + np.array(logliks)
    if not np.any(np.isfinite(logw)):
        logger.warning("all mixture likelihoods underflowed; reweighting uniformly")
        w = np.full(len(prior), 1.0 / len(prior))
    else:
        w = np.exp(logw - logsumexp(logw))
        w = np.where(np.isfinite(logw), np.maximum(w, _TINY), 0.0)
        w = w / w.sum()
    return GaussianMixture(
        tuple(MixtureKernel(float(wi), p, k.label) for wi, p, k in zip(w, posts, prior.kernels))
    )


def mixture_log_likelihood(prior: GaussianMixture, y: float, R: float) -> float:
    terms = [
        math.log(k.weight) + update_kernel(k.dist, y, R)[1] for k in prior.kernels if k.weight > 0
    ]
    return float(logsumexp(terms))


# ---------------------------------------------------------------------------
# reduction


def moment_match(mix: GaussianMixture | Kernel) -> Kernel:
    """Single Gaussian with the mixture's exact mean and covariance."""
    if not isinstance(mix, GaussianMixture):
        return mix
    if len(mix) == 1:
        return mix.kernels[0].dist
    w = mix.weights
    if isinstance(mix.kernels[0].dist, Gaussian2):
        means = np.array([k.dist.mean for k in mix.kernels])
        covs = np.array([k.dist.cov for k in mix.kernels])
        mean = w @ means
        dev = means - mean
        cov = np.einsum("k,kij->ij", w, covs) + np.einsum("k,ki,kj->ij", w, dev, dev)
        return Gaussian2(mean, clip_psd(cov))
    means = np.array([k.dist.mean for k in mix.kernels])
    vars_ = np.array([k.dist.variance for k in mix.kernels])
    mean = float(w @ means)
    var = float(w @ vars_ + w @ (means - mean) ** 2)
    return Gaussian1(mean, max(var, 0.0))


def merge_to(mix: GaussianMixture, k_max: int) -> GaussianMixture:
    """Reduce to at most ``k_max`` kernels by merging the two lightest repeatedly.

    A merged kernel keeps a label only if both parents share it.
    """
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    kernels = list(mix.kernels)
    while len(kernels) > k_max:
        order = np.argsort([k.weight for k in kernels], kind="stable")
        i, j = sorted(order[:2])
        a, b = kernels[i], kernels[j]
        total = a.weight + b.weight
        if total > 0:
            pair = GaussianMixture.from_parts([a.weight, b.weight], [a.dist, b.dist])
            dist = moment_match(pair)
        else:
            dist = a.dist
        label = a.label if a.label == b.label else "none"
        merged = MixtureKernel(total, dist, label)
        kernels = [k for n, k in enumerate(kernels) if n not in (i, j)] + [merged]
    return GaussianMixture(tuple(kernels))


# ---------------------------------------------------------------------------
# densities


def density_l1_distance(
    a: Callable | Kernel | GaussianMixture,
    b: Callable | Kernel | GaussianMixture,
    grid: tuple[float, float, int],
) -> float:
    """Trapezoid estimate of ``int |p_a - p_b| dx`` over ``np.linspace(*grid)``."""
    lo, hi, n = grid
    if n < 2 or not lo < hi:
        raise ValueError("grid needs n >= 2 and lo < hi")
    x = np.linspace(lo, hi, int(n))
    pa = a.pdf(x) if hasattr(a, "pdf") else a(x)
    pb = b.pdf(x) if hasattr(b, "pdf") else b(x)
    return float(np.trapezoid(np.abs(pa - pb), x))
