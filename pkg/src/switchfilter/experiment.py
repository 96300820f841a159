"""Batch experiments: one truth path, every filter on the same observations.

A *cell* is one ``(epsilon, seed)`` pair.  Each cell simulates a truth path
and its observations, runs the reference filter and the reduced filters, and
returns per-step forecast/analysis moments together with the frozen forecast
beliefs needed to replay an analysis step with a different observation.
"""

from __future__ import annotations

import json
import math
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Literal

import numpy as np
import scipy

from . import __version__
from .calibration import (
    CalibrationConfig,
    DualModeCalibrator,
    DynamicCalibrator,
    static_calibration,
    static_calibration_ddsm,
    theta_naive,
    theta_prime_naive,
)
from .gaussian import (
    Gaussian1,
    Gaussian2,
    GaussianMixture,
    density_l1_distance,
    joint_kalman_update,
    kalman_update,
    mixture_update,
    moment_match,
)
from .reduced import (
    ReducedSettings,
    ThetaDDSM,
    ThetaDSM,
    ddsm_initial_state,
    ddsm_predict,
    dmsm_initial_state,
    dmsm_predict,
    msm_predict,
    reduced_filter_step,
    spekf_predict,
)
from .ssm_filters import (
    MgfSettings,
    SsmFilterState,
    StepRecord,
    ssm_gaussian_predict,
    ssm_mixture_predict,
    ssm_filter_step,
)
from .switching import SwitchingParams, stationary_distribution, stationary_mode_stats
from .truth import ObservationModel, TruthPath, observe, rng_for, sample_path

ReferenceMode = Literal["gaussian", "mixture", "auto"]

CSV_HEADER = (
    "n,prior_mean,prior_var,post_mean,post_var,"
    "rel_err_prior_mean,rel_err_prior_var,rel_err_post_mean,rel_err_post_var"
)
RELATIVE_ERROR_FLOOR = 1e-12
# the scaled score has a kink where the two posterior means cross; 801 nodes
# keep its observation average stable to 2e-7 under node doubling
OBS_NODES = 801

GAUSSIAN_MODELS = ("MSM", "DSM_naive", "DSM_dynamic", "DSM_static")
MIXTURE_MODELS = ("dMSM", "dDSM_naive", "dDSM_dynamic", "dDSM_static", "DSM_comparison")


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of a batch run; serialized as JSON with these snake_case keys."""

    gamma_plus: float = 2.27
    gamma_minus: float = -0.04
    lambda_plus: float = 1.0
    lambda_minus: float = 2.0
    sigma_u: float = 0.1549
    epsilons: tuple[float, ...] = (0.1, 1.0, 10.0, 100.0)
    obs_interval: float = 1.0
    obs_ratio: float = 0.25
    u0_mean: float = 0.1
    u0_var: float = 0.0016
    dsm_gamma0_mean_factor: float = 1.2
    dsm_gamma0_var: float | None = None
    steps: int = 50
    seeds: tuple[int, ...] = (0,)
    n_terms: int = 30
    quad_nodes: int = 65
    mgf_engine: str = "auto"
    reference: ReferenceMode = "auto"
    k_max: int = 1
    ddsm_gamma_init: str = "mode_value"
    comparison_theta: tuple[float, float, float] | None = None
    models: tuple[str, ...] | None = None
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.obs_ratio <= 0 or self.obs_interval <= 0:
            raise ValueError("observation settings must be positive")
        if self.u0_var < 0:
            raise ValueError("u0_var must be nonnegative")
        if self.reference not in ("gaussian", "mixture", "auto"):
            raise ValueError(f"unknown reference mode {self.reference!r}")
        if not self.gamma_bar > 0:
            raise ValueError("the stationary mean damping must be positive to define R = r E")
        unknown = set(self.models or ()) - set(GAUSSIAN_MODELS + MIXTURE_MODELS)
        if unknown:
            raise ValueError(f"unknown models {sorted(unknown)}")

    # -- derived quantities -------------------------------------------------

    def switching(self, epsilon: float) -> SwitchingParams:
        return SwitchingParams(
            self.gamma_plus, self.gamma_minus, self.lambda_plus, self.lambda_minus, epsilon, self.sigma_u
        )

    @property
    def gamma_bar(self) -> float:
        return stationary_mode_stats(self.switching(1.0))[0]

    @property
    def energy(self) -> float:
        """Stationary variance ``sigma_u^2 / (2 gamma_bar)`` of the frozen-rate model."""
        return self.sigma_u**2 / (2 * self.gamma_bar)

    def observation_model(self, ratio: float | None = None) -> ObservationModel:
        r = self.obs_ratio if ratio is None else ratio
        return ObservationModel(r * self.energy, self.obs_interval)

    def reference_mode(self, epsilon: float) -> Literal["gaussian", "mixture"]:
        return resolve_reference(self.reference, epsilon)

    def models_for(self, epsilon: float) -> tuple[str, ...]:
        """Configured models, or the regime default: Gaussian filters for
        ``eps <= 1`` and Gaussian-sum filters plus the comparison DSM above."""
        if self.models is not None:
            return self.models
        return GAUSSIAN_MODELS if epsilon <= 1 else MIXTURE_MODELS

    def comparison(self) -> ThetaDSM:
        if self.comparison_theta is not None:
            return ThetaDSM(*self.comparison_theta)
        return ThetaDSM(self.gamma_bar, 0.1 * self.gamma_bar, 5 * self.sigma_u)

    def mgf_settings(self) -> MgfSettings:
        return MgfSettings(self.quad_nodes, self.n_terms, self.mgf_engine)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epsilons"] = list(self.epsilons)
        d["seeds"] = list(self.seeds)
        d["models"] = None if self.models is None else list(self.models)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        data = dict(data)
        if "calibration" in data:
            cal = dict(data["calibration"])
            if cal.get("continuation_eps") is not None:
                cal["continuation_eps"] = tuple(cal["continuation_eps"])
            data["calibration"] = CalibrationConfig(**cal)
        for key in ("epsilons", "seeds", "models", "comparison_theta"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "ExperimentConfig":
        text = resources.files("switchfilter").joinpath("data/default_config.json").read_text()
        return cls.from_dict(json.loads(text))


def resolve_reference(mode: ReferenceMode, epsilon: float) -> Literal["gaussian", "mixture"]:
    """``auto`` picks the Gaussian reference for ``eps <= 1`` and the merged mixture above."""
    if mode == "auto":
        return "gaussian" if epsilon <= 1 else "mixture"
    return mode


def relative_error(approx, reference, floor: float = RELATIVE_ERROR_FLOOR):
    """``|a - r| / max(|r|, floor)``, elementwise."""
    approx = np.asarray(approx, dtype=float)
    reference = np.asarray(reference, dtype=float)
    out = np.abs(approx - reference) / np.maximum(np.abs(reference), floor)
    return float(out) if out.ndim == 0 else out


def floor_dominated(reference, floor: float = RELATIVE_ERROR_FLOOR):
    return np.abs(np.asarray(reference, dtype=float)) < floor


# ---------------------------------------------------------------------------
# truth and observations


@dataclass(frozen=True)
class TruthRun:
    path: TruthPath
    ys: np.ndarray


def simulate_truth(config: ExperimentConfig, epsilon: float, seed: int, steps: int | None = None) -> TruthRun:
    """Truth path from the configured initial law and its observations ``y_1..y_N``."""
    steps = config.steps if steps is None else steps
    params = config.switching(epsilon)
    obs = config.observation_model()
    rng = rng_for(seed, 10)
    u0 = config.u0_mean + math.sqrt(config.u0_var) * rng.standard_normal()
    mode0 = "+" if rng.random() < stationary_distribution(params).p_plus else "-"
    times = obs.schedule * np.arange(0, steps + 1)
    path = sample_path(params, u0, mode0, float(times[-1]), times, seed)
    ys = np.array([observe(path, obs, n, seed) for n in range(1, steps + 1)])
    return TruthRun(path, ys)


# ---------------------------------------------------------------------------
# filter runs


@dataclass
class FilterRun:
    """Per-step records plus the forecast belief frozen at each step."""

    name: str
    records: list[StepRecord] = field(default_factory=list)
    priors: list[Any] = field(default_factory=list)
    thetas: list[Any] = field(default_factory=list)

    def moments(self) -> dict[str, np.ndarray]:
        return {
            "prior_mean": np.array([r.prior.mean for r in self.records]),
            "prior_var": np.array([r.prior.variance for r in self.records]),
            "post_mean": np.array([r.posterior.mean for r in self.records]),
            "post_var": np.array([r.posterior.variance for r in self.records]),
        }


def analyze(prior, y: float, R: float) -> Gaussian1:
    """Posterior u-law for any frozen forecast belief, collapsed to one Gaussian."""
    if isinstance(prior, GaussianMixture):
        return moment_match(mixture_update(prior, y, R).u_marginal())
    if isinstance(prior, Gaussian2):
        return joint_kalman_update(prior, y, R)[0].u_marginal()
    return kalman_update(prior, y, R)[0]


def analyze_grid(prior, ys: np.ndarray, R: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`analyze` over many observation values."""
    ys = np.asarray(ys, dtype=float)
    if isinstance(prior, GaussianMixture):
        means, vars_, logw = [], [], []
        for k in prior.kernels:
            g = k.dist.u_marginal()
            s = g.variance + R
            gain = g.variance / s
            means.append(g.mean + gain * (ys - g.mean))
            vars_.append(np.full_like(ys, g.variance * R / s))
            with np.errstate(divide="ignore"):
                logw.append(math.log(k.weight) - 0.5 * (math.log(2 * math.pi * s) + (ys - g.mean) ** 2 / s))
        logw = np.array(logw)
        w = np.exp(logw - logw.max(axis=0))
        w /= w.sum(axis=0)
        means, vars_ = np.array(means), np.array(vars_)
        mean = (w * means).sum(axis=0)
        var = (w * (vars_ + (means - mean) ** 2)).sum(axis=0)
        return mean, var
    g = prior.u_marginal()
    s = g.variance + R
    return g.mean + g.variance / s * (ys - g.mean), np.full_like(ys, g.variance * R / s)


def run_reference(config, epsilon, ys, mode: Literal["gaussian", "mixture"], obs=None) -> FilterRun:
    params = config.switching(epsilon)
    obs = obs or config.observation_model()
    settings = config.mgf_settings()
    state = SsmFilterState(Gaussian1(config.u0_mean, config.u0_var), stationary_distribution(params), 0)
    run = FilterRun(f"SSM_{mode}")
    for y in ys:
        if mode == "gaussian":
            pred = ssm_gaussian_predict(state, params, obs.schedule, settings)
        else:
            pred = ssm_mixture_predict(state, params, obs.schedule, settings)
        state, rec = ssm_filter_step(state, params, obs, y, mode, settings)
        run.priors.append(pred.u_belief)
        run.records.append(rec)
    return run


def _reduced_settings(config: ExperimentConfig, epsilon: float) -> ReducedSettings:
    return ReducedSettings(
        sigma_u=config.sigma_u,
        epsilon=epsilon,
        gamma_bar=config.gamma_bar,
        gamma_pm=(config.gamma_plus, config.gamma_minus),
        quad_nodes=config.quad_nodes,
        k_max=config.k_max,
        ddsm_gamma_init=config.ddsm_gamma_init,
    )


def _dsm_initial(config: ExperimentConfig) -> Gaussian2:
    _, var_inf = stationary_mode_stats(config.switching(1.0))
    g_var = var_inf if config.dsm_gamma0_var is None else config.dsm_gamma0_var
    return Gaussian2.independent(
        Gaussian1(config.u0_mean, config.u0_var),
        Gaussian1(config.dsm_gamma0_mean_factor * config.gamma_bar, g_var),
    )


def run_msm(config, epsilon, ys, obs=None) -> FilterRun:
    obs = obs or config.observation_model()
    settings = _reduced_settings(config, epsilon)
    state = Gaussian1(config.u0_mean, config.u0_var)
    run = FilterRun("MSM")
    for n, y in enumerate(ys, start=1):
        run.priors.append(msm_predict(state, settings.gamma_bar, settings.sigma_u, obs.schedule))
        state, rec = reduced_filter_step(state, "MSM", settings, y, obs, step=n)
        run.records.append(rec)
    return run


def run_dsm(config, epsilon, ys, theta: ThetaDSM | None, name: str, obs=None) -> FilterRun:
    """DSM filter with a fixed ``theta`` or, if ``theta`` is None, dynamic calibration."""
    obs = obs or config.observation_model()
    settings = _reduced_settings(config, epsilon)
    params = config.switching(epsilon)
    calibrator = None
    if theta is None:
        calibrator = DynamicCalibrator(params, obs.schedule, config.calibration, config.quad_nodes)
    state = _dsm_initial(config)
    run = FilterRun(name)
    for n, y in enumerate(ys, start=1):
        th = calibrator.step(state) if calibrator else theta
        run.thetas.append(th)
        run.priors.append(spekf_predict(state, th, settings.sigma_u, epsilon, obs.schedule, settings.quad_nodes))
        state, rec = reduced_filter_step(state, "DSM", settings, y, obs, theta=th, step=n)
        run.records.append(rec)
    return run


def run_dmsm(config, epsilon, ys, obs=None) -> FilterRun:
    obs = obs or config.observation_model()
    settings = _reduced_settings(config, epsilon)
    rho = stationary_distribution(config.switching(epsilon)).p_plus
    state = dmsm_initial_state(Gaussian1(config.u0_mean, config.u0_var), rho)
    run = FilterRun("dMSM")
    for n, y in enumerate(ys, start=1):
        run.priors.append(dmsm_predict(state, settings.gamma_pm, settings.sigma_u, obs.schedule))
        state, rec = reduced_filter_step(state, "dMSM", settings, y, obs, step=n)
        run.records.append(rec)
    return run


def run_ddsm(config, epsilon, ys, theta2: ThetaDDSM | None, name: str, obs=None) -> FilterRun:
    """dDSM filter with fixed ``theta2`` or per-mode dynamic calibration."""
    obs = obs or config.observation_model()
    settings = _reduced_settings(config, epsilon)
    params = config.switching(epsilon)
    start = theta_prime_naive(params, obs.schedule)
    calibrator = None
    if theta2 is None:
        calibrator = DualModeCalibrator(params, obs.schedule, config.calibration, config.quad_nodes)
    state = ddsm_initial_state(Gaussian1(config.u0_mean, config.u0_var), theta2 or start, settings)
    run = FilterRun(name)
    for n, y in enumerate(ys, start=1):
        if calibrator:
            th = calibrator.step({k.label: k.dist for k in state.kernels})
        else:
            th = theta2
        run.thetas.append(th)
        run.priors.append(ddsm_predict(state, th, settings.sigma_u, epsilon, obs.schedule, settings.quad_nodes))
        state, rec = reduced_filter_step(state, "dDSM", settings, y, obs, theta=th, step=n)
        run.records.append(rec)
    return run


@dataclass
class CellResult:
    epsilon: float
    seed: int
    reference_mode: str
    truth: TruthRun
    reference: FilterRun
    runs: dict[str, FilterRun]


def run_cell(
    config: ExperimentConfig,
    epsilon: float,
    seed: int,
    models: tuple[str, ...] | None = None,
    reference: ReferenceMode | None = None,
) -> CellResult:
    """Simulate one truth path and run the reference and the requested filters."""
    models = config.models_for(epsilon) if models is None else models
    ref_mode = resolve_reference(reference or config.reference, epsilon)
    params = config.switching(epsilon)
    truth = simulate_truth(config, epsilon, seed)
    ys = truth.ys
    runs: dict[str, FilterRun] = {}
    ref = run_reference(config, epsilon, ys, ref_mode)
    if "MSM" in models:
        runs["MSM"] = run_msm(config, epsilon, ys)
    if "DSM_naive" in models:
        runs["DSM_naive"] = run_dsm(config, epsilon, ys, theta_naive(params), "DSM_naive")
    if "DSM_comparison" in models:
        runs["DSM_comparison"] = run_dsm(config, epsilon, ys, config.comparison(), "DSM_comparison")
    if "DSM_dynamic" in models or "DSM_static" in models:
        dyn = run_dsm(config, epsilon, ys, None, "DSM_dynamic")
        if "DSM_dynamic" in models:
            runs["DSM_dynamic"] = dyn
        if "DSM_static" in models:
            th = static_calibration(dyn.thetas, config.calibration.averaging_window)
            runs["DSM_static"] = run_dsm(config, epsilon, ys, th, "DSM_static")
    if "dMSM" in models:
        runs["dMSM"] = run_dmsm(config, epsilon, ys)
    if "dDSM_naive" in models:
        runs["dDSM_naive"] = run_ddsm(
            config, epsilon, ys, theta_prime_naive(params, config.obs_interval), "dDSM_naive"
        )
    if "dDSM_dynamic" in models or "dDSM_static" in models:
        dyn = run_ddsm(config, epsilon, ys, None, "dDSM_dynamic")
        if "dDSM_dynamic" in models:
            runs["dDSM_dynamic"] = dyn
        if "dDSM_static" in models:
            th2 = static_calibration_ddsm(dyn.thetas, config.calibration.averaging_window)
            runs["dDSM_static"] = run_ddsm(config, epsilon, ys, th2, "dDSM_static")
    return CellResult(epsilon, seed, ref_mode, truth, ref, runs)


# ---------------------------------------------------------------------------
# error metrics


def error_table(run: FilterRun, reference: FilterRun) -> dict[str, np.ndarray]:
    """Moments of ``run`` and their relative errors against ``reference``."""
    a, r = run.moments(), reference.moments()
    out = dict(a)
    for key in ("prior_mean", "prior_var", "post_mean", "post_var"):
        out[f"rel_err_{key}"] = relative_error(a[key], r[key])
    return out


def rmse_summary(run: FilterRun, reference: FilterRun) -> dict[str, float]:
    """Root mean square of ``approx - reference`` over all steps, per moment."""
    a, r = run.moments(), reference.moments()
    return {
        key: float(np.sqrt(np.mean((a[key] - r[key]) ** 2)))
        for key in ("prior_mean", "prior_var", "post_mean", "post_var")
    }


def scaled_posterior_error(mean, var, ref_mean, ref_var):
    """Posterior error on the reference's own scale.

    ``|m - m_ref| / sqrt(v_ref) + |v - v_ref| / v_ref``: the mean error in
    reference standard deviations plus the relative variance error.
    """
    return np.abs(mean - ref_mean) / np.sqrt(ref_var) + np.abs(var - ref_var) / ref_var


def rmse_score(run: FilterRun, reference: FilterRun) -> float:
    """Posterior RMSE of mean and variance, each scaled by the reference's typical size."""
    r = reference.moments()
    e = rmse_summary(run, reference)
    return e["post_mean"] / math.sqrt(np.mean(r["post_var"])) + e["post_var"] / np.mean(r["post_var"])


def time_averaged_score(run: FilterRun, reference: FilterRun) -> float:
    a, r = run.moments(), reference.moments()
    return float(np.mean(scaled_posterior_error(a["post_mean"], a["post_var"], r["post_mean"], r["post_var"])))


def observation_nodes(ref_prior: Gaussian1, R: float, n_nodes: int = OBS_NODES, width: float = 4.0):
    """Trapezoid nodes and weights for ``y ~ N(m_ref, v_ref + R)`` on ``+/- width`` sd.

    The weights are normalized to sum to one, i.e. the average is taken
    under the law of ``y`` restricted to the grid interval.
    """
    sd = math.sqrt(ref_prior.variance + R)
    ys = np.linspace(ref_prior.mean - width * sd, ref_prior.mean + width * sd, n_nodes)
    dens = np.exp(-0.5 * ((ys - ref_prior.mean) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
    w = np.full(n_nodes, ys[1] - ys[0])
    w[0] = w[-1] = 0.5 * (ys[1] - ys[0])
    w = w * dens
    return ys, w / w.sum()


def obs_sweep(
    cell: CellResult, n: int, R: float, n_nodes: int = OBS_NODES, width: float = 4.0
) -> dict[str, dict[str, np.ndarray]]:
    """Posterior relative errors of every model as the observation at step ``n`` varies.

    The forecast beliefs at step ``n`` are frozen; only the analysis is redone.
    """
    ref_prior = moment_match(cell.reference.priors[n - 1]).u_marginal() if isinstance(
        cell.reference.priors[n - 1], GaussianMixture
    ) else cell.reference.priors[n - 1]
    ys, _ = observation_nodes(ref_prior, R, n_nodes, width)
    ref_mean, ref_var = analyze_grid(cell.reference.priors[n - 1], ys, R)
    out = {"y": {"y": ys}}
    for name, run in cell.runs.items():
        mean, var = analyze_grid(run.priors[n - 1], ys, R)
        out[name] = {
            "post_mean": mean,
            "post_var": var,
            "rel_err_post_mean": relative_error(mean, ref_mean),
            "rel_err_post_var": relative_error(var, ref_var),
            "score": scaled_posterior_error(mean, var, ref_mean, ref_var),
        }
    return out


def averaged_posterior_error(
    cell: CellResult, n: int, R: float, n_nodes: int = OBS_NODES, width: float = 4.0, key: str = "score"
) -> dict[str, float]:
    """Expectation of a posterior error under the reference predictive law of ``y_n``."""
    prior = cell.reference.priors[n - 1]
    ref_prior = moment_match(prior).u_marginal() if isinstance(prior, GaussianMixture) else prior
    _, w = observation_nodes(ref_prior, R, n_nodes, width)
    sweep = obs_sweep(cell, n, R, n_nodes, width)
    return {name: float(w @ curves[key]) for name, curves in sweep.items() if name != "y"}


# ---------------------------------------------------------------------------
# density diagnostics


def density_grid(dists, n: int = 4001, width: float = 10.0) -> tuple[float, float, int]:
    """Grid covering ``+/- width`` standard deviations of every density."""
    lo, hi = np.inf, -np.inf
    for d in dists:
        comps = d.kernels if isinstance(d, GaussianMixture) else [None]
        for k in comps:
            g = (k.dist if k is not None else d).u_marginal()
            sd = math.sqrt(max(g.variance, 1e-300))
            lo, hi = min(lo, g.mean - width * sd), max(hi, g.mean + width * sd)
    return lo, hi, n


def density_compare(config: ExperimentConfig, epsilon: float, seed: int, n: int = 10) -> dict:
    """Forecast densities of MSM, dMSM and both reference filters at step ``n``, with L1 distances."""
    truth = simulate_truth(config, epsilon, seed, steps=n)
    ys = truth.ys
    msm = run_msm(config, epsilon, ys)
    dmsm = run_dmsm(config, epsilon, ys)
    ref_g = run_reference(config, epsilon, ys, "gaussian")
    ref_m = run_reference(config, epsilon, ys, "mixture")
    dens = {
        "MSM": msm.priors[n - 1],
        "dMSM": dmsm.priors[n - 1],
        "SSM_gaussian": ref_g.priors[n - 1],
        "SSM_mixture": ref_m.priors[n - 1],
    }
    grid = density_grid(dens.values())
    names = list(dens)
    l1 = {
        f"{a}|{b}": density_l1_distance(dens[a], dens[b], grid)
        for i, a in enumerate(names)
        for b in names[i + 1 :]
    }
    return {"densities": dens, "grid": grid, "l1": l1}


def posterior_mixture_deviation(config: ExperimentConfig, epsilon: float, seed: int, ratio: float, n: int = 10) -> float:
    """L1 distance between the reference posterior mixture at step ``n`` and its matched Gaussian.

    The observation noise is ``ratio * E`` for both the data and the filter.
    """
    cfg = replace(config, obs_ratio=ratio)
    truth = simulate_truth(cfg, epsilon, seed, steps=n)
    obs = cfg.observation_model()
    ref = run_reference(cfg, epsilon, truth.ys, "mixture", obs)
    post = mixture_update(ref.priors[n - 1], float(truth.ys[n - 1]), obs.r_n)
    matched = moment_match(post)
    grid = density_grid([post, matched])
    return density_l1_distance(post, matched, grid)


# ---------------------------------------------------------------------------
# output


def worker_count() -> int:
    cap = os.environ.get("SWITCHFILTER_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def map_cells(config: ExperimentConfig, cells: list[tuple[float, int]], **kwargs) -> list[CellResult]:
    """Run cells in parallel (up to :func:`worker_count` processes), in input order."""
    workers = min(worker_count(), len(cells))
    if workers <= 1:
        return [run_cell(config, eps, seed, **kwargs) for eps, seed in cells]
    with ProcessPoolExecutor(workers) as pool:
        futures = [pool.submit(run_cell, config, eps, seed, **kwargs) for eps, seed in cells]
        return [f.result() for f in futures]


def format_float(x: float) -> str:
    return repr(float(x))


def write_cell_csvs(cell: CellResult, out_dir: str | Path) -> list[Path]:
    """One CSV per model (and one for the reference) with moments and relative errors."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    runs = {cell.reference.name: cell.reference, **cell.runs}
    for name, run in runs.items():
        table = error_table(run, cell.reference)
        path = out_dir / f"eps{cell.epsilon:g}_seed{cell.seed}_{name}.csv"
        with open(path, "w") as fh:
            fh.write(CSV_HEADER + "\n")
            for i, rec in enumerate(run.records):
                row = [str(rec.n)] + [
                    format_float(table[k][i])
                    for k in (
                        "prior_mean", "prior_var", "post_mean", "post_var",
                        "rel_err_prior_mean", "rel_err_prior_var", "rel_err_post_mean", "rel_err_post_var",
                    )
                ]
                fh.write(",".join(row) + "\n")
        written.append(path)
    return written


def write_long_csv(cell: CellResult, path: str | Path) -> None:
    """Long-format ``epsilon,seed,model,n,quantity,value`` rows for plotting."""
    runs = {cell.reference.name: cell.reference, **cell.runs}
    with open(path, "w") as fh:
        fh.write("epsilon,seed,model,n,quantity,value\n")
        for name, run in runs.items():
            table = error_table(run, cell.reference)
            for i, rec in enumerate(run.records):
                for key, values in table.items():
                    fh.write(f"{cell.epsilon:g},{cell.seed},{name},{rec.n},{key},{format_float(values[i])}\n")


def floor_flags(cell: CellResult) -> list[dict]:
    """Steps whose reference moment is below the relative-error floor.

    The relative errors reported there are floor-dominated; the list goes
    into the run manifest because the per-model CSV layout is fixed.
    """
    ref = cell.reference.moments()
    flags = []
    for key, values in ref.items():
        for i in np.flatnonzero(floor_dominated(values)):
            flags.append({"epsilon": cell.epsilon, "seed": cell.seed, "n": cell.reference.records[i].n, "quantity": key})
    return flags


def theta_rows(cell: CellResult) -> list[dict]:
    rows = []
    for name, run in cell.runs.items():
        for rec, th in zip(run.records, run.thetas):
            if isinstance(th, ThetaDSM):
                rows.append({"model": name, "n": rec.n, "mode": "", "mu": th.mu, "nu": th.nu, "sigma": th.sigma})
            elif isinstance(th, ThetaDDSM):
                for lab in ("+", "-"):
                    t = th.mode(lab)
                    rows.append({"model": name, "n": rec.n, "mode": lab, "mu": t.mu, "nu": t.nu, "sigma": t.sigma})
    return rows


def write_manifest(config: ExperimentConfig, out_dir: str | Path, files: list[Path], extra: dict | None = None) -> Path:
    manifest = {
        "config": config.to_dict(),
        "versions": {
            "switchfilter": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "files": sorted(str(Path(f).name) for f in files),
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
