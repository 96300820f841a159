"""Command-line driver: ``switchfilter <verb> [options]``.

Verbs: ``run``, ``simulate``, ``calibrate``, ``sweep-obs``, ``rmse``, ``density``.
Exit codes: 0 success, 2 bad configuration or arguments, 3 numerical failure,
4 file-system failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .experiment import (
    OBS_NODES,
    ExperimentConfig,
    averaged_posterior_error,
    density_compare,
    floor_flags,
    map_cells,
    obs_sweep,
    posterior_mixture_deviation,
    rmse_summary,
    run_cell,
    simulate_truth,
    theta_rows,
    write_cell_csvs,
    write_long_csv,
    write_manifest,
)
from .switching import MgfTruncationError

logger = logging.getLogger("switchfilter")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _parse_epsilons(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad epsilon list {text!r}") from exc
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError("epsilon values must be positive")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="switchfilter", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment configuration")
    common.add_argument("--epsilon", type=_parse_epsilons, help="comma-separated epsilon values")
    common.add_argument("--steps", type=int, help="number of observation steps")
    common.add_argument("--seed", type=int, help="truth/observation seed (overrides the config list)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--reference", choices=("gaussian", "mixture", "auto"), help="reference filter")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("run", parents=[common], help="all filters on the epsilon x seed grid")
    sub.add_parser("simulate", parents=[common], help="truth paths and observations only")
    sub.add_parser("calibrate", parents=[common], help="dynamic/static calibration traces")
    sweep = sub.add_parser("sweep-obs", parents=[common], help="posterior errors versus the observation")
    sweep.add_argument("--step", type=int, action="append", help="step(s) to sweep (default 20 and 40)")
    sweep.add_argument("--nodes", type=int, default=OBS_NODES)
    sub.add_parser("rmse", parents=[common], help="root mean square errors per model and epsilon")
    dens = sub.add_parser("density", parents=[common], help="forecast densities and L1 distances")
    dens.add_argument("--step", type=int, action="append", help="forecast step (default 10)")
    return parser


def load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.default()
    updates = {}
    if args.epsilon:
        updates["epsilons"] = args.epsilon
    if args.steps is not None:
        updates["steps"] = args.steps
    if args.seed is not None:
        if args.seed < 0:
            raise ValueError("seed must be nonnegative")
        updates["seeds"] = (args.seed,)
    if args.reference:
        updates["reference"] = args.reference
    return replace(config, **updates) if updates else config


def _cells(config):
    return [(eps, seed) for eps in config.epsilons for seed in config.seeds]


def _write_rows(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def cmd_run(config, out: Path, extra: dict) -> list[Path]:
    files = []
    extra["floor_dominated"] = []
    for cell in map_cells(config, _cells(config)):
        extra["floor_dominated"] += floor_flags(cell)
        files += write_cell_csvs(cell, out)
        long_path = out / f"eps{cell.epsilon:g}_seed{cell.seed}_long.csv"
        write_long_csv(cell, long_path)
        files.append(long_path)
        rows = theta_rows(cell)
        if rows:
            path = out / f"eps{cell.epsilon:g}_seed{cell.seed}_theta.csv"
            files.append(_write_rows(path, list(rows[0]), [list(r.values()) for r in rows]))
    return files


def cmd_simulate(config, out: Path) -> list[Path]:
    files = []
    for eps, seed in _cells(config):
        truth = simulate_truth(config, eps, seed)
        path = out / f"eps{eps:g}_seed{seed}_truth.csv"
        truth.path.write_csv(path)
        obs_path = out / f"eps{eps:g}_seed{seed}_obs.csv"
        _write_rows(obs_path, ["n", "y"], [(n, float(y)) for n, y in enumerate(truth.ys, start=1)])
        files += [path, obs_path]
    return files


def cmd_calibrate(config, out: Path) -> list[Path]:
    files = []
    for eps, seed in _cells(config):
        models = ("DSM_dynamic", "DSM_static") if eps <= 1 else ("dDSM_dynamic", "dDSM_static")
        cell = run_cell(config, eps, seed, models=models)
        rows = theta_rows(cell)
        path = out / f"eps{eps:g}_seed{seed}_theta.csv"
        files.append(_write_rows(path, list(rows[0]), [list(r.values()) for r in rows]))
    return files


def cmd_sweep(config, out: Path, steps, n_nodes: int) -> list[Path]:
    files = []
    R = config.observation_model().r_n
    for cell in map_cells(config, _cells(config)):
        for n in steps:
            sweep = obs_sweep(cell, n, R, n_nodes)
            avg = averaged_posterior_error(cell, n, R, n_nodes)
            ys = sweep.pop("y")["y"]
            rows = []
            for name, curves in sweep.items():
                for i, y in enumerate(ys):
                    rows.append([name, float(y), curves["rel_err_post_mean"][i], curves["rel_err_post_var"][i], curves["score"][i]])
            path = out / f"eps{cell.epsilon:g}_seed{cell.seed}_sweep_n{n}.csv"
            files.append(_write_rows(path, ["model", "y", "rel_err_post_mean", "rel_err_post_var", "score"], rows))
            apath = out / f"eps{cell.epsilon:g}_seed{cell.seed}_sweep_n{n}_average.csv"
            files.append(_write_rows(apath, ["model", "averaged_score"], sorted(avg.items())))
    return files


def cmd_rmse(config, out: Path) -> list[Path]:
    rows = []
    for cell in map_cells(config, _cells(config)):
        for name, run in cell.runs.items():
            e = rmse_summary(run, cell.reference)
            rows.append([cell.epsilon, cell.seed, name, e["prior_mean"], e["prior_var"], e["post_mean"], e["post_var"]])
    path = out / "rmse.csv"
    header = ["epsilon", "seed", "model", "prior_mean", "prior_var", "post_mean", "post_var"]
    return [_write_rows(path, header, rows)]


def cmd_density(config, out: Path, steps) -> list[Path]:
    files = []
    for (eps, seed), step in ((c, s) for c in _cells(config) for s in steps):
        res = density_compare(config, eps, seed, step)
        lo, hi, n = res["grid"]
        x = np.linspace(lo, hi, n)
        names = list(res["densities"])
        cols = [res["densities"][k].pdf(x) for k in names]
        path = out / f"eps{eps:g}_seed{seed}_density_n{step}.csv"
        files.append(_write_rows(path, ["x"] + names, zip(x, *cols)))
        rows = [[k, v] for k, v in res["l1"].items()]
        for ratio in (0.25, 0.75):
            rows.append([f"posterior_mixture_vs_gaussian|R={ratio}E", posterior_mixture_deviation(config, eps, seed, ratio, step)])
        lpath = out / f"eps{eps:g}_seed{seed}_l1_n{step}.csv"
        files.append(_write_rows(lpath, ["pair", "l1"], rows))
    return files


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args)
        limit = config.steps if args.verb == "sweep-obs" else float("inf")
        for n in getattr(args, "step", None) or []:
            if not 1 <= n <= limit:
                raise ValueError(f"step {n} outside 1..{config.steps}")
    except (ValueError, TypeError, KeyError, OSError) as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        extra = {"verb": args.verb}
        if args.verb == "run":
            files = cmd_run(config, args.out, extra)
        elif args.verb == "simulate":
            files = cmd_simulate(config, args.out)
        elif args.verb == "calibrate":
            files = cmd_calibrate(config, args.out)
        elif args.verb == "sweep-obs":
            files = cmd_sweep(config, args.out, args.step or [20, 40], args.nodes)
        elif args.verb == "rmse":
            files = cmd_rmse(config, args.out)
        else:
            files = cmd_density(config, args.out, args.step or [10])
        write_manifest(config, args.out, files, extra)
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, MgfTruncationError) as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    logger.info("wrote %d files to %s", len(files), args.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
