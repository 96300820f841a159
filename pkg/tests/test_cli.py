import csv
import json

import numpy as np
import pytest

from switchfilter.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


class TestVerbs:
    def test_simulate(self, tmp_path):
        assert main(["simulate", "--epsilon", "1", "--steps", "3", "--seed", "5", "--out", str(tmp_path)]) == EXIT_OK
        obs = read_csv(tmp_path / "eps1_seed5_obs.csv")
        assert [r["n"] for r in obs] == ["1", "2", "3"]
        truth = read_csv(tmp_path / "eps1_seed5_truth.csv")
        assert len(truth) == 4
        m = manifest(tmp_path)
        assert m["verb"] == "simulate"
        assert m["config"]["seeds"] == [5]
        assert set(m["files"]) == {"eps1_seed5_obs.csv", "eps1_seed5_truth.csv"}
        assert {"switchfilter", "numpy", "scipy", "python"} <= set(m["versions"])

    def test_run(self, tmp_path):
        assert main(["run", "--epsilon", "1", "--steps", "3", "--out", str(tmp_path)]) == EXIT_OK
        names = set(manifest(tmp_path)["files"])
        for model in ("SSM_gaussian", "MSM", "DSM_naive", "DSM_dynamic", "DSM_static"):
            assert f"eps1_seed0_{model}.csv" in names
        assert {"eps1_seed0_long.csv", "eps1_seed0_theta.csv"} <= names
        rows = read_csv(tmp_path / "eps1_seed0_MSM.csv")
        assert len(rows) == 3
        assert all(float(r["rel_err_post_var"]) >= 0 for r in rows)
        assert manifest(tmp_path)["floor_dominated"] == []

    def test_run_mixture_reference(self, tmp_path):
        args = ["run", "--epsilon", "10", "--steps", "2", "--reference", "mixture", "--out", str(tmp_path)]
        assert main(args) == EXIT_OK
        assert (tmp_path / "eps10_seed0_SSM_mixture.csv").exists()
        assert (tmp_path / "eps10_seed0_dDSM_static.csv").exists()

    def test_calibrate(self, tmp_path):
        assert main(["calibrate", "--epsilon", "0.1,10", "--steps", "2", "--out", str(tmp_path)]) == EXIT_OK
        small = read_csv(tmp_path / "eps0.1_seed0_theta.csv")
        assert {r["model"] for r in small} == {"DSM_dynamic", "DSM_static"}
        large = read_csv(tmp_path / "eps10_seed0_theta.csv")
        assert {r["mode"] for r in large} == {"+", "-"}

    def test_sweep(self, tmp_path):
        args = ["sweep-obs", "--epsilon", "1", "--steps", "3", "--step", "2", "--nodes", "11", "--out", str(tmp_path)]
        assert main(args) == EXIT_OK
        rows = read_csv(tmp_path / "eps1_seed0_sweep_n2.csv")
        assert len(rows) == 4 * 11
        avg = read_csv(tmp_path / "eps1_seed0_sweep_n2_average.csv")
        assert {r["model"] for r in avg} == {"MSM", "DSM_naive", "DSM_dynamic", "DSM_static"}

    def test_rmse(self, tmp_path):
        assert main(["rmse", "--epsilon", "1", "--steps", "3", "--out", str(tmp_path)]) == EXIT_OK
        rows = read_csv(tmp_path / "rmse.csv")
        assert len(rows) == 4
        assert all(np.isfinite(float(r["post_var"])) for r in rows)

    def test_density(self, tmp_path):
        assert main(["density", "--epsilon", "1", "--step", "3", "--out", str(tmp_path)]) == EXIT_OK
        l1 = {r["pair"]: float(r["l1"]) for r in read_csv(tmp_path / "eps1_seed0_l1_n3.csv")}
        assert "MSM|SSM_gaussian" in l1
        assert "posterior_mixture_vs_gaussian|R=0.75E" in l1
        dens = read_csv(tmp_path / "eps1_seed0_density_n3.csv")
        assert set(dens[0]) == {"x", "MSM", "dMSM", "SSM_gaussian", "SSM_mixture"}

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epsilons": [2.0], "steps": 2, "models": ["dMSM"]}))
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        assert (out / "eps2_seed0_dMSM.csv").exists()
        assert not (out / "eps2_seed0_dDSM_naive.csv").exists()


class TestExitCodes:
    def test_bad_epsilon(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["run", "--epsilon", "-1", "--out", str(tmp_path)])
        assert exc.value.code == EXIT_CONFIG

    def test_zero_steps(self, tmp_path, capsys):
        assert main(["run", "--steps", "0", "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "error[config]" in capsys.readouterr().err

    def test_negative_seed(self, tmp_path):
        assert main(["run", "--seed", "-1", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_sweep_step_beyond_run(self, tmp_path):
        assert main(["sweep-obs", "--steps", "3", "--step", "9", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_config(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"stepz": 2}))
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_numeric_failure(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"gamma_plus": 1000, "gamma_minus": -800, "epsilons": [100], "steps": 2, "models": ["dMSM"]}))
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_NUMERIC
        assert "error[numeric]" in capsys.readouterr().err

    def test_unwritable_output(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["simulate", "--steps", "1", "--epsilon", "1", "--out", str(blocker / "sub")]) == EXIT_IO
        assert "error[io]" in capsys.readouterr().err
