import csv
import json
import math
import time

import numpy as np
import pytest

from icmix import io
from icmix.cli import main
from icmix.model import Dataset
from icmix.simulation import GenConfig, generate_dataset


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def sim_file(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--seed", "17", "--out", str(out)]) == 0
    return out / "data.csv"


class TestFit:
    def test_valid_file(self, sim_file, tmp_path):
        out = tmp_path / "fit"
        assert main(["fit", str(sim_file), "--out", str(out)]) == 0
        rows = read_rows(out / "estimates.csv")
        # r = 2 covariates, k = 3 I-spline coefficients, alpha and p
        assert len(rows) == 2 + 3 + 2
        assert [r["parameter"] for r in rows] == ["x1", "x2", "gamma1", "gamma2", "gamma3", "alpha", "p"]
        p = rows[-1]
        assert float(p["CI_lo"]) <= float(p["estimate"]) <= float(p["CI_hi"])
        surv = read_rows(out / "baseline_survival.csv")
        assert len(surv) == 101
        s = np.array([float(r["S0_hat"]) for r in surv])
        assert np.all(np.diff(s) <= 0) and s[0] == pytest.approx(1 - float(p["estimate"]))
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["diagnostics"]["converged"] is True
        assert manifest["command"] == "fit"

    @pytest.mark.parametrize("baseline, k", [("log", 1), ("linear", 1), ("quadratic", 2)])
    def test_parametric_baselines(self, sim_file, tmp_path, baseline, k):
        out = tmp_path / baseline
        assert main(["fit", str(sim_file), "--baseline", baseline, "--out", str(out)]) == 0
        assert len(read_rows(out / "estimates.csv")) == 2 + k + 2

    def test_reversed_interval(self, tmp_path, capsys):
        f = tmp_path / "bad.csv"
        f.write_text("id,L,R,x1\na,0,2,0.1\nsubj7,5,3,0.2\n")
        assert main(["fit", str(f), "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err
        assert "line 3" in err and "subj7" in err

    def test_malformed_row(self, tmp_path, capsys):
        f = tmp_path / "bad.csv"
        f.write_text("id,L,R,x1\na,0,2,0.1\nb,1,zz,0.2\n")
        assert main(["fit", str(f), "--out", str(tmp_path / "o")]) == 1
        assert "line 3" in capsys.readouterr().err

    def test_missing_header(self, tmp_path):
        f = tmp_path / "bad.csv"
        f.write_text("a,0,2,0.1\n")
        assert main(["fit", str(f), "--out", str(tmp_path / "o")]) == 1

    def test_no_instantaneous_failures(self, tmp_path, capsys):
        data = generate_dataset(GenConfig(p=0.0, reps=1, seed=5), 0)
        f = tmp_path / "d.csv"
        io.write_dataset(f, data)
        out = tmp_path / "o"
        assert main(["fit", str(f), "--baseline", "log", "--out", str(out)]) == 0
        rows = {r["parameter"]: r for r in read_rows(out / "estimates.csv")}
        assert float(rows["p"]["estimate"]) == 0.0
        assert "alpha at boundary" in capsys.readouterr().err

    def test_nonconvergence_exit_code(self, sim_file, tmp_path):
        assert main(["fit", str(sim_file), "--max-iter", "2", "--out", str(tmp_path / "o")]) == 2


class TestSimulate:
    def test_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["simulate", "--seed", "3", "--out", str(a)])
        main(["simulate", "--seed", "3", "--out", str(b)])
        assert (a / "data.csv").read_bytes() == (b / "data.csv").read_bytes()

    def test_inf_only_on_right_censored(self, sim_file):
        for row in read_rows(sim_file):
            if row["R"] == "inf":
                assert float(row["L"]) > 0
            else:
                assert math.isfinite(float(row["R"]))

    @pytest.mark.parametrize("seed", range(20))
    def test_instantaneous_count_plausible(self, tmp_path, seed):
        out = tmp_path / str(seed)
        main(["simulate", "--seed", str(seed), "--beta1", "0", "--beta2", "0", "--out", str(out)])
        rows = read_rows(out / "data.csv")
        count = sum(r["L"] == "0" and r["R"] == "0" for r in rows)
        assert len(rows) == 100 and 12 <= count <= 48

    def test_roundtrip_lossless(self, sim_file):
        data = io.read_dataset(sim_file)
        original = generate_dataset(GenConfig(reps=1, seed=17), 0)
        np.testing.assert_array_equal(data.L, original.L)
        np.testing.assert_array_equal(data.R, original.R)
        np.testing.assert_array_equal(data.X, original.X)
        assert data.covariate_names == ("x1", "x2")

    def test_inf_token_case_insensitive(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("id,L,R,x1\na,2,INF,0.5\nb,0,0,1\n")
        data = io.read_dataset(f)
        assert isinstance(data, Dataset) and math.isinf(data.R[0])

    def test_invalid_scenario(self, tmp_path):
        assert main(["simulate", "--seed", "1", "--p", "1.5", "--out", str(tmp_path / "o")]) == 1
        with pytest.raises(SystemExit):
            main(["simulate", "--seed", "1", "--baseline", "weibull", "--out", str(tmp_path / "o")])


class TestStudy:
    def test_smoke_run(self, tmp_path):
        out = tmp_path / "study"
        start = time.perf_counter()
        assert main(["study", "--reps", "2", "--out", str(out)]) == 0
        elapsed = time.perf_counter() - start
        assert elapsed < 10.0
        rows = read_rows(out / "summary.csv")
        assert len(rows) == 16 * 4 * 3
        assert list(rows[0]) == ["scenario", "model", "parameter", "Bias", "SD", "ESE", "CP95"]
        curves = read_rows(out / "curves.csv")
        assert list(curves[0]) == ["scenario", "model", "t", "mean", "q025", "q975"]
        assert (out / "failures.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["reps"] == 2 and manifest["seed"] == 20240101

    def test_config_file_and_jobs_determinism(self, tmp_path):
        cfg = tmp_path / "study.cfg"
        cfg.write_text("# small study\nbaselines = log\nobs_processes = exp,unif\nbeta1 = -0.5\nbeta2 = 0.5\nreps = 3\nseed = 42\n")
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["study", "--config", str(cfg), "--models", "M1,M4", "--jobs", "1", "--out", str(a)]) == 0
        assert main(["study", "--config", str(cfg), "--models", "M1,M4", "--jobs", "2", "--out", str(b)]) == 0
        assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
        assert (a / "curves.csv").read_bytes() == (b / "curves.csv").read_bytes()
        assert len(read_rows(a / "summary.csv")) == 2 * 2 * 3

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "study.cfg"
        cfg.write_text("colour = blue\n")
        assert main(["study", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert main(["study", "--models", "M7", "--reps", "1", "--out", str(tmp_path / "o")]) == 1
