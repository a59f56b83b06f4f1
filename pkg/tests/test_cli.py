"""Command surface: fit, predict, simulate, evaluate."""

import csv

import numpy as np
import pytest

from memoe import FitConfig, fit_baseline, gen_example2
from memoe.cli import main

from conftest import dataset_to_csv


SCHEMA_TEXT = ("subject_col=sid\ny_col=y\nx_cols=x1,x2,x3,x4,x5\n"
               "z_cols=z1\nw_cols=w1\n")


def _write_inputs(tmp_path, tau=5.0, seed=31):
    ds, truth = gen_example2(tau=tau, seed=seed)
    train = ds.subset(range(80))
    test = ds.subset(range(80, 100))
    data = tmp_path / "train.csv"
    new = tmp_path / "test.csv"
    dataset_to_csv(train, data)
    dataset_to_csv(test, new)
    schema = tmp_path / "schema.txt"
    schema.write_text(SCHEMA_TEXT)
    return ds, train, test, data, new, schema


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestFitPredictEvaluate:
    def test_full_pipeline(self, tmp_path):
        ds, train, test, data, new, schema = _write_inputs(tmp_path)
        model = tmp_path / "model.json"
        report = tmp_path / "report.csv"
        config = tmp_path / "fit.cfg"
        config.write_text("k=1\nn_starts=2\nem_rel_tol=1e-5\n")
        rc = main(["fit", "--data", str(data), "--schema", str(schema),
                   "--config", str(config), "--k", "2", "--seed", "3",
                   "--out", str(model), "--report", str(report)])
        assert rc == 0
        assert model.exists() and report.exists()
        rows = _read_csv(report)
        config_rows = {r["key"]: r for r in rows
                       if r["section"] == "config"}
        assert config_rows["K"]["value"] == "2"
        assert config_rows["K"]["source"] == "flag"
        assert config_rows["n_starts"]["value"] == "2"
        assert config_rows["n_starts"]["source"] == "file"
        assert config_rows["max_em_iters"]["source"] == "default"
        assert any(r["section"] == "trace" for r in rows)
        assert any(r["section"] == "sandwich_se" for r in rows)

        pred = tmp_path / "pred.csv"
        rc = main(["predict", "--model", str(model), "--data", str(new),
                   "--schema", str(schema), "--q", "0.05",
                   "--grid-cells", "2000", "--out", str(pred)])
        assert rc == 0
        pred_rows = _read_csv(pred)
        assert pred_rows
        masses = [float(r["achieved_mass"]) for r in pred_rows]
        assert min(masses) >= 0.95 - 1e-9

        metrics = tmp_path / "metrics.csv"
        rc = main(["evaluate", "--pred", str(pred), "--data", str(new),
                   "--schema", str(schema), "--out", str(metrics)])
        assert rc == 0
        m = _read_csv(metrics)[0]
        assert int(m["n"]) == test.total_obs
        assert 0.85 <= float(m["coverage"]) <= 1.0
        # The archive-based point predictions should beat the
        # no-random-effects mixture baseline on the same split.
        cfg = FitConfig(K=2, n_starts=2, em_rel_tol=1e-5, seed=3)
        moe = fit_baseline(train, "moe", cfg)
        from memoe import point_predict
        se = []
        for s in test.subjects:
            for j in range(s.n_obs):
                se.append((point_predict(s.X[j], s.Z[j], s.w, moe)
                           - s.y[j]) ** 2)
        assert float(m["pmse"]) < float(np.mean(se))

    def test_fit_is_idempotent(self, tmp_path):
        _, _, _, data, _, schema = _write_inputs(tmp_path, tau=0.5)
        out1, out2 = tmp_path / "m1.json", tmp_path / "m2.json"
        for out in (out1, out2):
            rc = main(["fit", "--data", str(data), "--schema", str(schema),
                       "--k", "1", "--out", str(out),
                       "--report", str(tmp_path / (out.stem + ".csv")),
                       "--no-sandwich"])
            assert rc == 0
        assert out1.read_bytes() == out2.read_bytes()


class TestSimulateCommand:
    def test_deterministic_output(self, tmp_path):
        out1, out2 = tmp_path / "s1.csv", tmp_path / "s2.csv"
        args = ["simulate", "--design", "example2", "--reps", "2",
                "--seed", "7", "--tau", "0.1", "--methods", "memoe,moe",
                "--n-starts", "1", "--em-rel-tol", "1e-5",
                "--grid-cells", "400"]
        assert main(args + ["--out", str(out1)]) == 0
        assert main(args + ["--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        rows = _read_csv(out1)
        metrics = {r["metric"] for r in rows}
        assert {"bias", "mse", "pmse", "coverage",
                "mean_length", "failures"} <= metrics

    def test_example1_smoke(self, tmp_path):
        out = tmp_path / "s.csv"
        rc = main(["simulate", "--design", "example1", "--reps", "1",
                   "--seed", "7", "--methods", "memoe", "--n-starts", "1",
                   "--em-rel-tol", "1e-4", "--grid-cells", "200",
                   "--out", str(out)])
        assert rc == 0
        rows = _read_csv(out)
        fails = [r for r in rows if r["metric"] == "failures"]
        assert all(float(r["value"]) == 0 for r in fails)


class TestErrorHandling:
    def test_missing_column_exits_nonzero_without_output(self, tmp_path,
                                                         capsys):
        data = tmp_path / "bad.csv"
        data.write_text("sid,y\n1,2\n")
        schema = tmp_path / "schema.txt"
        schema.write_text(SCHEMA_TEXT)
        out = tmp_path / "model.json"
        rc = main(["fit", "--data", str(data), "--schema", str(schema),
                   "--out", str(out), "--report",
                   str(tmp_path / "rep.csv")])
        assert rc == 2
        err = capsys.readouterr().err
        assert err.startswith("error: DataError:")
        assert "\n" not in err.strip()
        assert not out.exists()
        assert not (tmp_path / "rep.csv").exists()

    def test_unreadable_model_reports_archive_error(self, tmp_path, capsys):
        bad = tmp_path / "model.json"
        bad.write_text("not json")
        schema = tmp_path / "schema.txt"
        schema.write_text(SCHEMA_TEXT)
        data = tmp_path / "d.csv"
        ds, _ = gen_example2(tau=0.1, seed=1)
        dataset_to_csv(ds.subset(range(2)), data)
        rc = main(["predict", "--model", str(bad), "--data", str(data),
                   "--schema", str(schema), "--out",
                   str(tmp_path / "p.csv")])
        assert rc == 2
        assert "ArchiveError" in capsys.readouterr().err

    def test_missing_file_handled(self, tmp_path, capsys):
        schema = tmp_path / "schema.txt"
        schema.write_text(SCHEMA_TEXT)
        rc = main(["fit", "--data", str(tmp_path / "nope.csv"),
                   "--schema", str(schema),
                   "--out", str(tmp_path / "m.json"),
                   "--report", str(tmp_path / "r.csv")])
        assert rc == 2
        assert "error:" in capsys.readouterr().err
