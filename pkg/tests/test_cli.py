import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from csforest import csf
from csforest.cli import main, top_fraction_mask

FAST = ["--num-trees", "60", "--nuisance-num-trees", "40"]
SCHEMA = ["--outcome", "y", "--treatment", "w", "--event", "d", "--covariates", "x1,x2,x3"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def sim_csv(workdir):
    path = workdir / "sim.csv"
    assert main(["simulate", "--n", "400", "--p", "3", "--effect", "step", "--effect-value", "200",
                 "--prognostic", "1", "--censoring-fraction", "0.25", "--seed", "5",
                 "--output", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def model_path(workdir, sim_csv):
    path = workdir / "model.npz"
    assert main(["fit", "--data", str(sim_csv), *SCHEMA, "--horizon", "720", *FAST,
                 "--model", str(path), "--diagnostics", str(workdir / "diag.json")]) == 0
    return path


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestSimulate:
    def test_files(self, sim_csv, capsys):
        with open(sim_csv, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["y", "w", "d", "x1", "x2", "x3"] and len(rows) == 401
        truth = json.loads(sim_csv.with_name("sim.csv.truth.json").read_text())
        assert truth["ate"] == 100 and truth["spec"]["effect_covariate"] == 1

    def test_byte_identical(self, tmp_path, capsys):
        for name in ("a.csv", "b.csv"):
            assert run(capsys, "simulate", "--n", "50", "--censoring-rate", "0.002", "--seed", "1",
                       "--output", tmp_path / name)[0] == 0
        assert digest(tmp_path / "a.csv") == digest(tmp_path / "b.csv")
        assert b"\r\n" in (tmp_path / "a.csv").read_bytes()

    def test_conflicting_censoring_flags(self, tmp_path, capsys):
        code, _, err = run(capsys, "simulate", "--n", "10", "--censoring-rate", "0.1",
                           "--censoring-fraction", "0.2", "--output", tmp_path / "x.csv")
        assert code == 6 and "at most one" in err and not (tmp_path / "x.csv").exists()


class TestFit:
    def test_diagnostics(self, workdir, model_path):
        diag = json.loads((workdir / "diag.json").read_text())
        assert diag["params"]["horizon"] == 720 and diag["params"]["num_trees"] == 60
        assert diag["model_hash"] == csf.load_model(model_path).model_hash()
        text = (workdir / "diag.json").read_text()
        assert text == json.dumps(diag, sort_keys=True, indent=2) + "\n"

    def test_same_seed_same_bytes(self, tmp_path, sim_csv, model_path, capsys):
        out = tmp_path / "again.npz"
        code, stdout, err = run(capsys, "fit", "--data", sim_csv, *SCHEMA, "--horizon", 720, *FAST,
                                "--model", out)
        assert code == 0 and err == ""
        assert digest(out) == digest(model_path)
        assert json.loads(stdout)["model_hash"] == csf.load_model(out).model_hash()

    def test_missing_file(self, tmp_path, capsys):
        code, out, err = run(capsys, "fit", "--data", tmp_path / "nope.csv", *SCHEMA,
                             "--horizon", 720, "--model", tmp_path / "m.npz")
        assert code == 3 and out == "" and "nope.csv" in err

    def test_missing_column(self, tmp_path, sim_csv, capsys):
        code, _, err = run(capsys, "fit", "--data", sim_csv, "--outcome", "time", "--treatment", "w",
                           "--event", "d", "--covariates", "x1", "--horizon", 720, "--model", tmp_path / "m.npz")
        assert code == 4 and "time" in err

    def test_bad_horizon_writes_nothing(self, tmp_path, sim_csv, capsys):
        target = tmp_path / "m.npz"
        code, out, _ = run(capsys, "fit", "--data", sim_csv, *SCHEMA, "--horizon", -1,
                           "--model", target)
        assert code == 6 and out == "" and list(tmp_path.iterdir()) == []

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["fit", "--data", "x.csv"])
        assert exc.value.code == 2


class TestDownstream:
    def test_predict_oob_matches_library(self, model_path, sim_csv, capsys):
        code, out, _ = run(capsys, "predict", "--model", model_path, "--oob", "--data", sim_csv, *SCHEMA)
        assert code == 0
        rows = list(csv.reader(out.splitlines()))
        assert rows[0] == ["row", "tau_hat"]
        tau = np.array([float(r[1]) for r in rows[1:]])
        np.testing.assert_array_equal(tau, csf.predict_cate(csf.load_model(model_path)))

    def test_predict_new_covariates(self, model_path, tmp_path, capsys):
        path = tmp_path / "new.csv"
        path.write_text("x3,x1,x2\n0.5,0.9,0.1\n0.5,0.1,0.1\n")
        code, out, _ = run(capsys, "predict", "--model", model_path, "--data", path)
        assert code == 0
        want = csf.predict_cate(csf.load_model(model_path), np.array([[0.9, 0.1, 0.5], [0.1, 0.1, 0.5]]))
        got = [float(r.split(",")[1]) for r in out.splitlines()[1:]]
        np.testing.assert_array_equal(got, want)

    def test_fingerprint_mismatch(self, model_path, tmp_path, capsys):
        other = tmp_path / "other.csv"
        assert run(capsys, "simulate", "--n", "400", "--p", "3", "--seed", "99", "--censoring-rate", "0.003",
                   "--output", other)[0] == 0
        code, out, err = run(capsys, "predict", "--model", model_path, "--oob", "--data", other, *SCHEMA)
        assert code == 11 and out == ""

    def test_bad_model_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.npz"
        bad.write_text("not a model")
        assert run(capsys, "ate", "--model", bad)[0] == 12

    def test_ate(self, model_path, capsys):
        code, out, _ = run(capsys, "ate", "--model", model_path, "--format", "json")
        doc = json.loads(out)
        assert code == 0 and set(doc) == {"estimate", "std_err"} and doc["std_err"] > 0
        code, table, _ = run(capsys, "ate", "--model", model_path)
        assert table.splitlines()[0].split() == ["estimate", "std.err"]
        assert table.splitlines()[1].split() == [f"{doc['estimate']:.1f}", f"{doc['std_err']:.1f}"]

    def test_blp(self, model_path, capsys):
        code, out, _ = run(capsys, "blp", "--model", model_path, "--projection", "x1", "--format", "json")
        doc = json.loads(out)
        assert code == 0 and list(doc) == sorted(doc) and "x1" in doc
        code, out, _ = run(capsys, "blp", "--model", model_path, "--format", "csv")
        assert out.splitlines()[0] == "term,estimate,std_error,t_value,p_value"
        assert run(capsys, "blp", "--model", model_path, "--projection", "zz")[0] == 4

    def test_rate_outputs(self, model_path, tmp_path, capsys):
        csv_out, svg_out = tmp_path / "toc.csv", tmp_path / "toc.svg"
        code, out, _ = run(capsys, "rate", "--model", model_path, "--n-bootstrap", 20,
                           "--toc-csv", csv_out, "--toc-svg", svg_out)
        assert code == 0 and out.startswith("AUTOC: ") and "+/-" in out
        lines = csv_out.read_text().splitlines()
        assert lines[0] == "q,toc" and len(lines) == 401 and float(lines[-1].split(",")[1]) == 0.0
        assert svg_out.read_text().startswith("<?xml") and "<polyline" in svg_out.read_text()
        code, again, _ = run(capsys, "rate", "--model", model_path, "--n-bootstrap", 20)
        assert again == out

    def test_rate_constant_priorities(self, model_path, capsys):
        code, out, _ = run(capsys, "rate", "--model", model_path, "--priorities", "constant",
                           "--n-bootstrap", 10, "--format", "json")
        doc = json.loads(out)
        # with every priority tied the ranking is by unit id, which carries no signal
        assert code == 0 and doc["priorities"] == "constant"
        assert run(capsys, "rate", "--model", model_path, "--priorities", "nope")[0] == 6

    def test_report(self, model_path, sim_csv, tmp_path, capsys):
        svg = tmp_path / "hist.svg"
        code, out, _ = run(capsys, "report", "--model", model_path, "--data", sim_csv, *SCHEMA,
                           "--histogram-svg", svg, "--histogram-csv", tmp_path / "hist.csv",
                           "--format", "json")
        doc = json.loads(out)
        assert code == 0 and set(doc["covariate_means"]) == {"full.sample", "top.20"}
        # the step effect is on x2, so the top fifth should sit at high x2
        assert doc["covariate_means"]["top.20"]["x2"] > doc["covariate_means"]["full.sample"]["x2"]
        assert "<rect" in svg.read_text()
        code, table, _ = run(capsys, "report", "--model", model_path)
        assert "full.sample" in table and "Median" in table

    def test_report_histogram_needs_data(self, model_path, tmp_path, capsys):
        assert run(capsys, "report", "--model", model_path, "--histogram-svg", tmp_path / "h.svg")[0] == 6


def test_top_fraction_mask():
    tau = np.arange(10.0)
    assert top_fraction_mask(tau, 0.2).sum() == 2 and top_fraction_mask(tau, 0.2)[-2:].all()


class TestFetch:
    def test_from_file_and_digest(self, tmp_path, capsys):
        src = tmp_path / "src.csv"
        rng = np.random.default_rng(0)
        lines = ["days,treatment,delta,age,hsged,white,children,married,male"]
        for _ in range(30):
            flags = ",".join(str(v) for v in rng.integers(0, 2, 5))
            lines.append(f"{rng.uniform(1, 900):.0f},{rng.integers(0, 2)},{rng.integers(0, 2)},"
                         f"{rng.integers(20, 60)},{flags}")
        src.write_text("\n".join(lines) + "\n")
        out = tmp_path / "jtpa.csv"
        code, stdout, _ = run(capsys, "fetch-jtpa", "--from-file", src, "--output", out)
        assert code == 0 and out.read_bytes() == src.read_bytes()
        assert json.loads(stdout)["sha256"] == digest(src)
        code, _, err = run(capsys, "fetch-jtpa", "--from-file", src, "--output", tmp_path / "j2.csv",
                           "--sha256", "0" * 64)
        assert code == 13 and not (tmp_path / "j2.csv").exists()


def test_module_entry_point(sim_csv):
    proc = subprocess.run([sys.executable, "-m", "csforest", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "fetch-jtpa" in proc.stdout
