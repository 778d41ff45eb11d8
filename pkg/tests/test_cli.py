import csv
import json
import subprocess
import sys
from importlib import resources

import jsonschema
import numpy as np
import pytest

from milasso.cli import config_hash, main, read_simulation_config
from milasso.weights import (
    build_bernoulli_swm,
    decompose,
    normalize_max_row_sum,
    read_basis,
    write_dense_csv,
    write_edge_list_csv,
)


def schema(name):
    return json.loads(resources.files("milasso").joinpath(f"schemas/{name}.schema.json").read_text())


def listing(path):
    return sorted(p.relative_to(path).as_posix() for p in path.rglob("*"))


@pytest.fixture
def planted(tmp_path):
    """CSV data set with a strong signal on eigenvector 3 of a saved graph."""
    n = 120
    w = build_bernoulli_swm(n, 8, 5)
    write_edge_list_csv(w, tmp_path / "w.csv")
    basis = decompose(normalize_max_row_sum(w))
    rng = np.random.default_rng(6)
    x1, x2 = rng.standard_normal(n), rng.standard_normal(n)
    y = 1 + x1 - 0.5 * x2 + 8.0 * np.sqrt(n) * basis.vectors[:, 3] * 0.5 + rng.standard_normal(n)
    with open(tmp_path / "data.csv", "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["y", "x1", "x2"])
        out.writerows(zip(y, x1, x2))
    return tmp_path


# decompose


def test_decompose_two_node(tmp_path, capsys):
    (tmp_path / "w.csv").write_text("0,1\n1,0\n")
    assert main(["decompose", str(tmp_path / "w.csv"), "--out", str(tmp_path / "b.bin")]) == 0
    side = json.loads((tmp_path / "b.bin.eigenvalues.json").read_text())
    assert side["eigenvalues"] == [1.0, -1.0]
    jsonschema.validate(side, schema("eigenvalues"))
    man = json.loads((tmp_path / "b.bin.manifest.json").read_text())
    jsonschema.validate(man, schema("manifest"))
    assert man["command"] == "decompose"
    assert np.allclose(read_basis(tmp_path / "b.bin").values, [1, -1])
    assert "n=2" in capsys.readouterr().out


def test_decompose_edge_list_equals_dense(tmp_path):
    w = build_bernoulli_swm(40, 5, 1)
    write_dense_csv(w, tmp_path / "d.csv")
    write_edge_list_csv(w, tmp_path / "e.csv")
    assert main(["decompose", str(tmp_path / "d.csv"), "--out", str(tmp_path / "d.bin")]) == 0
    assert main(["decompose", str(tmp_path / "e.csv"), "--out", str(tmp_path / "e.bin")]) == 0
    a = (tmp_path / "d.bin.eigenvalues.json").read_bytes()
    b = (tmp_path / "e.bin.eigenvalues.json").read_bytes()
    assert a == b
    assert (tmp_path / "d.bin").read_bytes() == (tmp_path / "e.bin").read_bytes()


def test_decompose_missing_file_no_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["decompose", str(tmp_path / "nope.csv"), "--out", str(out / "b.bin")])
    assert code != 0
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_decompose_asymmetric_rejected_with_line(tmp_path, capsys):
    (tmp_path / "w.csv").write_text("0,1\n1.1,0\n")
    assert main(["decompose", str(tmp_path / "w.csv"), "--out", str(tmp_path / "b.bin")]) == 1
    assert not (tmp_path / "b.bin").exists()
    assert "asymmetric" in capsys.readouterr().err


# estimate


def test_estimate_ols_empty_selection(planted):
    out = planted / "ols"
    args = ["estimate", str(planted / "data.csv"), "--y", "y", "--x", "x1", "x2",
            "--weights", str(planted / "w.csv"), "--method", "ols", "--out", str(out)]
    assert main(args) == 0
    rep = json.loads((out / "report.json").read_text())
    jsonschema.validate(rep, schema("report"))
    assert rep["selected_eigs"] == [] and rep["z_before"] == rep["z_after"]
    rows = (out / "coefficients.csv").read_text().splitlines()
    assert rows[0] == "name,estimate,se_plain,se_robust" and rows[1].startswith("const,")


def test_estimate_mi_plasso_finds_planted_index(planted, capsys):
    out = planted / "mi"
    args = ["estimate", str(planted / "data.csv"), "--y", "y", "--x", "x1", "x2",
            "--weights", str(planted / "w.csv"), "--method", "mi-lasso", "--post", "--out", str(out)]
    assert main(args) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["method"] == "mi_plasso" and 3 in rep["selected_eigs"]
    text = capsys.readouterr().out
    assert "Z before" in text and "selected eigenvectors" in text


def test_estimate_fstep_threshold(planted):
    out = planted / "fz"
    args = ["estimate", str(planted / "data.csv"), "--y", "y", "--x", "x1", "x2",
            "--weights", str(planted / "w.csv"), "--method", "fstep-z", "--epsilon", "0.1", "--out", str(out)]
    assert main(args) == 0
    rep = json.loads((out / "report.json").read_text())
    assert abs(rep["z_after"]) < 0.1 or "max_steps" in rep["flags"]


def test_estimate_with_cached_basis_matches(planted):
    assert main(["decompose", str(planted / "w.csv"), "--out", str(planted / "b.bin")]) == 0
    common = ["estimate", str(planted / "data.csv"), "--y", "y", "--x", "x1", "x2",
              "--weights", str(planted / "w.csv"), "--format", "json"]
    assert main(common + ["--out", str(planted / "a")]) == 0
    assert main(common + ["--basis", str(planted / "b.bin"), "--out", str(planted / "c")]) == 0
    a = json.loads((planted / "a" / "report.json").read_text())
    c = json.loads((planted / "c" / "report.json").read_text())
    assert a["selected_eigs"] == c["selected_eigs"] and a["beta"] == c["beta"]
    assert not (planted / "a" / "coefficients.csv").exists()


def test_estimate_errors_leave_nothing(planted, capsys):
    base = ["estimate", str(planted / "data.csv"), "--y", "y", "--weights", str(planted / "w.csv")]
    out = planted / "bad"
    assert main(base + ["--x", "x1", "--method", "ridge", "--out", str(out)]) == 1
    assert main(base + ["--x", "nope", "--out", str(out)]) == 1
    (planted / "small.csv").write_text("0,1\n1,0\n")
    small = ["estimate", str(planted / "data.csv"), "--y", "y", "--x", "x1", "--weights",
             str(planted / "small.csv"), "--out", str(out)]
    assert main(small) == 1
    assert not out.exists()
    err = capsys.readouterr().err
    assert "unknown method" in err and "missing column" in err and "rows" in err


def test_estimate_rank_deficient(planted, capsys):
    rows = list(csv.reader(open(planted / "data.csv")))
    with open(planted / "dup.csv", "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(rows[0] + ["x3"])
        out.writerows(r + [repr(2 * float(r[1]))] for r in rows[1:])
    args = ["estimate", str(planted / "dup.csv"), "--y", "y", "--x", "x1", "x3", "--method", "ols",
            "--weights", str(planted / "w.csv"), "--out", str(planted / "rd")]
    assert main(args) == 1
    assert not (planted / "rd").exists()
    assert "error" in capsys.readouterr().err


# simulate


def write_config(path, **extra):
    body = {"n": "40, 50", "mu": "6", "rho": "0.3; 0.7", "reps": "3", "seed": "11",
            "estimators": "mi_lasso, fstep_z", **extra}
    path.write_text("[simulation]\n" + "".join(f"{k} = {v}\n" for k, v in body.items()))
    return path


def test_simulate_config_outputs_and_schema(tmp_path):
    cfg = write_config(tmp_path / "sim.ini")
    out = tmp_path / "run"
    assert main(["simulate", str(cfg), "--out", str(out)]) == 0
    assert listing(out) == ["manifest.json", "runtimes.csv", "summary.csv", "summary.json"]
    jsonschema.validate(json.loads((out / "summary.json").read_text()), schema("summary"))
    man = json.loads((out / "manifest.json").read_text())
    jsonschema.validate(man, schema("manifest"))
    assert man["seed"] == 11
    lines = (out / "summary.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 2 * 2


def test_simulate_byte_identical_serial_parallel(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "sim.ini", reps="1")
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["simulate", str(cfg), "--out", str(a)]) == 0
    assert main(["simulate", str(cfg), "--out", str(b)]) == 0
    monkeypatch.setenv("ESF_THREADS", "2")
    assert main(["simulate", str(cfg), "--out", str(c)]) == 0
    for name in ("summary.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes() == (c / name).read_bytes()
    ha = json.loads((a / "manifest.json").read_text())["config_hash"]
    hc = json.loads((c / "manifest.json").read_text())["config_hash"]
    assert ha == hc


def test_simulate_unknown_keys_listed(tmp_path, capsys):
    cfg = write_config(tmp_path / "sim.ini", colour="red", speed="9")
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "colour" in err and "speed" in err
    assert not (tmp_path / "o").exists()


def test_simulate_unknown_estimator(tmp_path, capsys):
    cfg = write_config(tmp_path / "sim.ini", estimators="mi_lasso, ridge")
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "ridge" in capsys.readouterr().err
    assert main(["simulate", "--setup", "A", "--n", "40", "--mu", "6", "--reps", "1",
                 "--estimators", "ridge", "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_simulate_bad_threads(tmp_path, capsys):
    cfg = write_config(tmp_path / "sim.ini", reps="1")
    assert main(["simulate", str(cfg), "--threads", "zero", "--out", str(tmp_path / "o")]) == 1
    assert "threads" in capsys.readouterr().err


def test_config_reader_grid(tmp_path):
    specs = read_simulation_config(write_config(tmp_path / "sim.ini", fixed_w="yes"))
    assert [(s.n, s.rho) for s in specs] == [(40, (0.3,)), (40, (0.7,)), (50, (0.3,)), (50, (0.7,))]
    assert all(s.fixed_w and s.estimators == ("mi_lasso", "fstep_z") for s in specs)


@pytest.mark.slow
def test_simulate_setup_b_preset(tmp_path):
    out = tmp_path / "b"
    with pytest.warns(UserWarning):
        code = main(["simulate", "--setup", "B", "--n", "100", "--mu", "8", "--reps", "200",
                     "--estimators", "mi-lasso", "--seed", "2024", "--out", str(out)])
    assert code == 0
    row = next(csv.DictReader(open(out / "summary.csv")))
    print(f"setup B n=100 mu=8 mi_lasso bias={float(row['bias']):.4f} mse={float(row['mse']):.4f}")
    assert abs(float(row["bias"]) - 0.017) <= 0.01


# bench


def test_bench_single_row_and_infeasible(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--n", "60", "--methods", "mi-lasso", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "bench.csv")))
    assert len(rows) == 1 and float(rows[0]["relative"]) == 1.0
    jsonschema.validate(json.loads((out / "bench.json").read_text()), schema("bench"))
    out2 = tmp_path / "bench2"
    assert main(["bench", "--n", "70", "--methods", "mi-lasso", "fstep-z", "--fstep-max-n", "50",
                 "--out", str(out2), "--format", "csv"]) == 0
    rows = list(csv.DictReader(open(out2 / "bench.csv")))
    assert rows[1]["status"] == "infeasible" and rows[1]["seconds"] == ""
    assert not (out2 / "bench.json").exists()


def test_bench_unknown_method(tmp_path):
    assert main(["bench", "--n", "60", "--methods", "ridge", "--out", str(tmp_path / "x")]) == 1
    assert not (tmp_path / "x").exists()


@pytest.mark.slow
def test_bench_n250_ordering(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--n", "250", "--out", str(out)]) == 0
    rel = {r["method"]: float(r["relative"]) for r in csv.DictReader(open(out / "bench.csv"))}
    print(f"n=250 relative times: {rel}")
    assert rel["cv_lasso"] > 1
    assert rel["fstep_z"] > rel["cv_lasso"]


# manifest and entry point


def test_config_hash_key_order():
    a = {"n": [1, 2], "mu": 8.0, "nested": {"x": 1, "y": [0.5]}}
    b = {"nested": {"y": [0.5], "x": 1}, "mu": 8.0, "n": [1, 2]}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({**a, "mu": 8.5})


def test_seed_range_checked(tmp_path):
    with pytest.raises(SystemExit):
        main(["bench", "--n", "60", "--seed", str(2**64), "--out", str(tmp_path / "x")])


def test_console_script_runs(tmp_path):
    (tmp_path / "w.csv").write_text("0,1\n1,0\n")
    res = subprocess.run([sys.executable, "-m", "milasso.cli", "decompose", str(tmp_path / "w.csv"),
                          "--out", str(tmp_path / "b.bin")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "milasso.cli", "--version"], capture_output=True, text=True)
    assert res.stdout.strip().startswith("milasso ")
