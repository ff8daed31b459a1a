"""Command-line surface: the simulate -> fit -> eval pipeline, predict
output, flag equivalences, thread overrides, and exit codes."""

import csv
import json
import math

import numpy as np
import pytest

from hdgcm.cli import main
from hdgcm.io import write_long_csv
from hdgcm.model import standardize

from conftest import make_dataset

# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def write_small_data(tmp_path, seed=0, n=8, r=3, name="small.csv"):
    rng = np.random.default_rng(seed)
    data = make_dataset(rng, n=n, r=r, p1=1, p2=1, T_choices=(3, 4))
    path = tmp_path / name
    write_long_csv(path, data)
    return str(path)


def read_params(out_dir):
    with open(out_dir / "params.json", encoding="utf-8") as fh:
        return json.load(fh)


def params_payload(doc):
    """The fitted quantities, with run bookkeeping (timing, config) dropped."""
    doc = dict(doc)
    doc.pop("timing")
    doc.pop("config")
    return doc


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["metric", "value"]
    return {name: float(value) for name, value in rows[1:]}


# ---------------------------------------------------------------------------
# end-to-end pipeline
# ---------------------------------------------------------------------------


def test_simulate_fit_eval_pipeline(tmp_path):
    d = tmp_path / "d"
    f = tmp_path / "f"
    assert main(["simulate", "--r", "50", "--n", "100", "--noise", "0.2",
                 "--seed", "1", "--out", str(d)]) == 0
    assert (d / "data.csv").exists() and (d / "truth.json").exists()

    assert main(["fit", "--data", str(d / "data.csv"), "--k-grid", "1..5",
                 "--tune", "--out", str(f), "--threads", "2"]) == 0
    doc = read_params(f)
    assert doc["schema"] == "hdgcm-fit/1"
    assert doc["K_hat"] in (1, 2, 3, 4, 5)
    assert len(doc["bic_table"]) == 5
    assert sum(row["selected"] for row in doc["bic_table"]) == 1
    assert (f / "trace.csv").exists()

    assert main(["eval", "--fit", str(f), "--truth", str(d / "truth.json")]) == 0
    metrics = read_metrics(f / "metrics.csv")
    # all six selection/accuracy criteria populated with sane values
    assert set(metrics) >= {"err_B", "err_G", "tpr_fixed", "fpr_fixed",
                            "tpr_random", "fpr_random"}
    assert math.isfinite(metrics["err_B"]) and 0.0 < metrics["err_B"] < 1.0
    assert math.isfinite(metrics["err_G"]) and 0.0 < metrics["err_G"] < 1.0
    for key in ("tpr_fixed", "fpr_fixed", "tpr_random", "fpr_random"):
        assert 0.0 <= metrics[key] <= 1.0
    assert metrics["tpr_fixed"] >= 0.8 and metrics["fpr_fixed"] <= 0.2
    assert metrics["K_hat"] == doc["K_hat"]


def test_simulate_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["simulate", "--r", "10", "--n", "12", "--seed", "4",
                     "--out", str(out)]) == 0
    assert (a / "data.csv").read_bytes() == (b / "data.csv").read_bytes()
    assert (a / "truth.json").read_bytes() == (b / "truth.json").read_bytes()


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def test_predict_zero_slope_fit_emits_flat_curves(tmp_path):
    data_path = write_small_data(tmp_path, seed=1)
    f = tmp_path / "f"
    # penalties large enough to zero every slope term in stage two
    assert main(["fit", "--data", data_path, "--k", "1",
                 "--lambda-d", "1e6", "--lambda-b", "1e6",
                 "--max-iter", "10", "--out", str(f)]) == 0
    doc = read_params(f)
    assert not any(any(row) for row in doc["mask_fixed"])
    assert not any(doc["mask_random"])

    p = tmp_path / "p"
    assert main(["predict", "--fit", str(f), "--data", data_path,
                 "--out", str(p)]) == 0
    with open(p / "curves.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["level", "label", "outcome", "intercept", "slope"]
    body = rows[1:]
    assert len(body) == 3 + 1 * 3 + 8 * 3  # population, group, individual
    assert all(float(row[4]) == 0.0 for row in body)
    assert any(float(row[3]) != 0.0 for row in body)  # intercepts survive


# ---------------------------------------------------------------------------
# flag equivalences
# ---------------------------------------------------------------------------


def test_fixed_zero_penalties_equal_tune_with_singleton_zero_grids(tmp_path):
    data_path = write_small_data(tmp_path, seed=2)
    base = ["--data", data_path, "--k", "2", "--max-iter", "15"]
    f_fixed, f_tuned = tmp_path / "fixed", tmp_path / "tuned"
    assert main(["fit"] + base + ["--lambda-d", "0", "--lambda-b", "0",
                                  "--out", str(f_fixed)]) == 0
    assert main(["fit"] + base + ["--tune", "--lambda-d-grid", "0",
                                  "--lambda-b-grid", "0",
                                  "--out", str(f_tuned)]) == 0
    assert params_payload(read_params(f_fixed)) == params_payload(read_params(f_tuned))


def test_tune_subcommand_equals_fit_with_fixed_penalties_on_singletons(tmp_path):
    data_path = write_small_data(tmp_path, seed=3)
    base = ["--data", data_path, "--k", "1", "--max-iter", "10"]
    f_a, f_b = tmp_path / "a", tmp_path / "b"
    assert main(["tune"] + base + ["--lambda-d-grid", "0.05",
                                   "--lambda-b-grid", "0.02",
                                   "--out", str(f_a)]) == 0
    assert main(["fit"] + base + ["--lambda-d", "0.05", "--lambda-b", "0.02",
                                  "--out", str(f_b)]) == 0
    assert params_payload(read_params(f_a)) == params_payload(read_params(f_b))


# ---------------------------------------------------------------------------
# thread control
# ---------------------------------------------------------------------------


def test_threads_flag_and_env_are_equivalent(tmp_path, monkeypatch):
    data_path = write_small_data(tmp_path, seed=5, n=10)
    base = ["fit", "--data", data_path, "--k", "1",
            "--lambda-d", "0.1", "--lambda-b", "0.1", "--max-iter", "8"]
    outs = [tmp_path / name for name in ("t1", "t3", "env")]

    monkeypatch.delenv("HDGCM_THREADS", raising=False)
    assert main(base + ["--threads", "1", "--out", str(outs[0])]) == 0
    assert main(base + ["--threads", "3", "--out", str(outs[1])]) == 0
    monkeypatch.setenv("HDGCM_THREADS", "3")
    assert main(base + ["--out", str(outs[2])]) == 0

    docs = [params_payload(read_params(out)) for out in outs]
    assert docs[0] == docs[1] == docs[2]
    # the flag wins over the environment when both are present
    monkeypatch.setenv("HDGCM_THREADS", "not-a-number")
    out4 = tmp_path / "t4"
    assert main(base + ["--threads", "2", "--out", str(out4)]) == 0
    assert params_payload(read_params(out4)) == docs[0]


def test_invalid_thread_env_is_a_runtime_error(tmp_path, monkeypatch):
    data_path = write_small_data(tmp_path, seed=6)
    monkeypatch.setenv("HDGCM_THREADS", "many")
    assert main(["fit", "--data", data_path, "--k", "1", "--lambda-d", "0.1",
                 "--lambda-b", "0.1", "--out", str(tmp_path / "f")]) == 1


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------


def test_usage_errors_exit_2(tmp_path):
    data_path = write_small_data(tmp_path, seed=7)
    out = str(tmp_path / "f")
    usage_cases = [
        # neither / both of --k and --k-grid
        ["fit", "--data", data_path, "--tune", "--out", out],
        ["fit", "--data", data_path, "--k", "2", "--k-grid", "1..3",
         "--tune", "--out", out],
        # penalties neither fixed nor tuned, or doubly specified
        ["fit", "--data", data_path, "--k", "1", "--out", out],
        ["fit", "--data", data_path, "--k", "1", "--tune",
         "--lambda-d", "0.1", "--lambda-b", "0.1", "--out", out],
        # malformed grids / ranges
        ["fit", "--data", data_path, "--k-grid", "5..1", "--tune", "--out", out],
        ["fit", "--data", data_path, "--k-grid", "0..3", "--tune", "--out", out],
        ["fit", "--data", data_path, "--k-grid", "abc", "--tune", "--out", out],
        ["fit", "--data", data_path, "--k", "1", "--tune",
         "--lambda-d-grid", "0.1,-0.2", "--out", out],
        # tune subcommand rejects fixed-penalty flags outright
        ["tune", "--data", data_path, "--k", "1", "--lambda-d", "0.1",
         "--out", out],
        # unknown subcommand / missing required flag
        ["explain", "--data", data_path],
        ["fit", "--k", "1", "--tune", "--out", out],
    ]
    for argv in usage_cases:
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_runtime_errors_exit_1(tmp_path):
    out = str(tmp_path / "f")
    assert main(["fit", "--data", str(tmp_path / "missing.csv"), "--k", "1",
                 "--lambda-d", "0", "--lambda-b", "0", "--out", out]) == 1

    bad = tmp_path / "bad.csv"
    bad.write_text("subject,time,y_1\na,1.0,oops\n", encoding="utf-8")
    assert main(["fit", "--data", str(bad), "--k", "1",
                 "--lambda-d", "0", "--lambda-b", "0", "--out", out]) == 1

    not_truth = tmp_path / "t.json"
    not_truth.write_text(json.dumps({"schema": "other/1"}), encoding="utf-8")
    data_path = write_small_data(tmp_path, seed=8)
    f = tmp_path / "fit_ok"
    assert main(["fit", "--data", data_path, "--k", "1", "--lambda-d", "0.1",
                 "--lambda-b", "0.1", "--out", str(f)]) == 0
    assert main(["eval", "--fit", str(f), "--truth", str(not_truth)]) == 1


def test_iteration_cap_is_success_with_converged_false(tmp_path):
    data_path = write_small_data(tmp_path, seed=9)
    f = tmp_path / "f"
    assert main(["fit", "--data", data_path, "--k", "1", "--lambda-d", "0.01",
                 "--lambda-b", "0.01", "--max-iter", "1", "--tol", "1e-12",
                 "--out", str(f)]) == 0
    doc = read_params(f)
    assert doc["converged"] is False
