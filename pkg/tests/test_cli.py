import csv
import json
import shutil

import numpy as np
import pytest

from envbounds import cli
from envbounds.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main
from envbounds.learners import load_estimator


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path)])


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    base = ["--dataset", "dataset1", "--n", "1500", "--seeds", "1,2", "--methods", "naive,cb_pi,cb_dr",
            "--out", str(out)]
    for cmd in ("simulate", "fit", "evaluate", "export"):
        assert main([cmd, *base]) == EXIT_OK
    return out, base


def test_simulate_sizes_and_determinism(tmp_path):
    assert _run(tmp_path / "a", "simulate", "--n", "10000", "--seeds", "1") == EXIT_OK
    d = tmp_path / "a" / "data" / "dataset1" / "seed1"
    sizes = [len(_read(d / f"{p}.csv")) for p in ("train", "val", "test")]
    assert sizes == [7000, 1000, 2000]
    assert (d / "oracle.csv").exists() and (d / "train.csv.meta.json").exists()
    assert _run(tmp_path / "b", "simulate", "--n", "10000", "--seeds", "1") == EXIT_OK
    d2 = tmp_path / "b" / "data" / "dataset1" / "seed1"
    for name in ("train.csv", "test.csv", "oracle.csv", "train.csv.meta.json"):
        assert (d / name).read_bytes() == (d2 / name).read_bytes()


def test_simulate_dataset2_oracle_delta(tmp_path):
    assert _run(tmp_path, "simulate", "--dataset", "dataset2", "--n", "500", "--seeds", "3", "--grid", "41") == 0
    rows = _read(tmp_path / "data" / "dataset2" / "seed3" / "oracle.csv")
    assert len(rows) == 41
    x = np.array([float(r["x"]) for r in rows])
    np.testing.assert_allclose([float(r["delta_1"]) for r in rows], 0.15 * np.sin(5 * x) + 0.5, atol=1e-12)
    assert rows[0]["config_hash"]


def test_fit_artifacts(small_run):
    out, _ = small_run
    for method in ("naive", "cb_pi", "cb_dr"):
        for seed in (1, 2):
            est, meta = load_estimator(out / "models" / "dataset1" / method / f"seed{seed}.joblib")
            assert meta["seed"] == seed and meta["method"] == method
    naive, _ = load_estimator(out / "models" / "dataset1" / "naive" / "seed1.joblib")
    assert naive.stage2_ == {}
    log = _read(out / "models" / "fit_log.csv")
    assert len(log) == 6


def test_evaluate_outputs(small_run):
    out, _ = small_run
    summary = _read(out / "reports" / "dataset1" / "summary.csv")
    assert [r["row"] for r in summary] == ["WB naive", "WB", "CB naive", "CB-PI", "CB-DR"]
    hashes = {r["config_hash"] for r in summary}
    assert len(hashes) == 1
    report = json.loads((out / "reports" / "dataset1" / "cb_dr_cross.json").read_text())
    assert report["seeds"] == [1, 2] and report["config_hash"] in hashes
    manifest = json.loads((out / "manifest-evaluate.json").read_text())
    assert manifest["config"]["support"] == "minmax" and manifest["config_hash"] in hashes


def test_export_columns(small_run, tmp_path):
    out, base = small_run
    rows = _read(out / "export" / "dataset1" / "bounds.csv")
    assert len(rows) == 181
    cols = rows[0].keys()
    for c in ("x", "tau", "oracle_combined_upper", "cb_dr_combined_upper_mean", "cb_dr_combined_upper_std",
              "cb_dr_argmin", "cb_pi_upper_0_1_mean", "config_hash"):
        assert c in cols
    assert main(["export", *base, "--tightest-only"]) == EXIT_OK
    tight = _read(out / "export" / "dataset1" / "tightest.csv")
    assert "cb_pi_upper_0_1_mean" not in tight[0] and "cb_pi_argmin" in tight[0]
    assert main(["export", *base, "--seeds", "1", "--tightest-only"]) == EXIT_OK
    single = _read(out / "export" / "dataset1" / "tightest.csv")
    assert all(float(r["cb_dr_combined_upper_std"]) == 0.0 for r in single)


def test_evaluate_refuses_mixed_hashes(small_run, tmp_path):
    out, base = small_run
    mixed = tmp_path / "mixed"
    shutil.copytree(out, mixed)
    base = [a if a != str(out) else str(mixed) for a in base]
    # a different family changes the config hash; refit one artifact under it
    assert main(["fit", *base, "--methods", "cb_pi", "--seeds", "2", "--family", "knn"]) == EXIT_OK
    assert main(["evaluate", *base]) == EXIT_VALIDATION
    assert main(["evaluate", *base, "--family", "knn"]) == EXIT_VALIDATION


def test_empty_model_dir_lists_artifacts(tmp_path, capsys):
    assert _run(tmp_path, "simulate", "--n", "500", "--seeds", "1") == EXIT_OK
    assert _run(tmp_path, "evaluate", "--n", "500", "--seeds", "1", "--methods", "cb_dr") == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "missing estimator artifacts" in err and "cb_dr" in err


def test_fit_refuses_foreign_data(tmp_path):
    assert _run(tmp_path, "simulate", "--n", "500", "--seeds", "1") == EXIT_OK
    assert _run(tmp_path, "fit", "--n", "600", "--seeds", "1", "--methods", "naive") == EXIT_VALIDATION


@pytest.mark.parametrize("args", [
    ["fit", "--methods", "u_learner"],
    ["simulate", "--support", "quantile:0.9"],
    ["simulate", "--dataset", "dataset7"],
    ["simulate", "--dataset", "csv:/nonexistent.csv"],
    ["simulate", "--family", "forest"],
    ["simulate", "--folds", "0"],
    ["simulate", "--seeds", "one"],
    ["frobnicate"],
])
def test_validation_errors_exit_1(tmp_path, args):
    assert main([*args, "--out", str(tmp_path)]) == EXIT_VALIDATION


def test_runtime_failure_exits_2(tmp_path, monkeypatch):
    def boom(cfg):
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(cli._COMMANDS, "simulate", boom)
    assert _run(tmp_path, "simulate") == EXIT_RUNTIME


def test_config_file_and_overrides(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"dataset": "dataset2", "n": 400, "seeds": [4], "grid": 11}))
    assert _run(tmp_path / "o", "simulate", "--config", str(cfg_path), "--grid", "21") == EXIT_OK
    rows = _read(tmp_path / "o" / "data" / "dataset2" / "seed4" / "oracle.csv")
    assert len(rows) == 21
    cfg_path.write_text(json.dumps({"bogus": 1}))
    assert _run(tmp_path / "o", "simulate", "--config", str(cfg_path)) == EXIT_VALIDATION
    cfg_path.write_text("{not json")
    assert _run(tmp_path / "o", "simulate", "--config", str(cfg_path)) == EXIT_VALIDATION


def test_config_hash_ignores_fan_out_axes():
    a = cli.RunConfig(methods=("cb_dr",), seeds=(1,), out="x")
    b = cli.RunConfig(methods=("naive", "cb_pi"), seeds=(1, 2, 3), out="y")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != cli.RunConfig(family="knn").config_hash()


def _three_env_csv(path, n=1800, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    env = rng.choice(["north", "south", "west"], n)
    shift = np.select([env == "north", env == "south"], [-1.0, 1.0], 0.0)
    a = (rng.uniform(size=n) < 1 / (1 + np.exp(-(2 * x + shift)))).astype(int)
    y = x / 3 * a + x + rng.normal(scale=0.3, size=n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["env", "age", "a", "y"])
        w.writerows(zip(env, x, a, y))


def test_csv_dataset_real_mode(tmp_path):
    src = tmp_path / "clinics.csv"
    _three_env_csv(src)
    args = ["--dataset", f"csv:{src}", "--seeds", "1", "--methods", "cb_dr", "--out", str(tmp_path / "o")]
    for cmd in ("simulate", "fit", "evaluate", "export"):
        assert main([cmd, *args]) == EXIT_OK, cmd
    est, _ = load_estimator(tmp_path / "o" / "models" / "clinics" / "cb_dr" / "seed1.joblib")
    assert est.n_envs_ == 3
    assert len([k for k in est.stage2_ if k[0] == "+"]) == 9
    rows = _read(tmp_path / "o" / "reports" / "clinics" / "cb_dr_describe_seed1.csv")
    assert rows and "rmse_pooled" not in rows[0] and "combined_upper_mean" in rows[0]
    assert not (tmp_path / "o" / "reports" / "clinics" / "summary.csv").exists()
    export = _read(tmp_path / "o" / "export" / "clinics" / "bounds.csv")
    assert "tau" not in export[0] and "cb_dr_upper_2_1_mean" in export[0]
