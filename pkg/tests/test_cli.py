import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from cfrl import cli
from cfrl.cli import METRICS_HEADER, main, run_theorem2_suite
from cfrl.env import read_transitions

SD_CFG = {
    "benchmark": "SD",
    "method": "ctrl_g",
    "n_trials": 6,
    "k_cf": 2,
    "eval_trials": 2,
    "scm": {"gen_widths": [16, 16], "enc_widths": [16, 16],
            "disc_widths": [16, 16], "noise_hidden": 4, "batch": 64,
            "steps": 80, "report_every": 40, "snapshot_every": 40},
    "d3qn": {"hidden": [16, 16], "steps": 60, "batch": 32, "lr": 1e-3,
             "target_sync": 30, "report_every": 30, "snapshot_every": 30},
}

HD_CFG = {
    "benchmark": "HD",
    "method": "ctrl_p",
    "trials_per_group": 2,
    "tau": 3,
    "k": 2,
    "k_cf": 2,
    "eval_trials": 2,
    "scm": {"gen_widths": [16, 16], "enc_widths": [16, 16],
            "disc_widths": [16, 16], "noise_hidden": 4, "lstm_hidden": 12,
            "batch": 64, "steps": 80, "report_every": 40,
            "snapshot_every": 40},
    "d3qn": {"hidden": [16, 16], "steps": 60, "batch": 32, "lr": 1e-3,
             "target_sync": 30, "report_every": 30, "snapshot_every": 30},
}


def _write_cfg(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def _manifest(out_dir):
    return json.loads((Path(out_dir) / "manifest.json").read_text())


@pytest.fixture(scope="module")
def sd_run(tmp_path_factory):
    """Full SD chain: gen-data -> train -> augment -> policy."""
    root = tmp_path_factory.mktemp("sd")
    cfg = _write_cfg(root, SD_CFG)
    data_dir, model_dir = root / "data", root / "model"
    aug_dir, pol_dir = root / "aug", root / "pol"
    main(["gen-data", "--config", str(cfg), "--seed", "0",
          "--out-dir", str(data_dir)])
    data = data_dir / "sd_n6.jsonl"
    main(["train", "--config", str(cfg), "--seed", "0",
          "--out-dir", str(model_dir), "--data", str(data)])
    main(["augment", "--config", str(cfg), "--seed", "0",
          "--out-dir", str(aug_dir), "--data", str(data),
          "--model", str(model_dir / "model.npz")])
    main(["policy", "--config", str(cfg), "--seed", "0",
          "--out-dir", str(pol_dir), "--data", str(aug_dir / "augmented.jsonl")])
    return root, cfg


class TestSdChain:
    def test_gen_data_outputs(self, sd_run):
        root, _ = sd_run
        data = root / "data" / "sd_n6.jsonl"
        assert data.exists()
        records = read_transitions(data)
        assert {tr.trial_id for tr in records} == set(range(6))
        man = _manifest(root / "data")
        assert man["command"] == "gen-data"
        assert str(data) in man["artifacts"]

    def test_train_outputs(self, sd_run):
        root, _ = sd_run
        assert (root / "model" / "model.npz").exists()
        report = json.loads((root / "model" / "train_report.json").read_text())
        assert report["steps_run"] == 80
        man = _manifest(root / "model")
        assert list(man["inputs"]) == [str(root / "data" / "sd_n6.jsonl")]

    def test_augment_line_count(self, sd_run):
        root, _ = sd_run
        observed = read_transitions(root / "data" / "sd_n6.jsonl")
        augmented = read_transitions(root / "aug" / "augmented.jsonl")
        assert len(augmented) == len(observed) * (1 + SD_CFG["k_cf"])
        tags = {tr.provenance for tr in augmented}
        assert tags == {"observed", "counterfactual"}

    def test_policy_metrics(self, sd_run):
        root, _ = sd_run
        with open(root / "pol" / "metrics.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == METRICS_HEADER
        assert len(rows) == 2
        method, benchmark, n_trial, seed, reward, mean_q = rows[1]
        assert method == "ctrl_g" and benchmark == "SD"
        assert int(n_trial) == 6  # distinct observed trials, not record count
        assert 0.0 <= float(reward) <= 20.0
        assert (root / "pol" / "policy.npz").exists()

    def test_policy_rerun_is_byte_identical(self, sd_run):
        root, cfg = sd_run
        again = root / "pol2"
        main(["policy", "--config", str(cfg), "--seed", "0",
              "--out-dir", str(again),
              "--data", str(root / "aug" / "augmented.jsonl")])
        a = (root / "pol" / "metrics.csv").read_bytes()
        b = (again / "metrics.csv").read_bytes()
        assert a == b
        pa = _manifest(root / "pol")["artifacts"]
        pb = _manifest(again)["artifacts"]
        assert pa[str(root / "pol" / "policy.npz")] == pb[str(again / "policy.npz")]

    def test_report_aggregates(self, sd_run):
        root, _ = sd_run
        rep_dir = root / "report"
        main(["report", str(root / "pol" / "manifest.json"),
              "--out-dir", str(rep_dir)])
        with open(rep_dir / "aggregate.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 1
        assert rows[0]["method"] == "ctrl_g"
        assert rows[0]["n_seeds"] == "1"


@pytest.fixture(scope="module")
def hd_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("hd")
    cfg = _write_cfg(root, HD_CFG)
    main(["gen-data", "--config", str(cfg), "--seed", "1",
          "--out-dir", str(root / "data")])
    main(["train", "--config", str(cfg), "--seed", "1",
          "--out-dir", str(root / "model"),
          "--data", str(root / "data" / "hd.jsonl")])
    main(["augment", "--config", str(cfg), "--seed", "1",
          "--out-dir", str(root / "aug"),
          "--data", str(root / "data" / "hd.jsonl"),
          "--model", str(root / "model" / "model.npz")])
    main(["policy", "--config", str(cfg), "--seed", "1",
          "--out-dir", str(root / "pol"),
          "--model", str(root / "model" / "model.npz"),
          "--augment-dir", str(root / "aug")])
    return root


class TestHdChain:
    def test_cluster_file(self, hd_run):
        cl = json.loads((hd_run / "aug" / "clusters.json").read_text())
        assert cl["k"] == 2
        assert len(cl["centroids"]) == 2

    def test_per_group_augmented_files(self, hd_run):
        files = sorted(p.name for p in (hd_run / "aug").glob("augmented_g*.jsonl"))
        assert files  # at least one group materialized
        cl = json.loads((hd_run / "aug" / "clusters.json").read_text())
        groups_used = set(cl["assignment"].values())
        assert files == sorted(f"augmented_g{g}.jsonl" for g in groups_used)

    def test_policy_outputs(self, hd_run):
        per_gravity = json.loads((hd_run / "pol" / "per_gravity.json").read_text())
        assert len(per_gravity) == 5
        with open(hd_run / "pol" / "metrics.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 1 and rows[0]["benchmark"] == "HD"
        assert (hd_run / "pol").glob("policy_g*.npz")


class TestErrorPaths:
    def test_gen_data_empty_config(self, tmp_path):
        cfg = tmp_path / "empty.json"
        cfg.write_text("{}")
        with pytest.raises(SystemExit, match="non-empty config"):
            main(["gen-data", "--config", str(cfg), "--out-dir", str(tmp_path)])

    def test_gen_data_wrong_benchmark(self, tmp_path):
        cfg = _write_cfg(tmp_path, {"benchmark": "finite-mdp"})
        with pytest.raises(SystemExit, match="SD and HD"):
            main(["gen-data", "--config", str(cfg), "--out-dir", str(tmp_path)])

    def test_train_raw_d3qn_is_an_error(self, tmp_path):
        cfg = _write_cfg(tmp_path, {**SD_CFG, "method": "raw_d3qn"})
        data = tmp_path / "x.jsonl"
        data.write_text("")
        with pytest.raises(SystemExit, match="no dynamics model"):
            main(["train", "--config", str(cfg), "--out-dir", str(tmp_path),
                  "--data", str(data)])

    def test_missing_dataset_names_path(self, tmp_path):
        cfg = _write_cfg(tmp_path, SD_CFG)
        with pytest.raises(SystemExit, match="missing dataset file"):
            main(["train", "--config", str(cfg), "--out-dir", str(tmp_path),
                  "--data", str(tmp_path / "nope.jsonl")])

    def test_corrupt_dataset(self, tmp_path):
        cfg = _write_cfg(tmp_path, SD_CFG)
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json}\n")
        with pytest.raises(SystemExit, match="corrupt dataset"):
            main(["train", "--config", str(cfg), "--out-dir", str(tmp_path),
                  "--data", str(bad)])

    def test_augment_needs_model(self, tmp_path, sd_run):
        root, _ = sd_run
        cfg = _write_cfg(tmp_path, SD_CFG)
        with pytest.raises(SystemExit, match="needs --model"):
            main(["augment", "--config", str(cfg), "--out-dir", str(tmp_path),
                  "--data", str(root / "data" / "sd_n6.jsonl")])

    def test_policy_needs_data(self, tmp_path):
        cfg = _write_cfg(tmp_path, SD_CFG)
        with pytest.raises(SystemExit, match="needs --data"):
            main(["policy", "--config", str(cfg), "--out-dir", str(tmp_path)])

    def test_wrong_model_kind_for_ctrl_g(self, tmp_path, sd_run):
        root, _ = sd_run
        from cfrl.numerics import save_container
        fake = tmp_path / "fake.npz"
        save_container(fake, kind="dueling_dqn", arch={}, params={}, extra={})
        cfg = _write_cfg(tmp_path, SD_CFG)
        with pytest.raises(SystemExit, match="not a dynamics or"):
            main(["augment", "--config", str(cfg), "--out-dir", str(tmp_path),
                  "--data", str(root / "data" / "sd_n6.jsonl"),
                  "--model", str(fake)])

    def test_report_without_metrics(self, tmp_path):
        man = tmp_path / "manifest.json"
        man.write_text(json.dumps({"metrics": []}))
        with pytest.raises(SystemExit, match="no metric files"):
            main(["report", str(man), "--out-dir", str(tmp_path)])


class TestPassthrough:
    def test_k_cf_zero_needs_no_model(self, tmp_path, sd_run):
        root, _ = sd_run
        cfg = _write_cfg(tmp_path, {**SD_CFG, "k_cf": 0})
        out = tmp_path / "aug0"
        main(["augment", "--config", str(cfg), "--out-dir", str(out),
              "--data", str(root / "data" / "sd_n6.jsonl")])
        observed = read_transitions(root / "data" / "sd_n6.jsonl")
        passthrough = read_transitions(out / "augmented.jsonl")
        assert len(passthrough) == len(observed)


class TestTheorem2Hook:
    def test_finite_mdp_policy_dispatch(self, tmp_path, monkeypatch):
        calls = {}

        def stub(seed=0):
            calls["seed"] = seed
            return {"n_mdps": 0, "sup_errors": [], "max_sup_error": 0.0,
                    "all_below_0.01": True}

        monkeypatch.setattr(cli, "run_theorem2_suite", stub)
        cfg = _write_cfg(tmp_path, {"benchmark": "finite-mdp",
                                    "method": "raw_d3qn"})
        main(["policy", "--config", str(cfg), "--seed", "5",
              "--out-dir", str(tmp_path / "out")])
        assert calls["seed"] == 5
        got = json.loads((tmp_path / "out" / "tabular_convergence.json").read_text())
        assert got["all_below_0.01"] is True

    def test_suite_smoke(self):
        out = run_theorem2_suite(seed=0, n_mdps=1, n_updates=40_000)
        assert len(out["sup_errors"]) == 1
        assert out["max_sup_error"] < 1.0  # structural smoke, not convergence


class TestConsoleEntry:
    def test_installed_script_help(self):
        proc = subprocess.run(["cfrl", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        for sub in ("gen-data", "train", "augment", "policy", "report"):
            assert sub in proc.stdout
