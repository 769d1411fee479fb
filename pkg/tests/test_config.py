"""Config loading, validation, and hashing."""
import json

import pytest

from cfrl.config import (ExperimentConfig, config_from_dict, config_hash,
                         config_to_dict, load_config)


class TestLoadConfig:
    def test_yaml_round_trip(self, tmp_path):
        p = tmp_path / "cfg.yaml"
        p.write_text("benchmark: HD\nmethod: ctrl_p\ntau: 3\nscm:\n  steps: 7\n")
        cfg = load_config(p)
        assert cfg.benchmark == "HD"
        assert cfg.method == "ctrl_p"
        assert cfg.scm.steps == 7
        assert cfg.scm.tau == 3  # shared knob propagates into the module config

    def test_json_accepted(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"method": "raw_d3qn", "seeds": [4, 5]}))
        cfg = load_config(p)
        assert cfg.method == "raw_d3qn"
        assert cfg.seeds == (4, 5)

    def test_empty_file_gives_defaults(self, tmp_path):
        p = tmp_path / "cfg.yaml"
        p.write_text("")
        cfg = load_config(p)
        assert cfg == ExperimentConfig()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "nope.yaml")

    def test_non_mapping_rejected(self, tmp_path):
        p = tmp_path / "cfg.yaml"
        p.write_text("- just\n- a list\n")
        with pytest.raises(ValueError, match="mapping"):
            load_config(p)


class TestValidation:
    def test_unknown_top_level_key(self):
        with pytest.raises(ValueError, match="unknown .* keys.*n_trails"):
            config_from_dict({"n_trails": 10})

    def test_unknown_nested_key(self):
        with pytest.raises(ValueError, match="ScmTrainConfig"):
            config_from_dict({"scm": {"stepz": 10}})

    def test_bad_benchmark(self):
        with pytest.raises(ValueError, match="benchmark"):
            ExperimentConfig(benchmark="XD")

    def test_bad_method(self):
        with pytest.raises(ValueError, match="method"):
            ExperimentConfig(method="ctrl_x")

    def test_empty_seeds(self):
        with pytest.raises(ValueError, match="seed"):
            ExperimentConfig(seeds=())

    def test_negative_k_cf(self):
        with pytest.raises(ValueError, match="k_cf"):
            ExperimentConfig(k_cf=-1)

    def test_lists_coerced_to_tuples(self):
        cfg = config_from_dict({"seeds": [1, 2], "d3qn": {"hidden": [32, 32]},
                                "scm": {"gen_widths": [8, 8]}})
        assert cfg.seeds == (1, 2)
        assert cfg.d3qn.hidden == (32, 32)
        assert cfg.scm.gen_widths == (8, 8)

    def test_lam_syncs_scm_weight(self):
        cfg = config_from_dict({"lam": 2.5})
        assert cfg.scm.lambda_reg == 2.5


class TestHash:
    def test_stable_across_equal_configs(self):
        a = config_from_dict({"n_trials": 60, "scm": {"steps": 5}})
        b = config_from_dict({"scm": {"steps": 5}, "n_trials": 60})
        assert config_hash(a) == config_hash(b)

    def test_sensitive_to_nested_change(self):
        a = config_from_dict({})
        b = config_from_dict({"scm": {"steps": 5}})
        assert config_hash(a) != config_hash(b)

    def test_dict_form_is_json_serializable(self):
        d = config_to_dict(ExperimentConfig())
        json.dumps(d)
        assert d["env"]["gravity"] == pytest.approx(9.8)
