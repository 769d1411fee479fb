"""Experiment configuration: benchmark/method selection plus module knobs.

Configs load from YAML or JSON files of nested key-value overrides, e.g.

    benchmark: SD
    method: ctrl_g
    n_trials: 100
    seeds: [0, 1, 2]
    scm:
      steps: 3000
    d3qn:
      steps: 8000

Unknown keys are rejected so typos fail loudly. config_hash is a sha256
over the canonical JSON form and is what run manifests record.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .baselines import BaselineConfig
from .env import EnvConfig
from .policy import D3qnConfig
from .scm_train import ScmTrainConfig

BENCHMARKS = ("SD", "HD", "synthetic-scm", "finite-mdp")
METHODS = ("ctrl_g", "ctrl_p", "base_d", "base_s", "base_m", "raw_d3qn")


@dataclass
class ExperimentConfig:
    benchmark: str = "SD"
    method: str = "ctrl_g"
    n_trials: int = 100           # SD trials; HD uses trials_per_group
    trials_per_group: int = 50
    trials_per_subject: int = 1   # HD trials pooled under one subject id
    tau: int = 5                  # window length for the personalized variant
    k: int = 5                    # subject clusters
    k_cf: int = 10                # alternative actions per observed record
    lam: float = 1.0              # encoder-reconstruction regularizer weight
    seeds: tuple = (0,)
    eval_trials: int = 10
    env: EnvConfig = field(default_factory=EnvConfig)
    scm: ScmTrainConfig = field(default_factory=ScmTrainConfig)
    d3qn: D3qnConfig = field(default_factory=D3qnConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def __post_init__(self):
        if self.benchmark not in BENCHMARKS:
            raise ValueError(f"benchmark must be one of {BENCHMARKS}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if len(self.seeds) == 0:
            raise ValueError("seed list must be non-empty")
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.k_cf < 0:
            raise ValueError("k_cf must be >= 0")
        if self.trials_per_subject < 1:
            raise ValueError("trials_per_subject must be >= 1")
        if self.trials_per_group % self.trials_per_subject != 0:
            raise ValueError("trials_per_group must be a multiple of "
                             "trials_per_subject (balanced subjects)")
        # keep the shared knobs and the module configs in agreement
        self.scm.lambda_reg = float(self.lam)
        self.scm.tau = int(self.tau)


_SUB_CONFIGS = {"env": EnvConfig, "scm": ScmTrainConfig,
                "d3qn": D3qnConfig, "baseline": BaselineConfig}
_TUPLE_FIELDS = ("seeds", "hidden", "widths", "gen_widths", "enc_widths",
                 "disc_widths", "adam_betas", "gravities")


def _build(cls, overrides: dict):
    valid = {f.name for f in fields(cls)}
    unknown = set(overrides) - valid
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
          for k, v in overrides.items()}
    return cls(**kw)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    kw = {}
    for name, cls in _SUB_CONFIGS.items():
        if name in data:
            kw[name] = _build(cls, data.pop(name))
    return _build(ExperimentConfig, {**data, **kw})


def load_config(path) -> ExperimentConfig:
    """Read a YAML or JSON config file into an ExperimentConfig."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError("config file must hold a mapping")
    return config_from_dict(data)


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _jsonable(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
