"""Pipeline driver: dataset generation, training, augmentation, policy, report.

Every command reads an ExperimentConfig (--config YAML/JSON), takes --seed
and --out-dir, and writes a run manifest listing the sha256 of every file it
produced. Stage ordering is enforced through the filesystem: augmentation
demands a trained model checkpoint, policy learning demands a dataset, and a
missing input fails with the offending path in the message.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import env as env_mod
from .augment import (augment_counterfactual, augment_groups,
                      augment_with_sampler, cartpole_reward_fn)
from .baselines import DynamicsModel, train_baseline
from .cluster import ClusterModel, fit_kmeans
from .config import (ExperimentConfig, config_from_dict, config_hash,
                     load_config)
from .experiments import _child_seed, _with_seed, assign_group, run_hd, run_sd
from .policy import (DuelingNet, PowerSchedule, counterfactual_mdp_stream,
                     random_mdp, tabular_q_learning, train_d3qn,
                     value_iteration, evaluate_policy)
from .scm import ActionSupport
from .scm_train import LearnedScm, subject_thetas, train_ctrl_g, train_ctrl_p

METRICS_HEADER = ["method", "benchmark", "n_trial", "seed",
                  "cumulative_reward", "mean_q"]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclasses.dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    elapsed_s: float
    artifacts: dict          # produced file -> sha256
    inputs: dict             # consumed file -> sha256
    metrics: list            # metric CSV paths among the artifacts

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2,
                                   sort_keys=True) + "\n")
        return path


class _ManifestBuilder:
    def __init__(self, command: str, cfg: ExperimentConfig, seed: int):
        self.command = command
        self.cfg_hash = config_hash(cfg)
        self.seed = seed
        self.t0 = time.time()
        self.artifacts: dict[str, str] = {}
        self.inputs: dict[str, str] = {}
        self.metrics: list[str] = []

    def add(self, path: Path, metric: bool = False):
        self.artifacts[str(path)] = _sha256(path)
        if metric:
            self.metrics.append(str(path))

    def add_input(self, path: Path):
        self.inputs[str(path)] = _sha256(path)

    def write(self, out_dir: Path) -> Path:
        man = RunManifest(self.command, self.cfg_hash, self.seed,
                          round(time.time() - self.t0, 3),
                          self.artifacts, self.inputs, self.metrics)
        return man.write(out_dir)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise SystemExit(f"error: missing {what}: {path}")
    return path


def _load_dataset(path: Path) -> list[env_mod.Transition]:
    _require(path, "dataset file")
    try:
        return env_mod.read_transitions(path)
    except (ValueError, KeyError, json.JSONDecodeError) as err:
        raise SystemExit(f"error: corrupt dataset {path}: {err}")


def _write_metrics(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        for r in rows:
            writer.writerow([r[k] for k in METRICS_HEADER])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: ExperimentConfig, seed: int, out_dir: Path,
                 raw_config: dict) -> Path:
    if not raw_config:
        raise SystemExit("error: gen-data needs a non-empty config "
                         "(at least a benchmark)")
    man = _ManifestBuilder("gen-data", cfg, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.benchmark == "SD":
        full = env_mod.generate_trials(cfg.env, cfg.n_trials,
                                       seed=_child_seed(seed, 1))
        sizes = list(range(50, cfg.n_trials + 1, 50)) or [cfg.n_trials]
        for n in sizes:
            subset = [tr for tr in full if tr.trial_id < n]
            path = out_dir / f"sd_n{n}.jsonl"
            env_mod.write_transitions(path, subset, cfg.env,
                                      seed=_child_seed(seed, 1))
            man.add(path)
            man.add(env_mod.meta_path(path))
    elif cfg.benchmark == "HD":
        records, gravity_map = env_mod.generate_hd_dataset(
            cfg.trials_per_group, seed=_child_seed(seed, 1), base_cfg=cfg.env)
        path = out_dir / "hd.jsonl"
        env_mod.write_transitions(path, records, cfg.env,
                                  seed=_child_seed(seed, 1),
                                  gravity_map=gravity_map)
        man.add(path)
        man.add(env_mod.meta_path(path))
    else:
        raise SystemExit(f"error: gen-data supports SD and HD, "
                         f"not {cfg.benchmark}")
    return man.write(out_dir)


def cmd_train(cfg: ExperimentConfig, seed: int, out_dir: Path,
              data: Path) -> Path:
    man = _ManifestBuilder("train", cfg, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = _load_dataset(data)
    man.add_input(data)
    scm_cfg = _with_seed(cfg.scm, _child_seed(seed, 3))
    if cfg.method == "ctrl_g":
        model, report = train_ctrl_g(records, scm_cfg)
    elif cfg.method == "ctrl_p":
        windows = env_mod.window(records, cfg.tau)
        model, report = train_ctrl_p(windows, scm_cfg)
    elif cfg.method in ("base_d", "base_s", "base_m"):
        bcfg = dataclasses.replace(cfg.baseline, variant=cfg.method[-1].upper(),
                                   seed=_child_seed(seed, 3))
        model, report = train_baseline(records, bcfg)
    elif cfg.method == "raw_d3qn":
        raise SystemExit("error: raw_d3qn has no dynamics model to train; "
                         "run the policy command directly on the dataset")
    else:
        raise SystemExit(f"error: unknown method {cfg.method}")
    model_path = out_dir / "model.npz"
    model.save(model_path)
    man.add(model_path)
    report_path = out_dir / "train_report.json"
    report_path.write_text(json.dumps(_report_jsonable(report), indent=2,
                                      sort_keys=True) + "\n")
    man.add(report_path)
    return man.write(out_dir)


def _report_jsonable(report) -> dict:
    out = {}
    for k, v in dataclasses.asdict(report).items():
        if isinstance(v, float) and not np.isfinite(v):
            v = None
        out[k] = v
    return out


def _load_model(path: Path):
    _require(path, "model checkpoint")
    from .numerics import load_container
    kind = load_container(path).kind
    if kind == "learned_scm":
        return LearnedScm.load(path)
    if kind == "dynamics_baseline":
        return DynamicsModel.load(path)
    raise SystemExit(f"error: {path} holds a '{kind}', not a dynamics or "
                     "structural model")


def cmd_augment(cfg: ExperimentConfig, seed: int, out_dir: Path,
                data: Path, model_path: Path | None) -> Path:
    man = _ManifestBuilder("augment", cfg, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = _load_dataset(data)
    man.add_input(data)
    rng = np.random.default_rng(_child_seed(seed, 2))
    support = ActionSupport.discrete(cfg.env.action_grid())
    reward_fn = cartpole_reward_fn(cfg.env)

    if cfg.k_cf == 0:
        # passthrough: the "augmented" set is the observed set
        path = out_dir / "augmented.jsonl"
        env_mod.write_transitions(path, records, cfg.env, seed=seed)
        man.add(path)
        man.add(env_mod.meta_path(path))
        return man.write(out_dir)

    if model_path is None:
        raise SystemExit("error: augment with k_cf > 0 needs --model")
    model = _load_model(model_path)
    man.add_input(model_path)

    if cfg.method == "ctrl_p":
        if not isinstance(model, LearnedScm) or not model.heterogeneous:
            raise SystemExit("error: ctrl_p augmentation needs a "
                             "context-conditioned structural model")
        windows = env_mod.window(records, cfg.tau)
        thetas = subject_thetas(model, windows)
        clusters = fit_kmeans(thetas, cfg.k, seed=_child_seed(seed, 6))
        cl_path = out_dir / "clusters.json"
        cl_path.write_text(json.dumps({
            "k": cfg.k,
            "centroids": clusters.centroids.tolist(),
            "assignment": {str(k): int(v) for k, v in clusters.assignment.items()},
        }, indent=2, sort_keys=True) + "\n")
        man.add(cl_path)
        groups = augment_groups(records, model, clusters, cfg.k_cf, rng,
                                reward_fn, support)
        for g, aug in sorted(groups.items()):
            path = out_dir / f"augmented_g{g}.jsonl"
            env_mod.write_transitions(path, aug.records, cfg.env, seed=seed)
            man.add(path)
            man.add(env_mod.meta_path(path))
    elif cfg.method == "ctrl_g":
        if not isinstance(model, LearnedScm):
            raise SystemExit("error: ctrl_g augmentation needs a structural "
                             "model checkpoint")
        aug = augment_counterfactual(records, model, cfg.k_cf, rng,
                                     reward_fn, support)
        path = out_dir / "augmented.jsonl"
        env_mod.write_transitions(path, aug.records, cfg.env, seed=seed)
        man.add(path)
        man.add(env_mod.meta_path(path))
    elif cfg.method in ("base_d", "base_s", "base_m"):
        if not isinstance(model, DynamicsModel):
            raise SystemExit("error: baseline augmentation needs a dynamics "
                             "model checkpoint")
        aug = augment_with_sampler(records, model.sample, cfg.k_cf, rng,
                                   reward_fn, support, source_tag=cfg.method)
        path = out_dir / "augmented.jsonl"
        env_mod.write_transitions(path, aug.records, cfg.env, seed=seed)
        man.add(path)
        man.add(env_mod.meta_path(path))
    else:
        raise SystemExit(f"error: method {cfg.method} does not augment data")
    return man.write(out_dir)


def cmd_policy(cfg: ExperimentConfig, seed: int, out_dir: Path,
               data: Path | None, model_path: Path | None,
               augment_dir: Path | None) -> Path:
    man = _ManifestBuilder("policy", cfg, seed)
    out_dir.mkdir(parents=True, exist_ok=True)

    if cfg.benchmark == "finite-mdp":
        results = run_theorem2_suite(seed=seed)
        path = out_dir / "tabular_convergence.json"
        path.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
        man.add(path)
        return man.write(out_dir)

    rows: list[dict] = []
    if cfg.benchmark == "HD" and cfg.method == "ctrl_p":
        if augment_dir is None or model_path is None:
            raise SystemExit("error: HD ctrl_p policy needs --augment-dir "
                             "(per-group files + clusters.json) and --model")
        model = _load_model(model_path)
        man.add_input(model_path)
        cl_path = _require(augment_dir / "clusters.json", "cluster file")
        man.add_input(cl_path)
        cl = json.loads(cl_path.read_text())
        centroids = np.array(cl["centroids"])
        assignment = {int(k): int(v) for k, v in cl["assignment"].items()}
        clusters = ClusterModel(k=cl["k"], centroids=centroids,
                                assignment=assignment, inertia=float("nan"))
        policies = {}
        for g in range(cl["k"]):
            gpath = augment_dir / f"augmented_g{g}.jsonl"
            if not gpath.exists():
                continue
            grecords = _load_dataset(gpath)
            man.add_input(gpath)
            pol, _ = train_d3qn(grecords, cfg.env,
                                _with_seed(cfg.d3qn, _child_seed(seed, 7 + g)))
            ppath = out_dir / f"policy_g{g}.npz"
            pol.save(ppath)
            man.add(ppath)
            policies[g] = pol
        if not policies:
            raise SystemExit(f"error: no augmented_g*.jsonl files in {augment_dir}")
        per_gravity = {}
        q_all = []
        for gi, gravity in enumerate(env_mod.HD_GRAVITIES):
            g_env = dataclasses.replace(cfg.env, gravity=float(gravity))
            probe_rng = np.random.default_rng(_child_seed(seed, 20 + gi))
            group = assign_group(model, clusters, g_env, cfg.tau, probe_rng,
                                 n_trials=cfg.trials_per_subject)
            if group not in policies:
                group = sorted(policies)[0]
            res = evaluate_policy(policies[group], g_env,
                                  n_trials=cfg.eval_trials,
                                  seed=_child_seed(seed, 30 + gi))
            per_gravity[str(gravity)] = res["cumulative_reward"]
            q_all.append(res["mean_q"])
        rows.append({"method": cfg.method, "benchmark": "HD",
                     "n_trial": cfg.trials_per_group, "seed": seed,
                     "cumulative_reward": float(np.mean(list(per_gravity.values()))),
                     "mean_q": float(np.mean(q_all))})
        detail = out_dir / "per_gravity.json"
        detail.write_text(json.dumps(per_gravity, indent=2, sort_keys=True) + "\n")
        man.add(detail)
    else:
        if data is None:
            raise SystemExit("error: policy needs --data (a transition file)")
        records = _load_dataset(data)
        man.add_input(data)
        pol, _ = train_d3qn(records, cfg.env,
                            _with_seed(cfg.d3qn, _child_seed(seed, 4)))
        ppath = out_dir / "policy.npz"
        pol.save(ppath)
        man.add(ppath)
        if cfg.benchmark == "HD":
            per_gravity = {}
            q_all = []
            for gi, gravity in enumerate(env_mod.HD_GRAVITIES):
                g_env = dataclasses.replace(cfg.env, gravity=float(gravity))
                res = evaluate_policy(pol, g_env, n_trials=cfg.eval_trials,
                                      seed=_child_seed(seed, 30 + gi))
                per_gravity[str(gravity)] = res["cumulative_reward"]
                q_all.append(res["mean_q"])
            rows.append({"method": cfg.method, "benchmark": "HD",
                         "n_trial": cfg.trials_per_group, "seed": seed,
                         "cumulative_reward": float(np.mean(list(per_gravity.values()))),
                         "mean_q": float(np.mean(q_all))})
            detail = out_dir / "per_gravity.json"
            detail.write_text(json.dumps(per_gravity, indent=2, sort_keys=True) + "\n")
            man.add(detail)
        else:
            res = evaluate_policy(pol, cfg.env, n_trials=cfg.eval_trials,
                                  seed=_child_seed(seed, 5))
            n_trial = len({tr.trial_id for tr in records
                           if tr.provenance == "observed"})
            rows.append({"method": cfg.method, "benchmark": cfg.benchmark,
                         "n_trial": n_trial, "seed": seed,
                         "cumulative_reward": res["cumulative_reward"],
                         "mean_q": res["mean_q"]})

    metrics_path = out_dir / "metrics.csv"
    _write_metrics(metrics_path, rows)
    man.add(metrics_path, metric=True)
    return man.write(out_dir)


def run_theorem2_suite(seed: int = 0, n_mdps: int = 20,
                       n_updates: int = 16_000_000) -> dict:
    """Tabular convergence sweep over random MDPs; sup error per instance."""
    errors = []
    for i in range(n_mdps):
        rng = np.random.default_rng(seed + i)
        S = int(rng.integers(3, 11))
        A = int(rng.integers(2, 5))
        mdp = random_mdp(S, A, rng, gamma=0.9)
        q_star = value_iteration(mdp)
        stream = counterfactual_mdp_stream(mdp, np.random.default_rng(seed + i + 100),
                                           n_walkers=64)
        qt = tabular_q_learning(stream, S, A,
                                PowerSchedule(c=1.0, p=0.7, chunk=2),
                                mdp.gamma, n_updates)
        errors.append(float(np.abs(qt.values - q_star).max()))
    return {"n_mdps": n_mdps, "sup_errors": errors,
            "max_sup_error": max(errors), "all_below_0.01": max(errors) < 0.01}


def cmd_report(manifest_paths: list[Path], out_dir: Path) -> Path:
    rows = []
    for mp in manifest_paths:
        _require(mp, "run manifest")
        man = json.loads(mp.read_text())
        for metric_file in man.get("metrics", []):
            path = Path(metric_file)
            _require(path, "metric file listed in manifest")
            with open(path, newline="") as f:
                for row in csv.DictReader(f):
                    rows.append(row)
    if not rows:
        raise SystemExit("error: manifests list no metric files")
    out_dir.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["benchmark"], int(r["n_trial"])), []).append(r)
    agg_path = out_dir / "aggregate.csv"
    with open(agg_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "benchmark", "n_trial", "n_seeds",
                         "cumulative_reward_mean", "cumulative_reward_std",
                         "mean_q_mean", "mean_q_std"])
        for key in sorted(groups):
            rs = groups[key]
            rew = np.array([float(r["cumulative_reward"]) for r in rs])
            q = np.array([float(r["mean_q"]) for r in rs])
            writer.writerow([key[0], key[1], key[2], len(rs),
                             f"{rew.mean():.6g}", f"{rew.std():.6g}",
                             f"{q.mean():.6g}", f"{q.std():.6g}"])
    return agg_path


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfrl",
                                     description="counterfactual data "
                                     "augmentation pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="YAML or JSON experiment config")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", required=True)

    p = sub.add_parser("gen-data", help="generate benchmark datasets")
    common(p)

    p = sub.add_parser("train", help="train a dynamics/structural model")
    common(p)
    p.add_argument("--data", required=True, help="transition JSONL file")

    p = sub.add_parser("augment", help="counterfactual or sampled augmentation")
    common(p)
    p.add_argument("--data", required=True, help="transition JSONL file")
    p.add_argument("--model", help="model checkpoint (.npz)")

    p = sub.add_parser("policy", help="offline policy learning + evaluation")
    common(p)
    p.add_argument("--data", help="transition JSONL file")
    p.add_argument("--model", help="structural model for group assignment")
    p.add_argument("--augment-dir", help="augment output dir (HD ctrl_p)")

    p = sub.add_parser("report", help="aggregate metrics across manifests")
    p.add_argument("manifests", nargs="+", help="run manifest JSON files")
    p.add_argument("--out-dir", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out_dir)
    if args.command == "report":
        path = cmd_report([Path(m) for m in args.manifests], out_dir)
        print(path)
        return 0

    cfg_path = Path(args.config)
    cfg = load_config(cfg_path)
    raw = _raw_config(cfg_path)
    if args.command == "gen-data":
        path = cmd_gen_data(cfg, args.seed, out_dir, raw)
    elif args.command == "train":
        path = cmd_train(cfg, args.seed, out_dir, Path(args.data))
    elif args.command == "augment":
        path = cmd_augment(cfg, args.seed, out_dir, Path(args.data),
                           Path(args.model) if args.model else None)
    elif args.command == "policy":
        path = cmd_policy(cfg, args.seed, out_dir,
                          Path(args.data) if args.data else None,
                          Path(args.model) if args.model else None,
                          Path(args.augment_dir) if args.augment_dir else None)
    else:  # pragma: no cover - argparse enforces the choices
        raise SystemExit(f"unknown command {args.command}")
    print(path)
    return 0


def _raw_config(path: Path) -> dict:
    import yaml
    text = path.read_text()
    data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    return data or {}


if __name__ == "__main__":
    sys.exit(main())
