"""Benchmark pipelines shared by the CLI and the end-to-end tests.

Each pipeline is dataset -> (optional dynamics model) -> (optional
augmentation) -> offline policy learning -> greedy evaluation in the
simulator, and returns plain dicts ready for the metrics CSV.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from . import env as env_mod
from .augment import (augment_counterfactual, augment_groups,
                      augment_with_sampler, cartpole_reward_fn)
from .baselines import BaselineConfig, train_baseline
from .cluster import fit_kmeans
from .config import ExperimentConfig
from .policy import D3qnConfig, evaluate_policy, train_d3qn
from .scm import ActionSupport
from .scm_train import subject_thetas, train_ctrl_g, train_ctrl_p

# deterministic, non-overlapping child seeds per pipeline role
_SEED_STRIDE = 1_000_003


def _child_seed(seed: int, role: int) -> int:
    return _SEED_STRIDE * int(seed) + role


def _with_seed(cfg, seed: int):
    return dataclasses.replace(cfg, seed=int(seed))


def sd_records(cfg: ExperimentConfig, n_trials: int, seed: int):
    return env_mod.generate_trials(cfg.env, n_trials, seed=_child_seed(seed, 1))


def augmented_sd_dataset(cfg: ExperimentConfig, records, seed: int):
    """Observed records plus method-specific generated records, and the model."""
    method = cfg.method
    support = ActionSupport.discrete(cfg.env.action_grid())
    reward_fn = cartpole_reward_fn(cfg.env)
    rng = np.random.default_rng(_child_seed(seed, 2))
    if method == "raw_d3qn":
        return list(records), None, None
    if method == "ctrl_g":
        model, report = train_ctrl_g(records, _with_seed(cfg.scm, _child_seed(seed, 3)))
        aug = augment_counterfactual(records, model, cfg.k_cf, rng, reward_fn, support)
        return aug.records, model, report
    if method in ("base_d", "base_s", "base_m"):
        variant = method[-1].upper()
        bcfg = dataclasses.replace(cfg.baseline, variant=variant,
                                   seed=_child_seed(seed, 3))
        model, report = train_baseline(records, bcfg)
        aug = augment_with_sampler(records, model.sample, cfg.k_cf, rng,
                                   reward_fn, support, source_tag=method)
        return aug.records, model, report
    raise ValueError(f"method {method} is not an SD pipeline method")


def run_sd(cfg: ExperimentConfig, n_trials: int, seed: int) -> dict:
    """One (method, n_trial, seed) cell of the fixed-gravity comparison."""
    records = sd_records(cfg, n_trials, seed)
    data, _, _ = augmented_sd_dataset(cfg, records, seed)
    policy, hist = train_d3qn(data, cfg.env, _with_seed(cfg.d3qn, _child_seed(seed, 4)))
    res = evaluate_policy(policy, cfg.env, n_trials=cfg.eval_trials,
                          seed=_child_seed(seed, 5))
    return {
        "method": cfg.method,
        "benchmark": "SD",
        "n_trial": int(n_trials),
        "seed": int(seed),
        "cumulative_reward": res["cumulative_reward"],
        "mean_q": res["mean_q"],
        "n_records": len(data),
        "policy_diverged": hist.diverged,
    }


# ---------------------------------------------------------------------------
# heterogeneous benchmark


def hd_env(cfg: ExperimentConfig, gravity: float) -> env_mod.EnvConfig:
    return dataclasses.replace(cfg.env, gravity=float(gravity))


def hd_records(cfg: ExperimentConfig, seed: int):
    return env_mod.generate_hd_dataset(cfg.trials_per_group,
                                       seed=_child_seed(seed, 1),
                                       base_cfg=cfg.env,
                                       trials_per_subject=cfg.trials_per_subject)


def _probe_trial(env_cfg: env_mod.EnvConfig, tau: int, rng: np.random.Generator):
    """One random-action trial, retried until it survives tau steps."""
    levels = env_cfg.action_grid()
    for _ in range(200):
        state = env_mod.initial_state(rng)
        traj = []
        for t in range(env_cfg.max_steps):
            a = float(levels[rng.integers(len(levels))])
            nxt, r, done, noise = env_mod.step(state, a, env_cfg, rng)
            traj.append(env_mod.Transition(
                subject_id=-1, trial_id=-1, t=t, state=state, action=a,
                next_state=nxt, reward=r, done=done, noise=noise))
            state = nxt
            if done:
                break
        if len(traj) >= tau:
            return traj
    raise RuntimeError("no probe trial survived tau steps")


def assign_group(model, clusters, env_cfg: env_mod.EnvConfig, tau: int,
                 rng: np.random.Generator, n_trials: int = 1) -> int:
    """Estimate a fresh subject's group from probe trials.

    The subject-level context is the mean over all sliding windows of
    n_trials probe trajectories, matching how training subjects are embedded.
    """
    wins = []
    for _ in range(n_trials):
        traj = _probe_trial(env_cfg, tau, rng)
        wins.extend(traj[i:i + tau] for i in range(len(traj) - tau + 1))
    theta = model.estimate_theta_batch(wins).mean(axis=0)
    d = np.linalg.norm(clusters.centroids - theta[None, :], axis=1)
    return int(d.argmin())


def fit_hd_personalized(cfg: ExperimentConfig, seed: int, records) -> dict:
    """Windowed-context model, subject clusters, and per-group policies."""
    support = ActionSupport.discrete(cfg.env.action_grid())
    reward_fn = cartpole_reward_fn(cfg.env)
    rng = np.random.default_rng(_child_seed(seed, 2))
    windows = env_mod.window(records, cfg.tau)
    model, report = train_ctrl_p(windows, _with_seed(cfg.scm, _child_seed(seed, 3)))
    thetas = subject_thetas(model, windows)
    clusters = fit_kmeans(thetas, cfg.k, seed=_child_seed(seed, 6))
    groups = augment_groups(records, model, clusters, cfg.k_cf, rng,
                            reward_fn, support)
    policies = {}
    for g, aug in groups.items():
        pol, _ = train_d3qn(aug.records, cfg.env,
                            _with_seed(cfg.d3qn, _child_seed(seed, 7 + g)))
        policies[g] = pol
    return {"model": model, "report": report, "windows": windows,
            "thetas": thetas, "clusters": clusters, "policies": policies}


def run_hd(cfg: ExperimentConfig, seed: int, personalized: dict | None = None) -> dict:
    """One seed of the five-gravity comparison; returns per-gravity rewards.

    ctrl_p learns per-group models and assigns fresh subjects to groups via a
    probe trial; every other method learns one pooled policy. personalized
    optionally reuses a precomputed fit_hd_personalized result instead of
    retraining.
    """
    records, gravity_map = hd_records(cfg, seed)
    method = cfg.method

    if method == "ctrl_p":
        art = personalized or fit_hd_personalized(cfg, seed, records)
        model, thetas = art["model"], art["thetas"]
        clusters, policies = art["clusters"], art["policies"]
    else:
        data, _, _ = augmented_sd_dataset(cfg, records, seed)
        policy, _ = train_d3qn(data, cfg.env,
                               _with_seed(cfg.d3qn, _child_seed(seed, 4)))

    per_gravity = {}
    q_all = []
    for gi, gravity in enumerate(env_mod.HD_GRAVITIES):
        g_env = hd_env(cfg, gravity)
        if method == "ctrl_p":
            probe_rng = np.random.default_rng(_child_seed(seed, 20 + gi))
            group = assign_group(model, clusters, g_env, cfg.tau, probe_rng,
                                 n_trials=cfg.trials_per_subject)
            pol = policies[group]
        else:
            pol = policy
        res = evaluate_policy(pol, g_env, n_trials=cfg.eval_trials,
                              seed=_child_seed(seed, 30 + gi))
        per_gravity[gravity] = res["cumulative_reward"]
        q_all.append(res["mean_q"])

    out = {
        "method": method,
        "benchmark": "HD",
        "n_trial": int(cfg.trials_per_group),
        "seed": int(seed),
        "cumulative_reward": float(np.mean(list(per_gravity.values()))),
        "mean_q": float(np.mean(q_all)),
        "per_gravity": per_gravity,
    }
    if method == "ctrl_p":
        # grouping artifacts, for inspecting how well the learned context
        # separates the gravity populations
        out["subject_theta"] = {int(s): [float(v) for v in th]
                                for s, th in thetas.items()}
        out["group_assignment"] = {int(s): int(g)
                                   for s, g in clusters.assignment.items()}
    return out
