"""Counterfactual data augmentation.

For every observed transition the noise that explains it is abducted once;
each of k_cf alternative actions is then pushed through the structural model
with that same noise, and the task reward function is re-applied to the
generated next state. Counterfactual records carry provenance and a reference
to their observed parent. Augmentation is one-step only: counterfactual next
states are never chained into further rollouts.

Heterogeneous models are applied per group: every subject's records are
augmented under the group's centroid context vector, yielding one augmented
dataset per group.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import env as env_mod
from .cluster import ClusterModel
from .scm import ActionSupport, SupportError, StructuralModel, sample_alternative_actions

PREDICT_CHUNK = 8192


@dataclass
class AugmentedDataset:
    records: list[env_mod.Transition]
    k_cf: int
    source_model_hash: str
    n_skipped: int = 0
    group: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def observed(self) -> list[env_mod.Transition]:
        return [tr for tr in self.records if tr.provenance == "observed"]

    @property
    def counterfactual(self) -> list[env_mod.Transition]:
        return [tr for tr in self.records if tr.provenance == "counterfactual"]


def cartpole_reward_fn(cfg: env_mod.EnvConfig):
    """Task reward for generated next states: +1 while the pole stays up."""
    def fn(state, action, next_state):
        return env_mod.reward_done(next_state, cfg)
    return fn


def _abduct_with_skips(model: StructuralModel, states, actions, next_states,
                       theta, records) -> tuple[np.ndarray, np.ndarray]:
    """Batch abduction; on failure falls back per record, skipping bad ones."""
    try:
        u = model.abduct(states, actions, next_states, theta=theta)
        return u, np.ones(len(states), dtype=bool)
    except SupportError:
        pass
    keep = np.ones(len(states), dtype=bool)
    rows = []
    for i in range(len(states)):
        th = None if theta is None else theta[i:i + 1]
        try:
            rows.append(model.abduct(states[i:i + 1], actions[i:i + 1],
                                     next_states[i:i + 1], theta=th)[0])
        except SupportError:
            keep[i] = False
    u = np.array(rows) if rows else np.zeros((0, model.d_noise))
    return u, keep


def _predict_chunked(model: StructuralModel, states, actions, noise, theta=None):
    outs = []
    for lo in range(0, len(states), PREDICT_CHUNK):
        hi = lo + PREDICT_CHUNK
        th = None if theta is None else theta[lo:hi]
        outs.append(model.predict(states[lo:hi], actions[lo:hi], noise[lo:hi], theta=th))
    return np.concatenate(outs, axis=0) if outs else np.zeros_like(states)


def augment_counterfactual(transitions: list[env_mod.Transition],
                           model: StructuralModel, k_cf: int,
                           rng: np.random.Generator,
                           reward_fn,
                           support: ActionSupport,
                           theta: np.ndarray | None = None,
                           prefer_recorded_noise: bool = True,
                           group: int | None = None) -> AugmentedDataset:
    """One-step counterfactual augmentation of a transition dataset.

    theta, when given, is one context row per transition. When a record
    carries its realized noise and the model's noise dimension matches,
    abduction is skipped in favor of the recorded vector (exact replay).
    """
    if k_cf < 1:
        raise ValueError("k_cf must be >= 1")
    if not transitions:
        raise ValueError("empty dataset")
    states = np.array([tr.state for tr in transitions])
    actions = np.array([tr.action for tr in transitions])
    next_states = np.array([tr.next_state for tr in transitions])

    recorded = None
    if prefer_recorded_noise:
        if all(tr.noise is not None and len(tr.noise) == model.d_noise
               for tr in transitions):
            recorded = np.array([tr.noise for tr in transitions])

    if recorded is not None:
        u, keep = recorded, np.ones(len(transitions), dtype=bool)
    else:
        u, keep = _abduct_with_skips(model, states, actions, next_states,
                                     theta, transitions)

    kept = [tr for tr, k in zip(transitions, keep) if k]
    states_k = states[keep]
    theta_k = None if theta is None else np.asarray(theta)[keep]

    # alternative actions per record
    alts = np.array([
        sample_alternative_actions(tr.action, support, k_cf, rng) for tr in kept
    ])  # (M, k_cf)

    M = len(kept)
    rep_states = np.repeat(states_k, k_cf, axis=0)
    rep_u = np.repeat(u, k_cf, axis=0)
    rep_theta = None if theta_k is None else np.repeat(theta_k, k_cf, axis=0)
    flat_actions = alts.reshape(-1)
    cf_next = _predict_chunked(model, rep_states, flat_actions, rep_u, rep_theta)

    model_hash = model.model_hash() if hasattr(model, "model_hash") else type(model).__name__
    records: list[env_mod.Transition] = []
    pos = 0
    for i, tr in enumerate(kept):
        records.append(tr)
        for j in range(k_cf):
            nxt = cf_next[pos]
            a_cf = float(flat_actions[pos])
            reward, done = reward_fn(tr.state, a_cf, nxt)
            records.append(env_mod.Transition(
                subject_id=tr.subject_id, trial_id=tr.trial_id, t=tr.t,
                state=tr.state.copy(), action=a_cf, next_state=nxt.copy(),
                reward=float(reward), done=bool(done),
                provenance="counterfactual", parent=tr.key()))
            pos += 1
    return AugmentedDataset(records=records, k_cf=k_cf,
                            source_model_hash=model_hash,
                            n_skipped=int((~keep).sum()), group=group)


def augment_groups(transitions: list[env_mod.Transition],
                   model: StructuralModel, clusters: ClusterModel, k_cf: int,
                   rng: np.random.Generator, reward_fn,
                   support: ActionSupport) -> dict[int, AugmentedDataset]:
    """Per-group augmentation under each group's centroid context."""
    by_group: dict[int, list[env_mod.Transition]] = {}
    for tr in transitions:
        if tr.subject_id not in clusters.assignment:
            raise KeyError(f"subject {tr.subject_id} has no cluster assignment")
        by_group.setdefault(clusters.assignment[tr.subject_id], []).append(tr)
    out: dict[int, AugmentedDataset] = {}
    for g, trs in sorted(by_group.items()):
        theta = np.tile(clusters.centroids[g], (len(trs), 1))
        out[g] = augment_counterfactual(trs, model, k_cf, rng, reward_fn,
                                        support, theta=theta,
                                        prefer_recorded_noise=False, group=g)
    return out


def augment_with_sampler(transitions: list[env_mod.Transition], sample_fn,
                         k_cf: int, rng: np.random.Generator, reward_fn,
                         support: ActionSupport,
                         source_tag: str) -> AugmentedDataset:
    """Model-based augmentation without abduction (baseline route).

    sample_fn(states, actions, rng) -> next states draws a fresh outcome from
    a learned dynamics model; the observed noise realization plays no role.
    """
    if k_cf < 1:
        raise ValueError("k_cf must be >= 1")
    if not transitions:
        raise ValueError("empty dataset")
    states = np.array([tr.state for tr in transitions])
    alts = np.array([
        sample_alternative_actions(tr.action, support, k_cf, rng)
        for tr in transitions
    ])
    rep_states = np.repeat(states, k_cf, axis=0)
    flat_actions = alts.reshape(-1)
    sampled = []
    for lo in range(0, len(rep_states), PREDICT_CHUNK):
        hi = lo + PREDICT_CHUNK
        sampled.append(sample_fn(rep_states[lo:hi], flat_actions[lo:hi], rng))
    nxt_all = np.concatenate(sampled, axis=0)

    records: list[env_mod.Transition] = []
    pos = 0
    for tr in transitions:
        records.append(tr)
        for j in range(k_cf):
            nxt = nxt_all[pos]
            a_cf = float(flat_actions[pos])
            reward, done = reward_fn(tr.state, a_cf, nxt)
            records.append(env_mod.Transition(
                subject_id=tr.subject_id, trial_id=tr.trial_id, t=tr.t,
                state=tr.state.copy(), action=a_cf, next_state=nxt.copy(),
                reward=float(reward), done=bool(done),
                provenance="counterfactual", parent=tr.key()))
            pos += 1
    return AugmentedDataset(records=records, k_cf=k_cf,
                            source_model_hash=source_tag, n_skipped=0)
