"""Noisy CartPole simulator and batch-dataset utilities.

The physics is the classic cart-pole Euler integration. Two departures from
the textbook setup: the action is a level a in [0, 1] mapped to a force
force_mag * (2a - 1), and every step applies multiplicative noise
value * (1 + eps) with eps ~ N(0, noise_frac^2) independently to the force
and to each next-state component. Episodes end when |x| > 2.4 or
|theta| > 12 degrees; trials are additionally capped at max_steps.

Datasets are flat lists of Transition records. subject_id encodes the
environment variant: for multi-gravity data, subject_id // GROUP_BASE is the
gravity index. Files are JSON Lines with a sidecar metadata record.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

STATE_DIM = 4
NOISE_DIM = 5  # force noise + one per next-state component
GROUP_BASE = 10_000  # subject_id = gravity_index * GROUP_BASE + trial index

# gravity levels used by the heterogeneous benchmark (one per planet)
HD_GRAVITIES = (24.79, 9.8, 3.7, 11.15, 0.62)
SD_GRAVITY = 9.8


class TerminalStateError(ValueError):
    """Raised when stepping a state that already ended the episode."""


@dataclass
class EnvConfig:
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    force_mag: float = 10.0
    dt: float = 0.02
    noise_frac: float = 0.05
    action_levels: int = 11
    max_steps: int = 20
    x_threshold: float = 2.4
    theta_threshold_deg: float = 12.0

    def __post_init__(self):
        if self.noise_frac < 0:
            raise ValueError("noise_frac must be >= 0")
        if self.action_levels < 2:
            raise ValueError("need at least two action levels")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @property
    def theta_threshold(self) -> float:
        return self.theta_threshold_deg * np.pi / 180.0

    def action_grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.action_levels)

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


@dataclass
class Transition:
    subject_id: int
    trial_id: int
    t: int
    state: np.ndarray
    action: float
    next_state: np.ndarray
    reward: float
    done: bool
    provenance: str = "observed"
    noise: np.ndarray | None = None  # realized (eps_force, eps_state[4]) when known
    parent: tuple[int, int, int] | None = None  # (subject, trial, t) of the observed record

    def to_record(self) -> dict:
        rec = {
            "subject_id": self.subject_id,
            "trial_id": self.trial_id,
            "t": self.t,
            "state": [float(v) for v in self.state],
            "action": float(self.action),
            "next_state": [float(v) for v in self.next_state],
            "reward": float(self.reward),
            "done": bool(self.done),
            "provenance": self.provenance,
        }
        if self.noise is not None:
            rec["noise"] = [float(v) for v in self.noise]
        if self.parent is not None:
            rec["parent"] = list(self.parent)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Transition":
        return cls(
            subject_id=int(rec["subject_id"]),
            trial_id=int(rec["trial_id"]),
            t=int(rec["t"]),
            state=np.array(rec["state"], dtype=np.float64),
            action=float(rec["action"]),
            next_state=np.array(rec["next_state"], dtype=np.float64),
            reward=float(rec["reward"]),
            done=bool(rec["done"]),
            provenance=rec.get("provenance", "observed"),
            noise=np.array(rec["noise"], dtype=np.float64) if "noise" in rec else None,
            parent=tuple(rec["parent"]) if "parent" in rec else None,
        )

    def key(self) -> tuple[int, int, int]:
        return (self.subject_id, self.trial_id, self.t)


def is_terminal(state: np.ndarray, cfg: EnvConfig) -> bool:
    x, _, theta, _ = state
    return bool(abs(x) > cfg.x_threshold or abs(theta) > cfg.theta_threshold)


def deterministic_step(state: np.ndarray, action: float, cfg: EnvConfig,
                       force_eps: float = 0.0) -> np.ndarray:
    """One Euler step of the cart-pole dynamics before state noise."""
    x, x_dot, theta, theta_dot = np.asarray(state, dtype=np.float64)
    force = cfg.force_mag * (2.0 * action - 1.0) * (1.0 + force_eps)
    total_mass = cfg.cart_mass + cfg.pole_mass
    polemass_length = cfg.pole_mass * cfg.pole_half_length
    sin_t = np.sin(theta)
    cos_t = np.cos(theta)
    temp = (force + polemass_length * theta_dot**2 * sin_t) / total_mass
    theta_acc = (cfg.gravity * sin_t - cos_t * temp) / (
        cfg.pole_half_length * (4.0 / 3.0 - cfg.pole_mass * cos_t**2 / total_mass))
    x_acc = temp - polemass_length * theta_acc * cos_t / total_mass
    return np.array([
        x + cfg.dt * x_dot,
        x_dot + cfg.dt * x_acc,
        theta + cfg.dt * theta_dot,
        theta_dot + cfg.dt * theta_acc,
    ])


def deterministic_step_batch(states: np.ndarray, actions: np.ndarray, cfg: EnvConfig,
                             force_eps: np.ndarray | float = 0.0) -> np.ndarray:
    """Vectorized Euler step over (N, 4) states and (N,) action levels."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    x, x_dot, theta, theta_dot = states.T
    force = cfg.force_mag * (2.0 * actions - 1.0) * (1.0 + force_eps)
    total_mass = cfg.cart_mass + cfg.pole_mass
    polemass_length = cfg.pole_mass * cfg.pole_half_length
    sin_t = np.sin(theta)
    cos_t = np.cos(theta)
    temp = (force + polemass_length * theta_dot**2 * sin_t) / total_mass
    theta_acc = (cfg.gravity * sin_t - cos_t * temp) / (
        cfg.pole_half_length * (4.0 / 3.0 - cfg.pole_mass * cos_t**2 / total_mass))
    x_acc = temp - polemass_length * theta_acc * cos_t / total_mass
    return np.stack([
        x + cfg.dt * x_dot,
        x_dot + cfg.dt * x_acc,
        theta + cfg.dt * theta_dot,
        theta_dot + cfg.dt * theta_acc,
    ], axis=1)


def step_given_noise(state: np.ndarray, action: float, noise: np.ndarray,
                     cfg: EnvConfig) -> np.ndarray:
    """Deterministic replay of a step under a fixed noise realization."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (NOISE_DIM,):
        raise ValueError(f"noise must have shape ({NOISE_DIM},)")
    raw = deterministic_step(state, action, cfg, force_eps=noise[0])
    return raw * (1.0 + noise[1:])


def step(state: np.ndarray, action: float, cfg: EnvConfig,
         rng: np.random.Generator) -> tuple[np.ndarray, float, bool, np.ndarray]:
    """Sample one noisy step; returns (next_state, reward, done, noise)."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (STATE_DIM,):
        raise ValueError(f"state must have shape ({STATE_DIM},)")
    if not np.isfinite(state).all():
        raise ValueError("state must be finite")
    if not (0.0 <= action <= 1.0):
        raise ValueError(f"action level {action} outside [0, 1]")
    if is_terminal(state, cfg):
        raise TerminalStateError("cannot step a terminated episode")
    noise = rng.normal(0.0, cfg.noise_frac, size=NOISE_DIM)
    next_state = step_given_noise(state, action, noise, cfg)
    done = is_terminal(next_state, cfg)
    reward = 0.0 if done else 1.0
    return next_state, reward, done, noise


def reward_done(next_state: np.ndarray, cfg: EnvConfig) -> tuple[float, bool]:
    """Reward and termination implied by a (possibly generated) next state."""
    done = is_terminal(next_state, cfg)
    return (0.0 if done else 1.0), done


def initial_state(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-0.05, 0.05, size=STATE_DIM)


def generate_trials(cfg: EnvConfig, n_trials: int, seed: int, policy=None,
                    subject_offset: int = 0, record_noise: bool = True) -> list[Transition]:
    """Roll out n_trials episodes; one subject per trial.

    policy is a callable state -> action level; None draws uniformly from the
    action grid. Trial i uses an RNG derived from (seed, i), so the first k
    trials of a run are byte-identical to a run with fewer trials.
    """
    grid = cfg.action_grid()
    out: list[Transition] = []
    for i in range(n_trials):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        subject = subject_offset + i
        state = initial_state(rng)
        for t in range(cfg.max_steps):
            if policy is None:
                action = float(grid[rng.integers(len(grid))])
            else:
                action = float(policy(state))
            next_state, reward, done, noise = step(state, action, cfg, rng)
            out.append(Transition(
                subject_id=subject, trial_id=subject, t=t,
                state=state.copy(), action=action, next_state=next_state.copy(),
                reward=reward, done=done, provenance="observed",
                noise=noise.copy() if record_noise else None))
            if done:
                break
            state = next_state
    return out


def generate_sd_dataset(n_trials: int, seed: int, cfg: EnvConfig | None = None) -> list[Transition]:
    """Single-gravity pool; subsetting by trial index slices a larger pool."""
    cfg = cfg or EnvConfig(gravity=SD_GRAVITY)
    return generate_trials(cfg, n_trials, seed)


def generate_hd_dataset(trials_per_gravity: int, seed: int,
                        gravities: tuple[float, ...] = HD_GRAVITIES,
                        base_cfg: EnvConfig | None = None,
                        trials_per_subject: int = 1
                        ) -> tuple[list[Transition], dict[int, float]]:
    """Multi-gravity pool; returns transitions plus subject -> gravity map.

    trials_per_subject > 1 groups consecutive trials under one subject id, so
    a subject contributes several independent trajectories of the same
    mechanism. trial_id stays unique, so windows never straddle trials.
    """
    if trials_per_subject < 1:
        raise ValueError("trials_per_subject must be >= 1")
    base = base_cfg or EnvConfig()
    out: list[Transition] = []
    gravity_map: dict[int, float] = {}
    for g_idx, g in enumerate(gravities):
        cfg = EnvConfig(**{**asdict(base), "gravity": g})
        offset = g_idx * GROUP_BASE
        trs = generate_trials(cfg, trials_per_gravity, seed=seed + g_idx,
                              subject_offset=offset)
        for tr in trs:
            tr.subject_id = offset + (tr.trial_id - offset) // trials_per_subject
            gravity_map[tr.subject_id] = g
        out.extend(trs)
    return out, gravity_map


def subject_group(subject_id: int) -> int:
    return subject_id // GROUP_BASE


def window(transitions: list[Transition], tau: int) -> list[list[Transition]]:
    """Sliding windows of tau consecutive steps within each subject's trial.

    The i-th window of a subject starts at step i, so concatenating the first
    triplet of every window reproduces the subject's sequence prefix. Subjects
    with fewer than tau steps produce no windows.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    by_subject: dict[tuple[int, int], list[Transition]] = {}
    for tr in transitions:
        by_subject.setdefault((tr.subject_id, tr.trial_id), []).append(tr)
    windows: list[list[Transition]] = []
    skipped = 0
    for key in by_subject:
        seq = sorted(by_subject[key], key=lambda tr: tr.t)
        for a, b in zip(seq, seq[1:]):
            if b.t != a.t + 1:
                raise ValueError(f"subject {key} has non-consecutive steps "
                                 f"{a.t} -> {b.t}")
        if len(seq) < tau:
            skipped += 1
            continue
        for i in range(len(seq) - tau + 1):
            windows.append(seq[i:i + tau])
    if skipped:
        warnings.warn(f"skipped {skipped} subjects shorter than tau={tau}")
    return windows


def write_transitions(path, transitions: list[Transition], cfg: EnvConfig,
                      seed: int, gravity_map: dict[int, float] | None = None) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for tr in transitions:
            fh.write(json.dumps(tr.to_record()) + "\n")
    meta = {
        "config": asdict(cfg),
        "config_hash": cfg.hash(),
        "seed": seed,
        "n_transitions": len(transitions),
        "gravity_map": {str(k): v for k, v in (gravity_map or {}).items()},
    }
    meta_path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def read_transitions(path) -> list[Transition]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file: {path}")
    out = []
    with path.open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Transition.from_record(json.loads(line)))
    return out


def read_metadata(path) -> dict:
    mp = meta_path(path)
    if not mp.exists():
        raise FileNotFoundError(f"missing dataset metadata: {mp}")
    return json.loads(mp.read_text())


def transitions_to_arrays(transitions: list[Transition]) -> dict[str, np.ndarray]:
    """Columnar view: states, actions, next_states, rewards, dones, subjects."""
    return {
        "states": np.array([tr.state for tr in transitions], dtype=np.float64),
        "actions": np.array([tr.action for tr in transitions], dtype=np.float64),
        "next_states": np.array([tr.next_state for tr in transitions], dtype=np.float64),
        "rewards": np.array([tr.reward for tr in transitions], dtype=np.float64),
        "dones": np.array([tr.done for tr in transitions], dtype=bool),
        "subjects": np.array([tr.subject_id for tr in transitions], dtype=np.int64),
    }
