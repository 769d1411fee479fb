"""Policy learning: value iteration, tabular Q-learning, and a dueling DQN.

The tabular path exists to make the convergence claim executable: Q-learning
driven by counterfactually augmented transition streams (every action of a
visited state updated with a shared noise draw) converges to the optimal
action values of the underlying MDP under Robbins-Monro step sizes.
value_iteration provides the independent Q* oracle.

The function-approximation path is a dueling double DQN trained offline on
(possibly augmented) transition datasets. The dueling head recombines as
Q = V + A - mean_a A exactly; targets are double-DQN: the online network
picks the argmax action, the target network supplies its value.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import env as env_mod
from .numerics import (
    Adam,
    Dense,
    NonFiniteGradientError,
    Sequential,
    hidden_stack,
    named_params,
    params_hash,
    restore_params,
    save_container,
    load_container,
)

# ---------------------------------------------------------------------------
# finite MDPs


@dataclass
class FiniteMdp:
    transition: np.ndarray  # (S, A, S) row-stochastic in the last axis
    reward: np.ndarray      # (S, A)
    gamma: float

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        S, A, S2 = self.transition.shape
        if S != S2:
            raise ValueError("transition tensor must be (S, A, S)")
        if self.reward.shape != (S, A):
            raise ValueError("reward must be (S, A)")
        if (self.transition < 0).any():
            raise ValueError("negative transition probability")
        sums = self.transition.sum(axis=2)
        if np.abs(sums - 1.0).max() > 1e-12:
            raise ValueError("transition rows must sum to 1 within 1e-12")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


def random_mdp(n_states: int, n_actions: int, rng: np.random.Generator,
               gamma: float = 0.9, concentration: float = 0.5) -> FiniteMdp:
    """Random dense MDP with Dirichlet transition rows and U(0,1) rewards."""
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    P = P / P.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return FiniteMdp(P, R, gamma)


def value_iteration(mdp: FiniteMdp, tol: float = 1e-10,
                    max_iter: int = 1_000_000) -> np.ndarray:
    """Optimal Q via Bellman iteration; the returned table has residual < tol."""
    if mdp.gamma >= 1.0:
        raise ValueError("value iteration requires discount < 1")
    Q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        V = Q.max(axis=1)
        Q_new = mdp.reward + mdp.gamma * mdp.transition @ V
        if np.abs(Q_new - Q).max() < tol:
            return Q_new
        Q = Q_new
    raise RuntimeError("value iteration did not converge")


# ---------------------------------------------------------------------------
# learning-rate schedules


@dataclass
class PowerSchedule:
    """alpha_t = c / ceil(t / chunk)^p, valid for 0.5 < p <= 1.

    The exponent window is exactly the Robbins-Monro range for this family:
    sum alpha_t diverges while sum alpha_t^2 stays finite. Constant schedules
    (p = 0) and too-fast decay (p > 1) are rejected.
    """
    c: float = 1.0
    p: float = 0.7
    chunk: int = 1

    def __post_init__(self):
        if not 0.5 < self.p <= 1.0:
            raise ValueError("exponent p must satisfy 0.5 < p <= 1")
        if self.c <= 0:
            raise ValueError("scale c must be positive")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")

    def alpha(self, t):
        """Step size at update index t (scalar or array, 1-based)."""
        return self.c / np.ceil(np.asarray(t, dtype=np.float64) / self.chunk)**self.p


@dataclass
class QTable:
    values: np.ndarray
    visits: np.ndarray
    n_updates: int


def counterfactual_mdp_stream(mdp: FiniteMdp, rng: np.random.Generator,
                              restart_prob: float = 0.05, n_walkers: int = 1):
    """Exhaustive counterfactual augmentation of a behavior stream.

    A uniform-random behavior policy walks the MDP (with occasional restarts
    so every state is visited indefinitely). Each observed step draws one
    uniform noise value u; the batch it yields contains every action at the
    current state with next state F^{-1}_{s,a}(u), the inverse-CDF evaluated
    at the shared noise. Marginally each row is distributed per P(.|s, a), so
    the augmented stream is a faithful sample of the underlying MDP while
    visiting every (s, a) pair infinitely often.

    n_walkers independent walkers are stepped in lockstep purely so the
    stream amortizes its bookkeeping; each walker carries its own noise.
    """
    S, A = mdp.n_states, mdp.n_actions
    W = int(n_walkers)
    if W < 1:
        raise ValueError("n_walkers must be >= 1")
    cum = np.cumsum(mdp.transition, axis=2)
    actions = np.tile(np.arange(A), W)
    states = rng.integers(S, size=W)
    while True:
        u = rng.uniform(size=W)
        # (W, A) inverse CDF at the shared-per-step noise value
        nxt = np.minimum((u[:, None, None] > cum[states]).sum(axis=2), S - 1)
        yield (np.repeat(states, A), actions,
               mdp.reward[states].ravel(), nxt.ravel())
        a_obs = rng.integers(A, size=W)
        states = nxt[np.arange(W), a_obs]
        restart = rng.uniform(size=W) < restart_prob
        if restart.any():
            states = np.where(restart, rng.integers(S, size=W), states)


def tabular_q_learning(stream, n_states: int, n_actions: int,
                       schedule: PowerSchedule, gamma: float,
                       n_updates: int) -> QTable:
    """Asynchronous Q-learning over a stream of transition batches.

    stream yields (states, actions, rewards, next_states) index arrays; each
    row is one sampled target. The step size for a pair's k-th update is
    schedule.alpha(k) on that pair's own visit clock, which is the form the
    asynchronous-convergence argument actually needs (per-pair Robbins-Monro
    conditions). Rows hitting the same (s, a) within a batch are averaged
    into a single update of its clock. Stops after n_updates rows.
    """
    if gamma >= 1.0 or gamma < 0.0:
        raise ValueError("gamma must be in [0, 1)")
    Q = np.zeros((n_states, n_actions))
    visits = np.zeros((n_states, n_actions), dtype=np.int64)
    clock = np.zeros((n_states, n_actions), dtype=np.int64)
    tsum = np.zeros_like(Q)
    cnt = np.zeros_like(Q)
    done = 0
    for batch in stream:
        s, a, r, sp = batch
        take = min(len(s), n_updates - done)
        if take < len(s):
            s, a, r, sp = s[:take], a[:take], r[:take], sp[:take]
        targets = r + gamma * Q[sp].max(axis=1)
        tsum[:] = 0.0
        cnt[:] = 0.0
        np.add.at(tsum, (s, a), targets)
        np.add.at(cnt, (s, a), 1.0)
        hit = cnt > 0
        clock[hit] += 1
        alpha = schedule.alpha(clock[hit])
        Q[hit] += alpha * (tsum[hit] / cnt[hit] - Q[hit])
        np.add.at(visits, (s, a), 1)
        done += take
        if done >= n_updates:
            break
    return QTable(values=Q, visits=visits, n_updates=done)


# ---------------------------------------------------------------------------
# dueling double DQN


@dataclass
class D3qnConfig:
    steps: int = 8000
    batch: int = 128
    lr: float = 1e-4
    gamma: float = 0.99
    target_sync: int = 1000
    hidden: tuple = (512, 512, 512, 512)
    batchnorm: bool = True
    seed: int = 0
    report_every: int = 200
    snapshot_every: int = 500


class DuelingNet:
    """State-value and advantage streams over a shared trunk.

    The recombination Q = V + (A - mean_a A) is an exact identity, which pins
    down the otherwise unidentifiable V/A split.
    """

    def __init__(self, d_state: int, n_actions: int, cfg: D3qnConfig,
                 rng: np.random.Generator,
                 state_mean: np.ndarray | None = None,
                 state_std: np.ndarray | None = None):
        self.cfg = cfg
        self.d_state = d_state
        self.n_actions = n_actions
        self.trunk = hidden_stack(d_state, cfg.hidden, rng, name="dqn.trunk",
                                  batchnorm=cfg.batchnorm)
        h = cfg.hidden[-1]
        self.v_head = Dense(h, 1, rng, name="dqn.value")
        self.a_head = Dense(h, n_actions, rng, name="dqn.advantage")
        self.state_mean = np.zeros(d_state) if state_mean is None else np.asarray(state_mean)
        self.state_std = np.ones(d_state) if state_std is None else np.asarray(state_std)
        self._cache = None

    def params(self):
        return self.trunk.params() + self.v_head.params() + self.a_head.params()

    def _layers(self):
        return [self.trunk, self.v_head, self.a_head]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def streams(self, states, train=False):
        """(V, A) pair before recombination."""
        x = (np.asarray(states, dtype=np.float64) - self.state_mean) / self.state_std
        h = self.trunk.forward(x, train=train)
        return self.v_head.forward(h, train=train), self.a_head.forward(h, train=train)

    def forward(self, states, train=False):
        v, a = self.streams(states, train=train)
        return v + a - a.mean(axis=1, keepdims=True)

    def backward(self, d_q):
        d_v = d_q.sum(axis=1, keepdims=True)
        d_a = d_q - d_q.mean(axis=1, keepdims=True)
        d_h = self.v_head.backward(d_v) + self.a_head.backward(d_a)
        self.trunk.backward(d_h)

    def model_hash(self) -> str:
        return params_hash(named_params(self._layers()))

    def save(self, path):
        arch = {"cfg": _d3qn_cfg_jsonable(self.cfg), "d_state": self.d_state,
                "n_actions": self.n_actions}
        extra = {"state_mean": self.state_mean.tolist(),
                 "state_std": self.state_std.tolist()}
        save_container(path, kind="dueling_dqn", arch=arch,
                       params=named_params(self._layers()), extra=extra)

    @classmethod
    def load(cls, path) -> "DuelingNet":
        cont = load_container(path)
        if cont.kind != "dueling_dqn":
            raise ValueError(f"checkpoint is a '{cont.kind}', not a dueling_dqn")
        cfg = D3qnConfig(**{**cont.arch["cfg"], "hidden": tuple(cont.arch["cfg"]["hidden"])})
        net = cls(cont.arch["d_state"], cont.arch["n_actions"], cfg,
                  np.random.default_rng(0),
                  state_mean=np.array(cont.extra["state_mean"]),
                  state_std=np.array(cont.extra["state_std"]))
        restore_params(net._layers(), cont.params)
        return net


def _d3qn_cfg_jsonable(cfg: D3qnConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(d["hidden"])
    return d


def copy_params(src: DuelingNet, dst: DuelingNet) -> None:
    restore_params(dst._layers(), named_params(src._layers()))


def compute_double_targets(main: DuelingNet, target: DuelingNet,
                           rewards: np.ndarray, next_states: np.ndarray,
                           dones: np.ndarray, gamma: float) -> np.ndarray:
    """Double-DQN targets: online argmax, target-network evaluation."""
    q_main = main.forward(next_states, train=False)
    a_star = q_main.argmax(axis=1)
    q_target = target.forward(next_states, train=False)
    boot = q_target[np.arange(len(a_star)), a_star]
    return rewards + gamma * (1.0 - dones.astype(np.float64)) * boot


def level_to_index(levels: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Map action levels onto grid indices, validating grid membership."""
    idx = np.rint(actions * (len(levels) - 1)).astype(int)
    if np.abs(levels[idx] - actions).max() > 1e-9:
        raise ValueError("action level not on the configured grid")
    return idx


@dataclass
class D3qnHistory:
    losses: list = field(default_factory=list)
    mean_q: list = field(default_factory=list)
    diverged: bool = False
    steps_run: int = 0


def train_d3qn(records: list[env_mod.Transition], env_cfg: env_mod.EnvConfig,
               cfg: D3qnConfig) -> tuple[DuelingNet, D3qnHistory]:
    """Offline dueling double DQN on a transition dataset."""
    if not records:
        raise ValueError("empty dataset")
    levels = env_cfg.action_grid()
    cols = env_mod.transitions_to_arrays(records)
    states = cols["states"]
    a_idx = level_to_index(levels, cols["actions"])
    rewards = cols["rewards"]
    next_states = cols["next_states"]
    dones = cols["dones"]

    rng = np.random.default_rng(cfg.seed)
    mean = states.mean(axis=0)
    std = np.maximum(states.std(axis=0), 1e-8)
    main = DuelingNet(states.shape[1], len(levels), cfg, rng, mean, std)
    target = DuelingNet(states.shape[1], len(levels), cfg, rng, mean, std)
    copy_params(main, target)

    opt = Adam(main.params(), lr=cfg.lr)
    hist = D3qnHistory()
    n = len(states)
    batch = min(cfg.batch, n)
    snap = named_params(main._layers())
    snap = {k: v.copy() for k, v in snap.items()}

    step = 0
    try:
        for step in range(1, cfg.steps + 1):
            idx = rng.integers(n, size=batch)
            y = compute_double_targets(main, target, rewards[idx],
                                       next_states[idx], dones[idx], cfg.gamma)
            main.zero_grad()
            q = main.forward(states[idx], train=True)
            chosen = q[np.arange(batch), a_idx[idx]]
            diff = chosen - y
            loss = float((diff**2).mean())
            if not np.isfinite(loss):
                raise NonFiniteGradientError("loss")
            d_q = np.zeros_like(q)
            d_q[np.arange(batch), a_idx[idx]] = 2.0 * diff / batch
            main.backward(d_q)
            opt.step()

            if step % cfg.target_sync == 0:
                copy_params(main, target)
            if step % cfg.report_every == 0:
                hist.losses.append(loss)
                hist.mean_q.append(float(q.mean()))
            if step % cfg.snapshot_every == 0:
                snap = {k: v.copy() for k, v in named_params(main._layers()).items()}
    except NonFiniteGradientError as err:
        warnings.warn(f"policy training diverged at step {step} ({err}); "
                      "restoring last finite checkpoint")
        restore_params(main._layers(), snap)
        hist.diverged = True
    hist.steps_run = step
    return main, hist


def greedy_policy(net: DuelingNet, env_cfg: env_mod.EnvConfig):
    levels = env_cfg.action_grid()

    def policy(state):
        q = net.forward(np.asarray(state)[None, :], train=False)[0]
        return float(levels[int(q.argmax())])

    return policy


def evaluate_policy(net: DuelingNet, env_cfg: env_mod.EnvConfig,
                    n_trials: int = 10, seed: int = 0) -> dict:
    """Greedy rollouts in the simulator; returns reward and value metrics."""
    levels = env_cfg.action_grid()
    per_trial = []
    q_values = []
    for i in range(n_trials):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        state = env_mod.initial_state(rng)
        total = 0.0
        for _ in range(env_cfg.max_steps):
            q = net.forward(state[None, :], train=False)[0]
            a = int(q.argmax())
            q_values.append(float(q[a]))
            state, r, done, _ = env_mod.step(state, float(levels[a]), env_cfg, rng)
            total += r
            if done:
                break
        per_trial.append(total)
    return {
        "cumulative_reward": float(np.mean(per_trial)),
        "per_trial": per_trial,
        "mean_q": float(np.mean(q_values)) if q_values else float("nan"),
    }
