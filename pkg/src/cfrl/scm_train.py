"""Adversarial estimation of monotone structural dynamics models.

The estimator is a bidirectional conditional GAN. A generator G maps
(s_t, a_t[, theta], u) to s_{t+1}; an encoder E maps s_{t+1} back to
(s_t, a_t, u); a discriminator D scores joint tuples and is trained to tell
encoder joints (E(s'), s') from decoder joints ((s, a[, theta], u), G(...)).
G and E are trained to make the two joint distributions indistinguishable,
plus a supervised regularizer that anchors E's (s, a) reconstruction:

    V(D, G, E) = E[log D(E(s'), s')] + E[log(1 - D(z, G(z)))]
                 + lambda * E[ ||(s, a) - E_{s,a}(s')||^2 ]

The noise u enters G only through a per-dimension strictly increasing path
(exponential-form weights), so the learned model satisfies the monotonicity
that makes counterfactuals identifiable.

Two entry points: train_ctrl_g fits one population-level model from flat
transitions; train_ctrl_p fits a heterogeneous model whose generator is
conditioned on a per-subject context theta estimated by an LSTM from sliding
windows, with a within-subject variance penalty pulling a subject's window
embeddings together.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import env as env_mod
from . import scm as scm_mod
from .numerics import (
    Adam,
    BatchNorm,
    Dense,
    LstmCell,
    NonFiniteGradientError,
    PerDimMonotonicMlp,
    Sequential,
    bce_with_logits,
    hidden_stack,
    mean_log_one_minus_sigmoid,
    mean_log_sigmoid,
    named_params,
    params_hash,
    restore_params,
    save_container,
    load_container,
    sigmoid,
)

SCALE_RAW_MIN = -12.0
SCALE_RAW_MAX = 6.0


@dataclass
class ScmTrainConfig:
    steps: int = 4000
    batch: int = 256
    lr_disc: float = 1e-4
    lr_gen: float = 1e-4
    adam_betas: tuple = (0.5, 0.999)
    lambda_reg: float = 1.0
    non_saturating: bool = True
    holdout_frac: float = 0.1
    seed: int = 0
    gen_widths: tuple = (200, 400, 600, 600)
    enc_widths: tuple = (600, 600, 400, 200)
    disc_widths: tuple = (600, 600, 400, 200)
    noise_hidden: int = 8
    scale_bias_init: float = -3.0
    batchnorm: bool = True
    snapshot_every: int = 250
    report_every: int = 100
    default_abduction: str = "encoder"  # or "bisection"
    # heterogeneous variant
    tau: int = 5
    theta_dim: int = 2
    lstm_hidden: int = 200
    theta_var_weight: float = 1.0
    subject_block: int = 4  # windows per subject drawn together in each batch

    def __post_init__(self):
        if self.default_abduction not in ("encoder", "bisection"):
            raise ValueError("default_abduction must be 'encoder' or 'bisection'")
        if not 0.0 <= self.holdout_frac < 0.5:
            raise ValueError("holdout_frac must be in [0, 0.5)")
        if self.subject_block < 1:
            raise ValueError("subject_block must be >= 1")


@dataclass
class TrainReport:
    steps_run: int = 0
    history: list = field(default_factory=list)  # dicts of per-interval losses
    holdout_recon_rmse: float = float("nan")     # G(s, a, E_u(s')) vs s', raw units
    holdout_cycle_rmse: float = float("nan")     # G(E(s')) vs s', raw units
    state_scale: float = float("nan")            # RMS spread of next states
    monotonicity_pass_rate: float = float("nan")
    disc_enc_score: float = float("nan")         # mean D score on encoder joints
    disc_dec_score: float = float("nan")
    theta_var_penalty: float = float("nan")
    diverged: bool = False


class CondGenerator:
    """G(cond, u) = base(cond) + exp(scale(cond)) * m(u), m per-dim monotone."""

    def __init__(self, cond_dim: int, d_state: int, cfg: ScmTrainConfig, rng):
        self.trunk = hidden_stack(cond_dim, cfg.gen_widths, rng, "gen.trunk", cfg.batchnorm)
        h = cfg.gen_widths[-1]
        self.base_head = Dense(h, d_state, rng, name="gen.base")
        self.scale_head = Dense(h, d_state, rng, name="gen.scale")
        self.scale_head.b.value[...] = cfg.scale_bias_init
        self.noise_path = PerDimMonotonicMlp(d_state, cfg.noise_hidden, rng, name="gen.noise")
        self._cache = None

    def params(self):
        return (self.trunk.params() + self.base_head.params()
                + self.scale_head.params() + self.noise_path.params())

    def buffers(self):
        return self.trunk.buffers()

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def forward(self, cond: np.ndarray, u: np.ndarray, train: bool = True) -> np.ndarray:
        h = self.trunk.forward(cond, train=train)
        base = self.base_head.forward(h, train=train)
        raw = self.scale_head.forward(h, train=train)
        clipped = np.clip(raw, SCALE_RAW_MIN, SCALE_RAW_MAX)
        scale = np.exp(clipped)
        m = self.noise_path.forward(u, train=train)
        self._cache = (m, scale, (raw > SCALE_RAW_MIN) & (raw < SCALE_RAW_MAX))
        return base + scale * m

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        """Returns the gradient wrt cond; noise-input gradient is discarded."""
        m, scale, active = self._cache
        self.noise_path.backward(d_out * scale)
        d_h = self.base_head.backward(d_out)
        d_h = d_h + self.scale_head.backward(d_out * m * scale * active)
        return self.trunk.backward(d_h)


def _window_features(s_n: np.ndarray, a_n: np.ndarray) -> np.ndarray:
    """Per-step LSTM features for one window: (s_t, a_t, s_t - s_{t-1}).

    The first difference is computed inside the window only, so the feature
    sequence is a re-parametrization of the raw (state, action) streams; the
    window's prediction target never leaks in. The explicit step-to-step
    change makes mechanism parameters (how fast the pole accelerates) linearly
    visible to the context estimator.
    """
    prev_delta = np.zeros_like(s_n)
    prev_delta[1:] = s_n[1:] - s_n[:-1]
    return np.concatenate([s_n, a_n[:, None], prev_delta], axis=1)


class ThetaEstimator:
    """LSTM over a tau-step (state, action, state-change) window -> theta.

    The head output is batch-standardized (non-affine) so theta's location and
    scale are pinned: the game over an otherwise free latent input drifts, and
    the within-subject variance penalty alone is minimized by total collapse.
    With per-dimension variance fixed at one, squeezing within-subject
    variance forces between-subject variance up, which is what makes the
    penalty select subject-stable mechanism features.
    """

    def __init__(self, d_in: int, cfg: ScmTrainConfig, rng):
        self.cell = LstmCell(d_in, cfg.lstm_hidden, rng, name="theta.lstm")
        self.head = Dense(cfg.lstm_hidden, cfg.theta_dim, rng, name="theta.head")
        self.norm = BatchNorm(cfg.theta_dim, name="theta.norm", affine=False)

    def params(self):
        return self.cell.params() + self.head.params()

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def forward(self, seqs: np.ndarray, train: bool = True) -> np.ndarray:
        h = self.cell.forward_sequence(seqs, train=train)
        return self.norm.forward(self.head.forward(h, train=train), train=train)

    def backward(self, d_theta: np.ndarray) -> None:
        d_h = self.head.backward(self.norm.backward(d_theta))
        self.cell.backward_sequence(d_h)


class LearnedScm(scm_mod.StructuralModel):
    """Trained monotone dynamics model exposing predict / abduct / sample_noise.

    predict and abduct operate in raw state units; inputs are standardized
    with the training-set statistics stored on the model. Heterogeneous
    models require a theta argument (per-record context rows).
    """

    def __init__(self, gen: CondGenerator, enc: Sequential, disc: Sequential,
                 cfg: ScmTrainConfig, d_state: int,
                 state_mean: np.ndarray, state_std: np.ndarray,
                 theta_model: ThetaEstimator | None = None):
        self.gen = gen
        self.enc = enc
        self.disc = disc
        self.cfg = cfg
        self.d_state = d_state
        self.d_noise = d_state
        self.state_mean = np.asarray(state_mean, dtype=np.float64)
        self.state_std = np.asarray(state_std, dtype=np.float64)
        self.theta_model = theta_model

    # -- normalization ------------------------------------------------------
    def _norm_s(self, s):
        return (np.asarray(s, dtype=np.float64) - self.state_mean) / self.state_std

    def _denorm_s(self, s_n):
        return s_n * self.state_std + self.state_mean

    @staticmethod
    def _norm_a(a):
        return 2.0 * np.asarray(a, dtype=np.float64) - 1.0

    def _cond(self, states, actions, theta):
        parts = [self._norm_s(states), self._norm_a(actions)[:, None]]
        if self.heterogeneous:
            if theta is None:
                raise ValueError("heterogeneous model requires theta")
            parts.append(np.asarray(theta, dtype=np.float64))
        elif theta is not None:
            raise ValueError("population model takes no theta")
        return np.concatenate(parts, axis=1)

    @property
    def heterogeneous(self) -> bool:
        return self.theta_model is not None

    # -- structural-model interface -----------------------------------------
    def predict(self, states, actions, noise, theta=None):
        cond = self._cond(states, actions, theta)
        out_n = self.gen.forward(cond, np.asarray(noise, dtype=np.float64), train=False)
        return self._denorm_s(out_n)

    def encode(self, next_states):
        """E(s') -> (s_hat, a_hat_level, u_hat) in raw units."""
        out = self.enc.forward(self._norm_s(next_states), train=False)
        d = self.d_state
        s_hat = self._denorm_s(out[:, :d])
        a_hat = 0.5 * (out[:, d] + 1.0)
        u_hat = out[:, d + 1:]
        return s_hat, a_hat, u_hat

    def abduct(self, states, actions, next_states, theta=None, method: str | None = None):
        method = method or self.cfg.default_abduction
        if method == "encoder":
            return self.encode(next_states)[2]
        if method == "bisection":
            return scm_mod.bisect_noise(self.predict, states, actions, next_states,
                                        d_noise=self.d_noise, theta=theta,
                                        prior_sigma=1.0)
        raise ValueError(f"unknown abduction method '{method}'")

    def sample_noise(self, n, rng):
        return rng.normal(0.0, 1.0, size=(n, self.d_noise))

    def estimate_theta(self, window: list[env_mod.Transition]) -> np.ndarray:
        """Context vector for one tau-step window of transitions."""
        if not self.heterogeneous:
            raise ValueError("population model has no theta estimator")
        if len(window) != self.cfg.tau:
            raise ValueError(f"window must have exactly tau={self.cfg.tau} steps")
        seq = self._window_seq([window])
        return self.theta_model.forward(seq, train=False)[0]

    def estimate_theta_batch(self, windows: list[list[env_mod.Transition]]) -> np.ndarray:
        if not self.heterogeneous:
            raise ValueError("population model has no theta estimator")
        for w in windows:
            if len(w) != self.cfg.tau:
                raise ValueError(f"window must have exactly tau={self.cfg.tau} steps")
        return self.theta_model.forward(self._window_seq(windows), train=False)

    def _window_seq(self, windows) -> np.ndarray:
        seq = np.stack([
            _window_features(
                self._norm_s(np.array([tr.state for tr in w])),
                self._norm_a(np.array([tr.action for tr in w])),
            )
            for w in windows
        ])
        return seq

    # -- persistence ---------------------------------------------------------
    def _all_layers(self):
        layers = [self.gen.trunk, self.gen.base_head, self.gen.scale_head,
                  self.gen.noise_path, self.enc, self.disc]
        if self.theta_model is not None:
            layers += [self.theta_model.cell, self.theta_model.head,
                       self.theta_model.norm]
        return layers

    def model_hash(self) -> str:
        return params_hash(named_params(self._all_layers()))

    def save(self, path) -> None:
        arch = {
            "cfg": _cfg_to_jsonable(self.cfg),
            "d_state": self.d_state,
            "heterogeneous": self.heterogeneous,
        }
        extra = {
            "state_mean": self.state_mean.tolist(),
            "state_std": self.state_std.tolist(),
        }
        save_container(path, kind="learned_scm", arch=arch,
                       params=named_params(self._all_layers()), extra=extra)

    @classmethod
    def load(cls, path) -> "LearnedScm":
        cont = load_container(path)
        if cont.kind != "learned_scm":
            raise ValueError(f"checkpoint is a '{cont.kind}', not a learned_scm")
        cfg = ScmTrainConfig(**_cfg_from_jsonable(cont.arch["cfg"]))
        model = _build_model(cfg, cont.arch["d_state"], cont.arch["heterogeneous"],
                             np.array(cont.extra["state_mean"]),
                             np.array(cont.extra["state_std"]))
        restore_params(model._all_layers(), cont.params)
        return model


def _cfg_to_jsonable(cfg: ScmTrainConfig) -> dict:
    d = asdict(cfg)
    for key in ("adam_betas", "gen_widths", "enc_widths", "disc_widths"):
        d[key] = list(d[key])
    return d


def _cfg_from_jsonable(d: dict) -> dict:
    d = dict(d)
    for key in ("adam_betas", "gen_widths", "enc_widths", "disc_widths"):
        d[key] = tuple(d[key])
    return d


def _build_model(cfg: ScmTrainConfig, d_state: int, heterogeneous: bool,
                 state_mean: np.ndarray, state_std: np.ndarray) -> LearnedScm:
    rng = np.random.default_rng(cfg.seed)
    cond_dim = d_state + 1 + (cfg.theta_dim if heterogeneous else 0)
    joint_dim = cond_dim + d_state + d_state  # cond + u + s_next
    gen = CondGenerator(cond_dim, d_state, cfg, rng)
    enc = Sequential(
        hidden_stack(d_state, cfg.enc_widths, rng, "enc", cfg.batchnorm).layers
        + [Dense(cfg.enc_widths[-1], d_state + 1 + d_state, rng, name="enc.out")])
    disc = Sequential(
        hidden_stack(joint_dim, cfg.disc_widths, rng, "disc", cfg.batchnorm).layers
        + [Dense(cfg.disc_widths[-1], 1, rng, name="disc.out")])
    theta_model = ThetaEstimator(2 * d_state + 1, cfg, rng) if heterogeneous else None
    return LearnedScm(gen, enc, disc, cfg, d_state, state_mean, state_std,
                      theta_model=theta_model)


# ---------------------------------------------------------------------------
# training


def train_ctrl_g(transitions: list[env_mod.Transition],
                 cfg: ScmTrainConfig) -> tuple[LearnedScm, TrainReport]:
    """Population-level model from flat transitions."""
    if not transitions:
        raise ValueError("empty dataset")
    cols = env_mod.transitions_to_arrays(transitions)
    return _train(cols["states"], cols["actions"], cols["next_states"],
                  seqs=None, subjects=None, cfg=cfg)


def train_ctrl_p(windows: list[list[env_mod.Transition]],
                 cfg: ScmTrainConfig) -> tuple[LearnedScm, TrainReport]:
    """Heterogeneous model from per-subject sliding windows.

    The whole window feeds the LSTM context estimator; each training batch
    conditions the generator on a random step of the window, so the context
    can only help by carrying step-independent information about the
    subject's mechanism. Held-out metrics use the final transition, whose
    outcome is never part of the window.
    """
    if not windows:
        raise ValueError("no training windows")
    for w in windows:
        if len(w) != cfg.tau:
            raise ValueError(f"every window must have tau={cfg.tau} steps")
    states = np.array([w[-1].state for w in windows])
    actions = np.array([w[-1].action for w in windows])
    next_states = np.array([w[-1].next_state for w in windows])
    subjects = np.array([w[-1].subject_id for w in windows])
    raw_seq = [
        (np.array([tr.state for tr in w]), np.array([tr.action for tr in w]),
         np.array([tr.next_state for tr in w]))
        for w in windows
    ]
    return _train(states, actions, next_states, seqs=raw_seq, subjects=subjects,
                  cfg=cfg)


def _train(states, actions, next_states, seqs, subjects,
           cfg: ScmTrainConfig) -> tuple[LearnedScm, TrainReport]:
    het = seqs is not None
    n = len(states)
    d = states.shape[1]
    rng = np.random.default_rng(cfg.seed)

    # holdout split
    perm = rng.permutation(n)
    n_hold = int(round(cfg.holdout_frac * n))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    if len(train_idx) < 2:
        raise ValueError("dataset too small to train")

    # standardization from the training split
    pool = np.concatenate([states[train_idx], next_states[train_idx]], axis=0)
    state_mean = pool.mean(axis=0)
    state_std = np.maximum(pool.std(axis=0), 1e-8)

    model = _build_model(cfg, d, het, state_mean, state_std)
    gen, enc, disc = model.gen, model.enc, model.disc
    theta_model = model.theta_model

    s_n_all = model._norm_s(states)
    a_n_all = model._norm_a(actions)
    sp_n_all = model._norm_s(next_states)
    if het:
        seq_all = np.stack([
            _window_features(model._norm_s(s_w), model._norm_a(a_w))
            for s_w, a_w, _ in seqs
        ])
        # every step of every window, for random-step conditioning
        step_s = np.stack([model._norm_s(s_w) for s_w, _, _ in seqs])
        step_a = np.stack([model._norm_a(a_w) for _, a_w, _ in seqs])
        step_sp = np.stack([model._norm_s(sp_w) for _, _, sp_w in seqs])

    ge_params = gen.params() + enc.params() + (theta_model.params() if het else [])
    opt_d = Adam(disc.params(), lr=cfg.lr_disc, betas=cfg.adam_betas)
    opt_ge = Adam(ge_params, lr=cfg.lr_gen, betas=cfg.adam_betas)
    all_params = disc.params() + ge_params

    def snapshot():
        return [p.value.copy() for p in all_params]

    def restore(snap):
        for p, v in zip(all_params, snap):
            p.value[...] = v

    report = TrainReport()
    last_good = snapshot()
    batch = max(2, min(cfg.batch, len(train_idx)))
    order = rng.permutation(train_idx)
    cursor = 0

    def next_batch_flat():
        nonlocal order, cursor
        if cursor + batch > len(order):
            order = rng.permutation(train_idx)
            cursor = 0
        idx = order[cursor:cursor + batch]
        cursor += batch
        return idx

    if het and cfg.subject_block > 1:
        # Draw whole subject blocks so the within-subject variance penalty has
        # same-subject pairs in every batch; a lone window per subject would
        # leave it inactive with many subjects.
        by_subj: dict[int, list[int]] = {}
        for i in train_idx:
            by_subj.setdefault(int(subjects[i]), []).append(int(i))
        subj_ids = sorted(by_subj)
        subj_windows = {sid: np.array(by_subj[sid]) for sid in subj_ids}
        m = cfg.subject_block
        n_subj_draw = max(1, batch // m)

        def next_batch():
            picked = rng.choice(len(subj_ids), size=n_subj_draw, replace=True)
            rows = []
            for j in picked:
                pool = subj_windows[subj_ids[j]]
                rows.append(rng.choice(pool, size=m, replace=len(pool) < m))
            return np.concatenate(rows)[:batch]
    else:
        next_batch = next_batch_flat

    def build_joints(idx, train_mode):
        """Forward G and E on one batch; returns joints and pieces."""
        if het and train_mode:
            # condition on a random step of each window: the shared context
            # cannot tell steps apart, so only mechanism-level information
            # (not any one outcome) helps the generator
            j = rng.integers(cfg.tau, size=len(idx))
            s_n = step_s[idx, j]
            a_n = step_a[idx, j]
            sp_n = step_sp[idx, j]
        else:
            s_n, a_n, sp_n = s_n_all[idx], a_n_all[idx], sp_n_all[idx]
        theta = theta_model.forward(seq_all[idx], train=train_mode) if het else None
        cond_parts = [s_n, a_n[:, None]] + ([theta] if het else [])
        cond = np.concatenate(cond_parts, axis=1)
        u_p = rng.normal(size=(len(idx), d))
        sp_fake = gen.forward(cond, u_p, train=train_mode)
        e_out = enc.forward(sp_n, train=train_mode)
        s_hat, a_hat, u_hat = e_out[:, :d], e_out[:, d:d + 1], e_out[:, d + 1:]
        enc_joint = np.concatenate(
            [s_hat, a_hat] + ([theta] if het else []) + [u_hat, sp_n], axis=1)
        dec_joint = np.concatenate(
            [s_n, a_n[:, None]] + ([theta] if het else []) + [u_p, sp_fake], axis=1)
        return {
            "s_n": s_n, "a_n": a_n, "sp_n": sp_n, "theta": theta,
            "s_hat": s_hat, "a_hat": a_hat, "u_hat": u_hat,
            "enc_joint": enc_joint, "dec_joint": dec_joint,
        }

    interval = {"loss_d": [], "loss_ge": [], "reg": [], "value": [],
                "enc_score": [], "dec_score": [], "theta_var": []}
    step = 0
    try:
        for step in range(1, cfg.steps + 1):
            # --- discriminator phase ---
            for p in all_params:
                p.zero_grad()
            parts = build_joints(next_batch(), train_mode=True)
            B = len(parts["s_n"])
            stacked = np.vstack([parts["enc_joint"], parts["dec_joint"]])
            logits = disc.forward(stacked, train=True)
            l_enc, g_enc = bce_with_logits(logits[:B], 1.0)
            l_dec, g_dec = bce_with_logits(logits[B:], 0.0)
            loss_d = l_enc + l_dec
            disc.backward(np.vstack([g_enc, g_dec]))
            opt_d.step()

            # --- generator/encoder phase ---
            for p in all_params:
                p.zero_grad()
            idx = next_batch()
            parts = build_joints(idx, train_mode=True)
            B = len(idx)
            stacked = np.vstack([parts["enc_joint"], parts["dec_joint"]])
            logits = disc.forward(stacked, train=True)
            enc_logits, dec_logits = logits[:B], logits[B:]

            if cfg.non_saturating:
                l_e, g_e = bce_with_logits(enc_logits, 0.0)
                l_g, g_g = bce_with_logits(dec_logits, 1.0)
            else:
                l_e, g_e = mean_log_sigmoid(enc_logits)
                l_g, g_g = mean_log_one_minus_sigmoid(dec_logits)

            # supervised anchor for the encoder's (s, a) reconstruction
            diff_s = parts["s_hat"] - parts["s_n"]
            diff_a = parts["a_hat"] - parts["a_n"][:, None]
            reg = float((diff_s**2).sum() + (diff_a**2).sum()) / B
            d_reg_s = cfg.lambda_reg * 2.0 * diff_s / B
            d_reg_a = cfg.lambda_reg * 2.0 * diff_a / B

            theta_var = 0.0
            d_theta_pen = None
            if het:
                theta = parts["theta"]
                subj = subjects[idx]
                d_theta_pen = np.zeros_like(theta)
                for sid in np.unique(subj):
                    rows = subj == sid
                    if rows.sum() < 2:
                        continue
                    mu = theta[rows].mean(axis=0)
                    dev = theta[rows] - mu
                    theta_var += float((dev**2).sum())
                    d_theta_pen[rows] = 2.0 * dev
                theta_var /= B
                d_theta_pen *= cfg.theta_var_weight / B

            d_joint = disc.backward(np.vstack([g_e, g_g]))
            d_enc_joint, d_dec_joint = d_joint[:B], d_joint[B:]

            k = cfg.theta_dim if het else 0
            # encoder joint layout: (s_hat, a_hat, [theta], u_hat, sp_n)
            d_s_hat = d_enc_joint[:, :d] + d_reg_s
            d_a_hat = d_enc_joint[:, d:d + 1] + d_reg_a
            d_u_hat = d_enc_joint[:, d + 1 + k:2 * d + 1 + k]
            enc.backward(np.concatenate([d_s_hat, d_a_hat, d_u_hat], axis=1))

            # decoder joint layout: (s_n, a_n, [theta], u_p, sp_fake)
            d_sp_fake = d_dec_joint[:, 2 * d + 1 + k:]
            d_cond = gen.backward(d_sp_fake)
            if het:
                # theta is data in the joints D scores (its slot gradients are
                # dropped): trained through the real-side slot, the estimator
                # would learn to scrub the theta/outcome coherence D keys on.
                # It learns only through the generator's use of it, plus the
                # within-subject pull.
                d_theta_g = d_cond[:, d + 1:]
                theta_model.backward(d_theta_g + d_theta_pen)
            opt_ge.step()

            loss_ge = l_e + l_g + cfg.lambda_reg * reg + cfg.theta_var_weight * theta_var
            if not (np.isfinite(loss_d) and np.isfinite(loss_ge)):
                raise NonFiniteGradientError("loss")

            # bookkeeping
            interval["loss_d"].append(loss_d)
            interval["loss_ge"].append(loss_ge)
            interval["reg"].append(reg)
            interval["enc_score"].append(float(sigmoid(enc_logits).mean()))
            interval["dec_score"].append(float(sigmoid(dec_logits).mean()))
            interval["theta_var"].append(theta_var)
            v_enc, _ = mean_log_sigmoid(enc_logits)
            v_dec, _ = mean_log_one_minus_sigmoid(dec_logits)
            interval["value"].append(v_enc + v_dec + cfg.lambda_reg * reg)

            if step % cfg.report_every == 0 or step == cfg.steps:
                report.history.append({
                    "step": step,
                    **{key: float(np.mean(vals)) for key, vals in interval.items()},
                })
                interval = {key: [] for key in interval}
            if step % cfg.snapshot_every == 0:
                last_good = snapshot()
    except NonFiniteGradientError as err:
        warnings.warn(f"training diverged at step {step} ({err}); "
                      "restoring last finite checkpoint")
        restore(last_good)
        report.diverged = True

    report.steps_run = step

    # --- final held-out metrics ---
    eval_idx = hold_idx if len(hold_idx) > 0 else train_idx
    s_e, a_e, sp_e = states[eval_idx], actions[eval_idx], next_states[eval_idx]
    theta_e = None
    if het:
        theta_e = theta_model.forward(seq_all[eval_idx], train=False)
    s_hat, a_hat, u_hat = model.encode(sp_e)
    recon = model.predict(s_e, a_e, u_hat, theta=theta_e)
    report.holdout_recon_rmse = float(np.sqrt(((recon - sp_e)**2).mean()))
    cycle = model.predict(s_hat, np.clip(a_hat, 0.0, 1.0), u_hat, theta=theta_e)
    report.holdout_cycle_rmse = float(np.sqrt(((cycle - sp_e)**2).mean()))
    report.state_scale = float(np.sqrt((next_states.var(axis=0)).mean()))
    if report.history:
        report.disc_enc_score = report.history[-1]["enc_score"]
        report.disc_dec_score = report.history[-1]["dec_score"]
        report.theta_var_penalty = report.history[-1]["theta_var"]

    probe_rng = np.random.default_rng(cfg.seed + 104729)
    theta_train = None
    if het:
        theta_train = theta_model.forward(seq_all[train_idx], train=False)
    report.monotonicity_pass_rate = scm_mod.monotonicity_probe(
        model, states[train_idx], actions[train_idx], probe_rng,
        n_probes=1000, theta=theta_train)
    return model, report


def subject_thetas(model: LearnedScm,
                   windows: list[list[env_mod.Transition]]) -> dict[int, np.ndarray]:
    """Subject-level context: mean of the window embeddings per subject."""
    thetas = model.estimate_theta_batch(windows)
    by_subject: dict[int, list[np.ndarray]] = {}
    for w, th in zip(windows, thetas):
        by_subject.setdefault(w[-1].subject_id, []).append(th)
    return {sid: np.mean(vals, axis=0) for sid, vals in by_subject.items()}
