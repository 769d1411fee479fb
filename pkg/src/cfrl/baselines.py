"""Dynamics-model baselines: deterministic, Gaussian, and mixture density.

All three learn s_{t+1} from (s_t, a_t) and augment datasets by *sampling*
next states for randomly drawn actions. None of them takes a noise input,
so none can hold the realized exogenous noise fixed across actions; that
structural gap is exactly what separates them from counterfactual
augmentation.

Variants:
  D  squared-error regression, deterministic sampler
  S  diagonal Gaussian (mean + variance heads), Gaussian sampler
  M  mixture density network (categorical over K diagonal Gaussians)
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import (
    Adam,
    Dense,
    NonFiniteGradientError,
    VAR_FLOOR,
    gaussian_nll,
    hidden_stack,
    load_container,
    mdn_nll,
    mse_loss,
    named_params,
    params_hash,
    restore_params,
    save_container,
)
from . import env as env_mod

VARIANTS = ("D", "S", "M")


@dataclass
class BaselineConfig:
    variant: str = "D"
    widths: tuple = (300, 300)
    n_components: int = 5  # M only
    steps: int = 4000
    batch: int = 256
    lr: float = 1e-4
    lr_final: float | None = None  # geometric decay toward this rate when set
    holdout_frac: float = 0.1
    batchnorm: bool = True
    seed: int = 0
    report_every: int = 200
    snapshot_every: int = 500

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.variant == "M" and self.n_components < 1:
            raise ValueError("mixture needs >= 1 component")
        if not 0.0 < self.holdout_frac < 0.5:
            raise ValueError("holdout_frac must be in (0, 0.5)")
        if self.lr_final is not None and not 0.0 < self.lr_final <= self.lr:
            raise ValueError("lr_final must be in (0, lr]")


class DynamicsModel:
    """Trunk + variant-specific heads over standardized (s, a) inputs.

    Predictions live in standardized next-state coordinates internally;
    means and variances are mapped back through the state scale on the way
    out, so samplers and calibration checks see raw units.
    """

    def __init__(self, d_state: int, cfg: BaselineConfig, rng: np.random.Generator,
                 state_mean=None, state_std=None):
        self.cfg = cfg
        self.d_state = d_state
        self.variant = cfg.variant
        d_in = d_state + 1
        self.trunk = hidden_stack(d_in, cfg.widths, rng, name="dyn.trunk",
                                  batchnorm=cfg.batchnorm)
        h = cfg.widths[-1]
        K = cfg.n_components
        if self.variant == "D":
            self.heads = {"mu": Dense(h, d_state, rng, name="dyn.mu")}
        elif self.variant == "S":
            self.heads = {"mu": Dense(h, d_state, rng, name="dyn.mu"),
                          "raw": Dense(h, d_state, rng, name="dyn.rawvar")}
        else:
            self.heads = {"pi": Dense(h, K, rng, name="dyn.pi"),
                          "mu": Dense(h, K * d_state, rng, name="dyn.mu"),
                          "raw": Dense(h, K * d_state, rng, name="dyn.rawvar")}
        self.state_mean = np.zeros(d_state) if state_mean is None else np.asarray(state_mean)
        self.state_std = np.ones(d_state) if state_std is None else np.asarray(state_std)

    def _layers(self):
        return [self.trunk] + [self.heads[k] for k in sorted(self.heads)]

    def params(self):
        out = []
        for layer in self._layers():
            out.extend(layer.params())
        return out

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def _embed(self, states, actions):
        s = (np.asarray(states, dtype=np.float64) - self.state_mean) / self.state_std
        a = 2.0 * np.asarray(actions, dtype=np.float64).reshape(-1, 1) - 1.0
        return np.concatenate([s, a], axis=1)

    def forward(self, states, actions, train=False):
        """Variant-specific head outputs in standardized coordinates."""
        h = self.trunk.forward(self._embed(states, actions), train=train)
        out = {k: head.forward(h, train=train) for k, head in self.heads.items()}
        if self.variant == "M":
            B = h.shape[0]
            K = self.cfg.n_components
            out["mu"] = out["mu"].reshape(B, K, self.d_state)
            out["raw"] = out["raw"].reshape(B, K, self.d_state)
        return out

    def backward(self, d_out):
        d_h = None
        for k, head in self.heads.items():
            g = d_out[k]
            if g.ndim == 3:
                g = g.reshape(g.shape[0], -1)
            dh = head.backward(g)
            d_h = dh if d_h is None else d_h + dh
        self.trunk.backward(d_h)

    # -- inference -----------------------------------------------------

    def predict_mean(self, states, actions):
        out = self.forward(states, actions, train=False)
        if self.variant == "M":
            log_pi = out["pi"] - _logsumexp(out["pi"])
            w = np.exp(log_pi)[:, :, None]
            mu = (w * out["mu"]).sum(axis=1)
        else:
            mu = out["mu"]
        return mu * self.state_std + self.state_mean

    def sample(self, states, actions, rng: np.random.Generator):
        out = self.forward(states, actions, train=False)
        if self.variant == "D":
            z = out["mu"]
        elif self.variant == "S":
            var = VAR_FLOOR + np.exp(out["raw"])
            z = out["mu"] + np.sqrt(var) * rng.normal(size=out["mu"].shape)
        else:
            log_pi = out["pi"] - _logsumexp(out["pi"])
            pi = np.exp(log_pi)
            B, K = pi.shape
            # inverse-CDF draw of the component per row
            comp = (rng.uniform(size=(B, 1)) > np.cumsum(pi, axis=1)).sum(axis=1)
            comp = np.minimum(comp, K - 1)
            rows = np.arange(B)
            mu = out["mu"][rows, comp]
            var = VAR_FLOOR + np.exp(out["raw"][rows, comp])
            z = mu + np.sqrt(var) * rng.normal(size=mu.shape)
        return z * self.state_std + self.state_mean

    def variance(self, states, actions):
        """Predictive variance per dimension in raw units (S and M only)."""
        out = self.forward(states, actions, train=False)
        if self.variant == "S":
            var = VAR_FLOOR + np.exp(out["raw"])
        elif self.variant == "M":
            log_pi = out["pi"] - _logsumexp(out["pi"])
            w = np.exp(log_pi)[:, :, None]
            comp_var = VAR_FLOOR + np.exp(out["raw"])
            mean = (w * out["mu"]).sum(axis=1, keepdims=True)
            var = (w * (comp_var + (out["mu"] - mean)**2)).sum(axis=1)
        else:
            raise ValueError("variant D has no predictive variance")
        return var * self.state_std**2

    def model_hash(self) -> str:
        return params_hash(named_params(self._layers()))

    def save(self, path):
        cfg = asdict(self.cfg)
        cfg["widths"] = list(cfg["widths"])
        save_container(path, kind="dynamics_baseline",
                       arch={"cfg": cfg, "d_state": self.d_state},
                       params=named_params(self._layers()),
                       extra={"state_mean": self.state_mean.tolist(),
                              "state_std": self.state_std.tolist()})

    @classmethod
    def load(cls, path) -> "DynamicsModel":
        cont = load_container(path)
        if cont.kind != "dynamics_baseline":
            raise ValueError(f"checkpoint is a '{cont.kind}', not a dynamics_baseline")
        cfg = BaselineConfig(**{**cont.arch["cfg"],
                                "widths": tuple(cont.arch["cfg"]["widths"])})
        model = cls(cont.arch["d_state"], cfg, np.random.default_rng(0),
                    state_mean=np.array(cont.extra["state_mean"]),
                    state_std=np.array(cont.extra["state_std"]))
        restore_params(model._layers(), cont.params)
        return model


def _logsumexp(x, axis=1):
    m = x.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


@dataclass
class BaselineReport:
    holdout_metric: float  # RMSE for D, NLL per row for S/M
    losses: list
    diverged: bool
    steps_run: int


def _loss_and_grads(model: DynamicsModel, out: dict, target_z: np.ndarray):
    if model.variant == "D":
        loss, d_mu = mse_loss(out["mu"], target_z)
        return loss, {"mu": d_mu}
    if model.variant == "S":
        loss, d_mu, d_raw = gaussian_nll(out["mu"], out["raw"], target_z)
        return loss, {"mu": d_mu, "raw": d_raw}
    loss, d_pi, d_mu, d_raw = mdn_nll(out["pi"], out["mu"], out["raw"], target_z)
    return loss, {"pi": d_pi, "mu": d_mu, "raw": d_raw}


def train_baseline(records: list[env_mod.Transition],
                   cfg: BaselineConfig) -> tuple[DynamicsModel, BaselineReport]:
    """Fit one dynamics baseline; diverging NLL restores the last snapshot."""
    if not records:
        raise ValueError("empty dataset")
    cols = env_mod.transitions_to_arrays(records)
    states, actions, next_states = cols["states"], cols["actions"], cols["next_states"]
    n = len(states)
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_hold = max(1, int(round(n * cfg.holdout_frac)))
    hold, tr = perm[:n_hold], perm[n_hold:]
    if len(tr) == 0:
        raise ValueError("dataset too small for the requested holdout split")

    pool = np.concatenate([states[tr], next_states[tr]], axis=0)
    mean = pool.mean(axis=0)
    std = np.maximum(pool.std(axis=0), 1e-8)
    model = DynamicsModel(states.shape[1], cfg, rng, mean, std)

    target_z = (next_states - mean) / std
    opt = Adam(model.params(), lr=cfg.lr)
    report = BaselineReport(holdout_metric=float("nan"), losses=[],
                            diverged=False, steps_run=0)
    snap = {k: v.copy() for k, v in named_params(model._layers()).items()}
    batch = min(cfg.batch, len(tr))

    step = 0
    try:
        for step in range(1, cfg.steps + 1):
            if cfg.lr_final is not None:
                opt.lr = cfg.lr * (cfg.lr_final / cfg.lr)**(step / cfg.steps)
            idx = tr[rng.integers(len(tr), size=batch)]
            model.zero_grad()
            out = model.forward(states[idx], actions[idx], train=True)
            loss, grads = _loss_and_grads(model, out, target_z[idx])
            if not np.isfinite(loss):
                raise NonFiniteGradientError("loss")
            model.backward(grads)
            opt.step()
            if step % cfg.report_every == 0:
                report.losses.append(loss)
            if step % cfg.snapshot_every == 0:
                snap = {k: v.copy() for k, v in named_params(model._layers()).items()}
    except NonFiniteGradientError as err:
        warnings.warn(f"baseline {cfg.variant} diverged at step {step} ({err}); "
                      "restoring last finite checkpoint")
        restore_params(model._layers(), snap)
        report.diverged = True
    report.steps_run = step

    out = model.forward(states[hold], actions[hold], train=False)
    if cfg.variant == "D":
        pred = out["mu"] * std + mean
        report.holdout_metric = float(np.sqrt(((pred - next_states[hold])**2).mean()))
    else:
        loss, _ = _loss_and_grads(model, out, target_z[hold])
        report.holdout_metric = float(loss)
    return model, report


def sample_next(model: DynamicsModel, states, actions, rng: np.random.Generator):
    """Sampled next states for a batch of (s, a); D is deterministic."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_1d(np.asarray(actions, dtype=np.float64))
    return model.sample(states, actions, rng)
