"""Structural causal models and counterfactual inference.

A structural model here is S_{t+1} = f(S_t, A_t, U) with f strictly monotone
in each noise coordinate and U independent of (S_t, A_t); heterogeneous
variants add a context vector theta, f(S_t, A_t, theta, U). Counterfactuals
follow the abduction / action / prediction recipe: infer the noise that
explains the observed triplet, swap the action, re-evaluate f.

Under monotonicity the counterfactual outcome is identified from the
observational conditionals alone: it is the alpha-quantile of
P(S'|s_t, a') where alpha is the CDF level of the observed s_{t+1} under
P(S'|s_t, a_t). quantile_counterfactual implements that construction directly
from samples and serves as the model-free oracle the model-based route is
checked against; the two routes are deliberately independent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from . import env as env_mod


class SupportError(ValueError):
    """Evidence cannot be explained by any noise value in the model's support."""


@dataclass
class CounterfactualQuery:
    state: np.ndarray
    action: float
    next_state: np.ndarray
    action_cf: float
    theta: np.ndarray | None = None


class StructuralModel:
    """Interface: batched predict / abduct plus a noise prior."""

    d_state: int
    d_noise: int

    def predict(self, states, actions, noise, theta=None) -> np.ndarray:
        raise NotImplementedError

    def abduct(self, states, actions, next_states, theta=None) -> np.ndarray:
        raise NotImplementedError

    def sample_noise(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def sample_conditional(self, state, action, n: int, rng: np.random.Generator,
                           theta=None) -> np.ndarray:
        """n draws from P(S'|state, action) via the noise prior."""
        states = np.broadcast_to(np.asarray(state, dtype=np.float64),
                                 (n, self.d_state))
        actions = np.full(n, float(action))
        return self.predict(states, actions, self.sample_noise(n, rng), theta=theta)


def counterfactual(model: StructuralModel, query: CounterfactualQuery) -> np.ndarray:
    """Abduction, action, prediction for a single observed triplet."""
    s = np.asarray(query.state, dtype=np.float64)[None, :]
    sp = np.asarray(query.next_state, dtype=np.float64)[None, :]
    a = np.array([query.action], dtype=np.float64)
    theta = None if query.theta is None else np.asarray(query.theta)[None, :]
    u = model.abduct(s, a, sp, theta=theta)
    a_cf = np.array([query.action_cf], dtype=np.float64)
    return model.predict(s, a_cf, u, theta=theta)[0]


def counterfactual_batch(model: StructuralModel, states, actions, next_states,
                         actions_cf, theta=None) -> np.ndarray:
    u = model.abduct(states, actions, next_states, theta=theta)
    return model.predict(states, np.asarray(actions_cf, dtype=np.float64), u,
                         theta=theta)


# ---------------------------------------------------------------------------
# quantile oracle


@dataclass
class QuantileEstimate:
    value: np.ndarray          # per-dimension counterfactual point estimate
    alpha: np.ndarray          # CDF level of the evidence under the factual action
    sorted_cf: np.ndarray      # sorted draws under the counterfactual action

    def band(self, z: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
        return quantile_band(self.sorted_cf, self.alpha, z=z)


def quantile_counterfactual(sample_conditional, state, action, next_state,
                            action_cf, n_samples: int,
                            rng: np.random.Generator) -> QuantileEstimate:
    """Counterfactual from observational conditionals only.

    sample_conditional(state, action, n, rng) -> (n, d) draws. Computes the
    per-dimension empirical CDF level of next_state under (state, action) and
    reads the same level off the empirical quantiles under (state, action_cf).
    Requires n_samples >= 100; accuracy is Monte-Carlo limited.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100 for a usable quantile estimate")
    obs = np.asarray(next_state, dtype=np.float64)
    factual = np.asarray(sample_conditional(state, action, n_samples, rng))
    alpha = (factual <= obs[None, :]).mean(axis=0)
    cf = np.sort(np.asarray(sample_conditional(state, action_cf, n_samples, rng)),
                 axis=0)
    idx = np.clip(np.ceil(alpha * n_samples).astype(int) - 1, 0, n_samples - 1)
    value = cf[idx, np.arange(cf.shape[1])]
    return QuantileEstimate(value=value, alpha=alpha, sorted_cf=cf)


def quantile_band(sorted_samples: np.ndarray, alpha: np.ndarray,
                  z: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
    """Distribution-free order-statistic band for an empirical alpha-quantile.

    sorted_samples is (n, d) sorted per dimension; the band is the pair of
    order statistics at ranks n*alpha -/+ z*sqrt(n*alpha*(1-alpha)), which
    covers the true quantile with probability ~Phi(z) per side.
    """
    n, d = sorted_samples.shape
    alpha = np.asarray(alpha, dtype=np.float64)
    center = n * alpha
    half = z * np.sqrt(np.maximum(n * alpha * (1.0 - alpha), 1.0))
    lo = np.clip(np.floor(center - half).astype(int), 0, n - 1)
    hi = np.clip(np.ceil(center + half).astype(int), 0, n - 1)
    cols = np.arange(d)
    return sorted_samples[lo, cols], sorted_samples[hi, cols]


# ---------------------------------------------------------------------------
# alternative-action sampling


@dataclass
class ActionSupport:
    """Discrete level set or continuous box for candidate actions."""
    levels: np.ndarray | None = None
    low: float | None = None
    high: float | None = None

    @classmethod
    def discrete(cls, levels) -> "ActionSupport":
        return cls(levels=np.asarray(levels, dtype=np.float64))

    @classmethod
    def continuous(cls, low: float, high: float) -> "ActionSupport":
        return cls(low=float(low), high=float(high))


def sample_alternative_actions(action: float, support: ActionSupport, k: int,
                               rng: np.random.Generator) -> np.ndarray:
    """k alternative actions from the support, excluding the factual one.

    Discrete supports sample without replacement, so k must not exceed the
    number of non-factual levels; continuous supports draw uniformly.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if support.levels is not None:
        others = support.levels[~np.isclose(support.levels, action)]
        if k > len(others):
            raise ValueError(f"k={k} exceeds the {len(others)} alternative levels")
        if k == len(others):
            return others.copy()
        return rng.choice(others, size=k, replace=False)
    return rng.uniform(support.low, support.high, size=k)


def monotonicity_probe(model: StructuralModel, states, actions,
                       rng: np.random.Generator, n_probes: int = 1000,
                       theta=None, min_gap: float = 0.05) -> float:
    """Fraction of paired-noise probes with strictly ordered outputs.

    Draws probe rows from the supplied (states, actions), pairs each noise
    vector u with u + gap (gap > 0 elementwise), and checks that every output
    dimension strictly increases. A correctly constructed monotone model
    passes every probe.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    idx = rng.integers(len(states), size=n_probes)
    s = states[idx]
    a = actions[idx]
    th = None if theta is None else np.asarray(theta)[idx]
    u = rng.normal(size=(n_probes, model.d_noise))
    gap = rng.uniform(min_gap, 2.0, size=(n_probes, model.d_noise))
    lo = model.predict(s, a, u, theta=th)
    hi = model.predict(s, a, u + gap, theta=th)
    return float((hi > lo).all(axis=1).mean())


# ---------------------------------------------------------------------------
# generic bisection abduction for per-dimension monotone models


def bisect_noise(predict, states, actions, next_states, d_noise: int,
                 theta=None, prior_sigma: float = 1.0, tol: float = 1e-8,
                 max_iter: int = 200, max_expand: int = 60) -> np.ndarray:
    """Invert a per-dimension monotone noise map by vectorized bisection.

    predict(states, actions, u, theta) must be strictly monotone in each
    noise coordinate with output dim j depending on u_j only. The initial
    bracket is the prior's +-8 sigma range, expanded geometrically until it
    straddles the target; failure to bracket raises SupportError.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    target = np.asarray(next_states, dtype=np.float64)
    n = states.shape[0]
    lo = np.full((n, d_noise), -8.0 * prior_sigma)
    hi = np.full((n, d_noise), 8.0 * prior_sigma)

    f_lo = predict(states, actions, lo, theta=theta)
    f_hi = predict(states, actions, hi, theta=theta)
    increasing = f_hi >= f_lo

    for _ in range(max_expand):
        # a dimension is bracketed when the target lies between the endpoint values
        low_end = np.where(increasing, f_lo, f_hi)
        high_end = np.where(increasing, f_hi, f_lo)
        need_lo = target < low_end
        need_hi = target > high_end
        if not (need_lo.any() or need_hi.any()):
            break
        width = hi - lo
        lo = np.where(np.where(increasing, need_lo, need_hi), lo - width, lo)
        hi = np.where(np.where(increasing, need_hi, need_lo), hi + width, hi)
        f_lo = predict(states, actions, lo, theta=theta)
        f_hi = predict(states, actions, hi, theta=theta)
    else:
        raise SupportError("evidence outside the model's reachable range")

    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = predict(states, actions, mid, theta=theta)
        go_left = (f_mid > target) == increasing
        hi = np.where(go_left, mid, hi)
        lo = np.where(go_left, lo, mid)
        if float((hi - lo).max()) < tol:
            break
    u = 0.5 * (lo + hi)
    resid = np.abs(predict(states, actions, u, theta=theta) - target)
    scale = 1.0 + np.abs(target)
    if float((resid / scale).max()) > 1e-5:
        raise SupportError("bisection failed to reproduce the evidence")
    return u


# ---------------------------------------------------------------------------
# ground-truth models for oracle tests


class AdditiveGaussianScm(StructuralModel):
    """s' = s + a + u with u ~ N(0, sigma^2), one state dimension."""

    d_state = 1
    d_noise = 1

    def __init__(self, sigma: float = 1.0):
        self.sigma = sigma

    def predict(self, states, actions, noise, theta=None):
        return np.asarray(states) + np.asarray(actions)[:, None] + np.asarray(noise)

    def abduct(self, states, actions, next_states, theta=None):
        return np.asarray(next_states) - np.asarray(states) - np.asarray(actions)[:, None]

    def sample_noise(self, n, rng):
        return rng.normal(0.0, self.sigma, size=(n, 1))


class AdditiveUniformScm(StructuralModel):
    """s' = s + a + sigma * PhiInv(v) with v ~ U(0, 1).

    Observationally identical to AdditiveGaussianScm but with a different
    noise parametrization; counterfactuals must coincide.
    """

    d_state = 1
    d_noise = 1

    def __init__(self, sigma: float = 1.0):
        self.sigma = sigma

    def predict(self, states, actions, noise, theta=None):
        v = np.clip(np.asarray(noise), 1e-15, 1.0 - 1e-15)
        return np.asarray(states) + np.asarray(actions)[:, None] + self.sigma * ndtri(v)

    def abduct(self, states, actions, next_states, theta=None):
        z = (np.asarray(next_states) - np.asarray(states)
             - np.asarray(actions)[:, None]) / self.sigma
        return ndtr(z)

    def sample_noise(self, n, rng):
        return rng.uniform(0.0, 1.0, size=(n, 1))


class MultiplicativeScm(StructuralModel):
    """s' = (1 + s^2 + a) * u with log-normal u; monotone scale noise."""

    d_state = 1
    d_noise = 1

    def __init__(self, log_sigma: float = 0.3):
        self.log_sigma = log_sigma

    def _base(self, states, actions):
        return 1.0 + np.asarray(states)**2 + np.asarray(actions)[:, None]

    def predict(self, states, actions, noise, theta=None):
        return self._base(states, actions) * np.asarray(noise)

    def abduct(self, states, actions, next_states, theta=None):
        u = np.asarray(next_states) / self._base(states, actions)
        if (u <= 0).any():
            raise SupportError("next state outside the multiplicative model's support")
        return u

    def sample_noise(self, n, rng):
        return np.exp(rng.normal(0.0, self.log_sigma, size=(n, 1)))


class CubicScm(StructuralModel):
    """s' = tanh(s) + a + u^3 + u with u ~ N(0,1); nonlinear strictly monotone.

    Abduction goes through the generic bisection path on purpose.
    """

    d_state = 1
    d_noise = 1

    def predict(self, states, actions, noise, theta=None):
        u = np.asarray(noise)
        return np.tanh(np.asarray(states)) + np.asarray(actions)[:, None] + u**3 + u

    def abduct(self, states, actions, next_states, theta=None):
        return bisect_noise(self.predict, states, actions, next_states,
                            d_noise=1, prior_sigma=1.0)

    def sample_noise(self, n, rng):
        return rng.normal(0.0, 1.0, size=(n, 1))


class GroundTruthCartpoleScm(StructuralModel):
    """The simulator itself viewed as a structural model.

    Noise is (force_eps, state_eps[4]). Per output dimension j the map is
    s'_j = det_j(s, a, force_eps) * (1 + eps_j), strictly monotone in eps_j
    whenever det_j != 0. Evidence-only abduction cannot recover force_eps
    (five unknowns, four equations), so it fixes force_eps = 0; replaying a
    recorded noise vector instead reproduces the simulator exactly.
    """

    d_state = env_mod.STATE_DIM
    d_noise = env_mod.NOISE_DIM

    def __init__(self, cfg: env_mod.EnvConfig):
        self.cfg = cfg

    def predict(self, states, actions, noise, theta=None):
        noise = np.asarray(noise, dtype=np.float64)
        det = env_mod.deterministic_step_batch(states, actions, self.cfg,
                                               force_eps=noise[:, 0])
        return det * (1.0 + noise[:, 1:])

    def abduct(self, states, actions, next_states, theta=None):
        det = env_mod.deterministic_step_batch(states, actions, self.cfg)
        target = np.asarray(next_states, dtype=np.float64)
        zero = det == 0.0
        if (zero & (target != 0.0)).any():
            raise SupportError("evidence inconsistent with a zero deterministic component")
        eps = np.where(zero, 0.0, target / np.where(zero, 1.0, det) - 1.0)
        return np.concatenate([np.zeros((len(eps), 1)), eps], axis=1)

    def sample_noise(self, n, rng):
        return rng.normal(0.0, self.cfg.noise_frac, size=(n, self.d_noise))
