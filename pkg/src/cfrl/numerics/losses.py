"""Loss functions returning (scalar, gradients wrt each input head).

All losses average over the batch so gradients are per-batch means.
"""
from __future__ import annotations

import numpy as np

from .layers import as_f64, sigmoid

VAR_FLOOR = 1e-6  # keeps likelihoods finite when a variance head underflows


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def mse_loss(pred, target):
    pred = as_f64(pred)
    target = as_f64(target)
    diff = pred - target
    n = pred.size
    return float((diff**2).sum() / n), 2.0 * diff / n


def bce_with_logits(logits, target):
    """Binary cross-entropy on logits; target is 0/1 (scalar or array)."""
    logits = as_f64(logits)
    t = np.broadcast_to(as_f64(target), logits.shape)
    # -t*log(sig) - (1-t)*log(1-sig) in the stable softplus form
    loss = t * softplus(-logits) + (1.0 - t) * softplus(logits)
    n = logits.size
    return float(loss.sum() / n), (sigmoid(logits) - t) / n


def mean_log_sigmoid(logits):
    """mean(log sigmoid(l)) and its gradient; used by saturating GAN losses."""
    logits = as_f64(logits)
    n = logits.size
    return float(-softplus(-logits).sum() / n), (1.0 - sigmoid(logits)) / n


def mean_log_one_minus_sigmoid(logits):
    logits = as_f64(logits)
    n = logits.size
    return float(-softplus(logits).sum() / n), -sigmoid(logits) / n


def gaussian_nll(mu, raw_logvar, target):
    """Diagonal Gaussian negative log-likelihood, variance = floor + exp(raw)."""
    mu = as_f64(mu)
    raw = as_f64(raw_logvar)
    x = as_f64(target)
    var = VAR_FLOOR + np.exp(raw)
    diff = x - mu
    B = mu.shape[0]
    nll = 0.5 * (np.log(2.0 * np.pi * var) + diff**2 / var)
    d_mu = -diff / var / B
    d_var = 0.5 * (1.0 / var - diff**2 / var**2) / B
    return float(nll.sum() / B), d_mu, d_var * np.exp(raw)


def mdn_nll(pi_logits, mu, raw_logvar, target):
    """Mixture-of-diagonal-Gaussians NLL.

    pi_logits (B,K), mu (B,K,d), raw_logvar (B,K,d), target (B,d).
    Gradients come from the component responsibilities.
    """
    pi_logits = as_f64(pi_logits)
    mu = as_f64(mu)
    raw = as_f64(raw_logvar)
    x = as_f64(target)[:, None, :]
    B, K = pi_logits.shape

    log_pi = pi_logits - _logsumexp(pi_logits, axis=1, keepdims=True)
    var = VAR_FLOOR + np.exp(raw)
    diff = x - mu
    log_comp = -0.5 * (np.log(2.0 * np.pi * var) + diff**2 / var).sum(axis=2)
    joint = log_pi + log_comp
    ll = _logsumexp(joint, axis=1)
    resp = np.exp(joint - ll[:, None])

    p = np.exp(log_pi)
    d_logits = (p - resp) / B
    d_mu = resp[:, :, None] * (mu - x) / var / B
    d_var = resp[:, :, None] * 0.5 * (1.0 / var - diff**2 / var**2) / B
    return float(-ll.sum() / B), d_logits, d_mu, d_var * np.exp(raw)


def _logsumexp(a, axis, keepdims=False):
    m = a.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))
    return out if keepdims else out.reshape([s for i, s in enumerate(a.shape) if i != axis])
