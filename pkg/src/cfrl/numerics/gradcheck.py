"""Central finite-difference verification of hand-written backward passes."""
from __future__ import annotations

from collections.abc import Callable

import numpy as np

from .layers import Parameter


def max_rel_error(loss_fn: Callable[[], float], params: list[Parameter],
                  analytic: dict[str, np.ndarray], h: float = 1e-5,
                  max_entries: int | None = None,
                  rng: np.random.Generator | None = None) -> float:
    """Worst relative error between analytic gradients and central differences.

    loss_fn must re-evaluate the loss from current parameter values; analytic
    maps parameter name to the gradient being verified. Checks every entry
    unless max_entries caps the per-parameter sample (seeded rng required then).
    """
    worst = 0.0
    for p in params:
        a = analytic[p.name]
        flat = p.value.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idx = rng.choice(n, size=max_entries, replace=False)
        else:
            idx = np.arange(n)
        a_flat = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            scale = max(abs(a_flat[i]) + abs(numeric), 1e-6)
            worst = max(worst, abs(a_flat[i] - numeric) / scale)
    return worst


def collect_analytic(params: list[Parameter]) -> dict[str, np.ndarray]:
    """Snapshot accumulated gradients by parameter name."""
    return {p.name: p.grad.copy() for p in params}
