"""Counterfactual data augmentation for batch RL on structural causal models."""

__version__ = "0.1.0"

from . import augment, baselines, cluster, config, env, experiments, policy, scm, scm_train  # noqa: F401
