"""Minimal float64 neural-network core with hand-written backward passes."""
from .layers import (
    DTYPE,
    BatchNorm,
    Dense,
    Layer,
    MonotonicDense,
    Parameter,
    PerDimMonotonicMlp,
    ReLU,
    Sequential,
    Sigmoid,
    Tanh,
    as_f64,
    hidden_stack,
    mlp,
    sigmoid,
)
from .lstm import LstmCell
from .losses import (
    VAR_FLOOR,
    bce_with_logits,
    gaussian_nll,
    mdn_nll,
    mean_log_one_minus_sigmoid,
    mean_log_sigmoid,
    mse_loss,
    softplus,
)
from .optim import Adam, NonFiniteGradientError, Sgd
from .gradcheck import collect_analytic, max_rel_error
from .checkpoint import (
    Container,
    load_container,
    named_params,
    params_hash,
    restore_params,
    save_container,
)

__all__ = [
    "DTYPE", "BatchNorm", "Dense", "Layer", "MonotonicDense", "Parameter",
    "PerDimMonotonicMlp", "ReLU", "Sequential", "Sigmoid", "Tanh", "as_f64",
    "hidden_stack", "mlp", "sigmoid", "LstmCell", "VAR_FLOOR", "bce_with_logits",
    "gaussian_nll", "mdn_nll", "mean_log_one_minus_sigmoid",
    "mean_log_sigmoid", "mse_loss", "softplus", "Adam",
    "NonFiniteGradientError", "Sgd", "collect_analytic", "max_rel_error",
    "Container", "load_container", "named_params", "params_hash",
    "restore_params", "save_container",
]
