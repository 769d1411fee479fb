"""Differentiable layers with hand-written backward passes.

Everything is float64 and numpy-only. There is no autograd graph: each layer
caches what its backward pass needs during forward, and containers call
backward in reverse order. Gradients accumulate into Parameter.grad so a
tensor feeding several consumers sums its gradient contributions.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


class Parameter:
    """Named trainable tensor with an accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = as_f64(value)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover
        return f"Parameter({self.name}, shape={self.value.shape})"


class Layer:
    """Base layer: forward(x, train) -> y, backward(dy) -> dx."""

    def params(self) -> list[Parameter]:
        return []

    def buffers(self) -> list[tuple[str, str, "Layer"]]:
        """Non-trainable state as (full_name, attribute, owner) triples."""
        return []

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()


class Dense(Layer):
    """Affine map y = x @ W + b."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "dense"):
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.W = Parameter(f"{name}.W", rng.uniform(-limit, limit, size=(n_in, n_out)))
        self.b = Parameter(f"{name}.b", np.zeros(n_out))
        self._x = None

    def params(self) -> list[Parameter]:
        return [self.W, self.b]

    def forward(self, x, train=True):
        x = as_f64(x)
        self._x = x
        return x @ self.W.value + self.b.value

    def backward(self, grad_out):
        g = as_f64(grad_out)
        self.W.grad += self._x.T @ g
        self.b.grad += g.sum(axis=0)
        return g @ self.W.value.T


class MonotonicDense(Layer):
    """Affine map with strictly positive weights, W = exp(raw) elementwise.

    Positivity makes the layer monotone non-decreasing in every input; a stack
    of these with strictly increasing activations is strictly increasing.
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "mono"):
        raw = rng.normal(np.log(0.5 / max(1.0, np.sqrt(n_in))), 0.3, size=(n_in, n_out))
        self.raw = Parameter(f"{name}.raw_weights", raw)
        self.b = Parameter(f"{name}.b", np.zeros(n_out))
        self._x = None
        self._W = None

    def params(self) -> list[Parameter]:
        return [self.raw, self.b]

    def forward(self, x, train=True):
        x = as_f64(x)
        self._x = x
        self._W = np.exp(self.raw.value)
        return x @ self._W + self.b.value

    def backward(self, grad_out):
        g = as_f64(grad_out)
        self.raw.grad += (self._x.T @ g) * self._W
        self.b.grad += g.sum(axis=0)
        return g @ self._W.T


class BatchNorm(Layer):
    """Batch normalization over axis 0.

    train=True normalizes with batch statistics and updates running averages
    (momentum 0.9); train=False applies the deterministic affine map from the
    running statistics, so inference works for any batch size including 1.
    """

    def __init__(self, n: int, name: str = "bn", momentum: float = 0.9, eps: float = 1e-5,
                 affine: bool = True):
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(n))
        self.beta = Parameter(f"{name}.beta", np.zeros(n))
        self.affine = affine
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(n, dtype=DTYPE)
        self.running_var = np.ones(n, dtype=DTYPE)
        self._cache = None

    def params(self) -> list[Parameter]:
        # non-affine instances keep gamma/beta frozen at identity
        return [self.gamma, self.beta] if self.affine else []

    def buffers(self):
        return [(f"{self.name}.running_mean", "running_mean", self),
                (f"{self.name}.running_var", "running_var", self)]

    def forward(self, x, train=True):
        x = as_f64(x)
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, train, x.shape[0])
        return self.gamma.value * xhat + self.beta.value

    def backward(self, grad_out):
        g = as_f64(grad_out)
        xhat, inv_std, train, B = self._cache
        self.gamma.grad += (g * xhat).sum(axis=0)
        self.beta.grad += g.sum(axis=0)
        dxhat = g * self.gamma.value
        if not train:
            return dxhat * inv_std
        # batch statistics couple every row of the batch
        return (inv_std / B) * (B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x, train=True):
        x = as_f64(x)
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out):
        return as_f64(grad_out) * self._mask


class Tanh(Layer):
    def __init__(self):
        self._y = None

    def forward(self, x, train=True):
        self._y = np.tanh(as_f64(x))
        return self._y

    def backward(self, grad_out):
        return as_f64(grad_out) * (1.0 - self._y**2)


class Sigmoid(Layer):
    def __init__(self):
        self._y = None

    def forward(self, x, train=True):
        self._y = sigmoid(as_f64(x))
        return self._y

    def backward(self, grad_out):
        return as_f64(grad_out) * self._y * (1.0 - self._y)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def params(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def buffers(self):
        out = []
        for layer in self.layers:
            out.extend(layer.buffers())
        return out

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out


def hidden_stack(n_in: int, widths: tuple[int, ...], rng: np.random.Generator,
                 name: str = "stack", batchnorm: bool = True) -> Sequential:
    """Dense -> [BatchNorm] -> ReLU blocks without an output head."""
    layers: list[Layer] = []
    prev = n_in
    for i, w in enumerate(widths):
        layers.append(Dense(prev, w, rng, name=f"{name}.h{i}"))
        if batchnorm:
            layers.append(BatchNorm(w, name=f"{name}.bn{i}"))
        layers.append(ReLU())
        prev = w
    return Sequential(layers)


def mlp(n_in: int, widths: tuple[int, ...], n_out: int, rng: np.random.Generator,
        name: str = "mlp", batchnorm: bool = True) -> Sequential:
    """Dense -> [BatchNorm] -> ReLU stack with a linear output head."""
    stack = hidden_stack(n_in, widths, rng, name=name, batchnorm=batchnorm)
    prev = widths[-1] if widths else n_in
    return Sequential(stack.layers + [Dense(prev, n_out, rng, name=f"{name}.out")])


class PerDimMonotonicMlp(Layer):
    """Independent strictly increasing scalar map per coordinate.

    m_j(u_j) = sum_h V_jh * tanh(W_jh * u_j + b_jh) + S_j * u_j + c_j with
    V, W, S all parametrized as exp(raw), so dm_j/du_j >= S_j > 0 everywhere.
    The linear skip term keeps the map unbounded, which guarantees a bisection
    bracket exists for any target value. Output dim j depends on u_j only.
    """

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, name: str = "monopath"):
        self.dim = dim
        self.hidden = hidden
        self.raw_w = Parameter(f"{name}.raw_w", rng.normal(0.0, 0.4, size=(dim, hidden)))
        self.b = Parameter(f"{name}.b", rng.normal(0.0, 1.0, size=(dim, hidden)))
        self.raw_v = Parameter(f"{name}.raw_v", rng.normal(np.log(1.0 / hidden), 0.3, size=(dim, hidden)))
        self.raw_s = Parameter(f"{name}.raw_s", np.full(dim, np.log(0.5)))
        self.c = Parameter(f"{name}.c", np.zeros(dim))
        self._cache = None

    def params(self) -> list[Parameter]:
        return [self.raw_w, self.b, self.raw_v, self.raw_s, self.c]

    def forward(self, u, train=True):
        u = as_f64(u)
        W = np.exp(self.raw_w.value)
        V = np.exp(self.raw_v.value)
        S = np.exp(self.raw_s.value)
        t = np.tanh(u[:, :, None] * W[None, :, :] + self.b.value[None, :, :])
        y = (t * V[None, :, :]).sum(axis=2) + S * u + self.c.value
        self._cache = (u, W, V, S, t)
        return y

    def backward(self, grad_out):
        g = as_f64(grad_out)
        u, W, V, S, t = self._cache
        sech2 = 1.0 - t**2
        g3 = g[:, :, None]
        self.raw_v.grad += (g3 * t).sum(axis=0) * V
        dpre = g3 * V[None, :, :] * sech2
        self.raw_w.grad += (dpre * u[:, :, None]).sum(axis=0) * W
        self.b.grad += dpre.sum(axis=0)
        self.raw_s.grad += (g * u).sum(axis=0) * S
        self.c.grad += g.sum(axis=0)
        return (dpre * W[None, :, :]).sum(axis=2) + g * S

    def derivative(self, u: np.ndarray) -> np.ndarray:
        """dm_j/du_j, strictly positive everywhere."""
        u = as_f64(u)
        W = np.exp(self.raw_w.value)
        V = np.exp(self.raw_v.value)
        S = np.exp(self.raw_s.value)
        t = np.tanh(u[:, :, None] * W[None, :, :] + self.b.value[None, :, :])
        return ((1.0 - t**2) * V[None, :, :] * W[None, :, :]).sum(axis=2) + S
