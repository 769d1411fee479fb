"""Single-layer LSTM cell with full backpropagation through time."""
from __future__ import annotations

import numpy as np

from .layers import DTYPE, Layer, Parameter, as_f64, sigmoid


class LstmCell(Layer):
    """Standard LSTM cell unrolled over a fixed-length sequence.

    Gate order in the packed weight matrices is (input, forget, cell, output).
    forward_sequence consumes (B, T, n_in) and returns the final hidden state
    (B, hidden); backward_sequence takes dL/dh_final and runs BPTT.
    """

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, name: str = "lstm"):
        self.n_in = n_in
        self.hidden = hidden
        scale = 1.0 / np.sqrt(hidden)
        self.Wx = Parameter(f"{name}.Wx", rng.uniform(-scale, scale, size=(n_in, 4 * hidden)))
        self.Wh = Parameter(f"{name}.Wh", rng.uniform(-scale, scale, size=(hidden, 4 * hidden)))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget-gate bias opens the memory path at init
        self.b = Parameter(f"{name}.b", b)
        self._cache = None

    def params(self) -> list[Parameter]:
        return [self.Wx, self.Wh, self.b]

    def forward_sequence(self, xs: np.ndarray, train: bool = True) -> np.ndarray:
        xs = as_f64(xs)
        B, T, _ = xs.shape
        H = self.hidden
        h = np.zeros((B, H), dtype=DTYPE)
        c = np.zeros((B, H), dtype=DTYPE)
        steps = []
        for t in range(T):
            x = xs[:, t, :]
            z = x @ self.Wx.value + h @ self.Wh.value + self.b.value
            i = sigmoid(z[:, :H])
            f = sigmoid(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = sigmoid(z[:, 3 * H:])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            steps.append((x, h, c, i, f, g, o, tc))
            h, c = h_new, c_new
        self._cache = steps
        return h

    # Layer protocol aliases so optimizers/checkpoints treat this uniformly.
    def forward(self, xs, train=True):
        return self.forward_sequence(xs, train=train)

    def backward(self, grad_out):
        return self.backward_sequence(grad_out)

    def backward_sequence(self, d_h_final: np.ndarray) -> np.ndarray:
        steps = self._cache
        H = self.hidden
        dh = as_f64(d_h_final)
        dc = np.zeros_like(dh)
        d_xs = np.zeros((dh.shape[0], len(steps), self.n_in), dtype=DTYPE)
        for t in range(len(steps) - 1, -1, -1):
            x, h_prev, c_prev, i, f, g, o, tc = steps[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc**2)
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dz = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), dg * (1.0 - g**2), do * o * (1 - o)],
                axis=1,
            )
            self.Wx.grad += x.T @ dz
            self.Wh.grad += h_prev.T @ dz
            self.b.grad += dz.sum(axis=0)
            d_xs[:, t, :] = dz @ self.Wx.value.T
            dh = dz @ self.Wh.value.T
            dc = dc * f
        return d_xs
