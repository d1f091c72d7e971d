"""Channel-wise LSTM producing one d x d embedding slice per window."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import SeededRng, Tensor


@dataclass
class LSTMParams:
    """Gate weights stacked in (input, forget, cell, output) order.

    w_x: (n_in, 4h), w_h: (h, 4h), b: (4h,).
    """

    w_x: Tensor
    w_h: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_x": self.w_x, "w_h": self.w_h, "b": self.b}


def init_lstm(n_in: int, hidden: int, rng: SeededRng, forget_bias: float = 0.0) -> LSTMParams:
    bound = 1.0 / math.sqrt(hidden)
    b = rng.uniform(-bound, bound, 4 * hidden)
    b[hidden:2 * hidden] += forget_bias
    return LSTMParams(
        Tensor(rng.uniform(-bound, bound, (n_in, 4 * hidden)), requires_grad=True, name="lstm.w_x"),
        Tensor(rng.uniform(-bound, bound, (hidden, 4 * hidden)), requires_grad=True, name="lstm.w_h"),
        Tensor(b, requires_grad=True, name="lstm.b"),
    )


def lstm_step(x, h, c, params: LSTMParams):
    """One gated step. x: (..., n_in); h, c: (..., hidden)."""
    n = params.hidden
    z = T.matmul(x, params.w_x) + T.matmul(h, params.w_h) + params.b
    i = T.sigmoid(z[..., 0:n])
    f = T.sigmoid(z[..., n:2 * n])
    g = T.tanh(z[..., 2 * n:3 * n])
    o = T.sigmoid(z[..., 3 * n:4 * n])
    c_new = f * c + i * g
    h_new = o * T.tanh(c_new)
    return h_new, c_new


def window_states(X, params: LSTMParams) -> Tensor:
    """Run the LSTM over each feature's full series and keep every hidden state.

    X: (B, d, w, s) or (d, w, s). Every feature is an independent length-l
    sequence through the shared cell; state carries across windows. Output:
    (B, s, d, w, hidden), the hidden trajectory inside each window.
    """
    X = T.as_tensor(X)
    if X.ndim == 3:
        X = T.reshape(X, (1,) + X.shape)
    B, d, w, s = X.shape
    n = params.hidden
    h = Tensor(np.zeros((B, d, n)))
    c = Tensor(np.zeros((B, d, n)))
    windows = []
    for t in range(s):
        steps = []
        for k in range(w):
            x = X[:, :, k:k + 1, t]  # (B, d, 1)
            h, c = lstm_step(x, h, c, params)
            steps.append(h)
        windows.append(T.stack(steps, axis=2))
    return T.stack(windows, axis=1)


def window_features(X, params: LSTMParams) -> Tensor:
    """H_t per window: each feature's hidden trajectory centred over the window's steps.

    Returns (B, s, d, w * hidden).
    """
    traj = window_states(X, params)
    B, s, d, w, n = traj.shape
    centred = traj - T.mean(traj, axis=3, keepdims=True)
    return T.reshape(centred, (B, s, d, w * n))


def embed_windows(X, params: LSTMParams) -> Tensor:
    """E_t = H_t H_t^T / w, a covariance of per-feature hidden trajectories in window t.

    Returns (B, s, d, d), or (s, d, d) for a single sample. Each slice is
    symmetric PSD with trace ||H_t||_F^2 / w.
    """
    X = T.as_tensor(X)
    H = window_features(X, params)
    w = X.shape[-2]
    E = T.matmul(H, T.transpose(H)) * (1.0 / w)
    if X.ndim == 3:
        E = E[0]
    return E


def second_moment_embedding(X) -> Tensor:
    """Parameter-free stand-in used when the LSTM is ablated: X_t X_t^T / w."""
    X = T.as_tensor(X)
    single = X.ndim == 3
    if single:
        X = T.reshape(X, (1,) + X.shape)
    w = X.shape[2]
    Xt = T.permute(X, (0, 3, 1, 2))  # (B, s, d, w)
    E = T.matmul(Xt, T.transpose(Xt)) * (1.0 / w)
    return E[0] if single else E
