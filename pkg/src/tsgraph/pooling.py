"""CNN temporal graph pooling and the MLP classification head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, SeededRng, Tensor


@dataclass
class PoolLayer:
    W: Tensor  # (n_out, n_in, 1, k)
    b: Tensor  # (n_out,)
    V: Tensor  # (1, k)

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    @property
    def kernel(self) -> int:
        return self.W.shape[3]

    def tensors(self, prefix="pool") -> dict[str, Tensor]:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b, f"{prefix}.V": self.V}


@dataclass
class PooledGraph:
    X: Tensor  # (B, n_out, F, T - k + 1)
    A: Tensor  # (B, s, n_out, n_out)


def pooled_size(n_in: int, ratio: float) -> int:
    return max(1, math.ceil(n_in * ratio))


def init_pool(n_in: int, ratio: float, kernel: int, rng: SeededRng) -> PoolLayer:
    n_out = pooled_size(n_in, ratio)
    if n_out >= n_in:
        raise ContractError(f"pooling must reduce nodes: {n_in} -> {n_out}")
    if kernel < 1:
        raise ContractError("kernel size must be >= 1")
    # V starts at ones so that M begins as the kernel-summed W and M A M^T keeps its scale
    W = T.glorot_uniform(rng, n_in * kernel, n_out * kernel, (n_out, n_in, 1, kernel))
    return PoolLayer(
        Tensor(W, requires_grad=True, name="pool.W"),
        Tensor(np.zeros(n_out), requires_grad=True, name="pool.b"),
        Tensor(np.ones((1, kernel)), requires_grad=True, name="pool.V"),
    )


def pool_features(X_in, layer: PoolLayer) -> Tensor:
    """Nodes are channels; valid cross-correlation along the trailing time axis.

    X_in: (B, n_in, F, T) -> (B, n_out, F, T - k + 1).
    """
    X_in = T.as_tensor(X_in)
    if X_in.ndim != 4 or X_in.shape[1] != layer.n_in:
        raise ContractError(f"pool_features: expected (B, {layer.n_in}, F, T), got {X_in.shape}")
    if X_in.shape[3] < layer.kernel:
        raise ContractError(f"time length {X_in.shape[3]} is shorter than kernel {layer.kernel}")
    return T.xcorr2d(X_in, layer.W, layer.b)


def mixing_matrix(layer: PoolLayer) -> Tensor:
    """M[i, j] = sum_k W[i, j, 0, k] V[0, k]."""
    W2 = T.reshape(layer.W, (layer.n_out, layer.n_in, layer.kernel))
    return T.sum(W2 * T.reshape(layer.V, (1, 1, layer.kernel)), axis=-1)


def pool_adjacency(M, A_in) -> Tensor:
    """M A M^T, batched over leading axes of A_in."""
    M, A_in = T.as_tensor(M), T.as_tensor(A_in)
    if M.shape[1] != A_in.shape[-1] or A_in.shape[-1] != A_in.shape[-2]:
        raise DimensionError("pool_adjacency", [M.shape, A_in.shape])
    return T.matmul(T.matmul(M, A_in), T.transpose(M))


def temporal_pool(A_hat, layers: list[PoolLayer]) -> PooledGraph:
    """Pool a reconstructed stack (B, s, d, d) through each layer in turn.

    Row v of slice t is node v's feature vector at time t, so the input to the
    first layer is (B, d, d, s) with windows as the time axis.
    """
    A_hat = T.as_tensor(A_hat)
    X = T.permute(A_hat, (0, 2, 3, 1))
    A = A_hat
    for layer in layers:
        X = pool_features(X, layer)
        A = pool_adjacency(mixing_matrix(layer), A)
    return PooledGraph(X, A)


@dataclass
class ClassifierHead:
    weights: list[Tensor]
    biases: list[Tensor]

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"head{k}.w"] = w
            out[f"head{k}.b"] = b
        return out


def init_head(n_in: int, widths: list[int], n_out: int, rng: SeededRng) -> ClassifierHead:
    sizes = [n_in, *widths, n_out]
    ws, bs = [], []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        ws.append(Tensor(T.glorot_uniform(rng, a, b, (a, b)), requires_grad=True, name=f"head{k}.w"))
        bs.append(Tensor(np.zeros(b), requires_grad=True, name=f"head{k}.b"))
    return ClassifierHead(ws, bs)


def flatten_pooled(pooled: PooledGraph, use_x: bool = True, use_a: bool = True) -> Tensor:
    parts = []
    if use_x:
        parts.append(T.flatten(pooled.X, 1))
    if use_a:
        parts.append(T.flatten(pooled.A, 1))
    if not parts:
        raise ContractError("classifier input needs pooled features, pooled adjacency, or both")
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)


def classify(features, head: ClassifierHead, dropout: float = 0.0,
             rng: SeededRng | None = None, training: bool = False) -> Tensor:
    """tanh MLP on the flattened input; returns raw logits (B, C).

    Dropout is applied to every hidden activation while training.
    """
    h = T.as_tensor(features)
    if h.shape[-1] != head.weights[0].shape[0]:
        raise ContractError(f"classifier expects {head.weights[0].shape[0]} inputs, got {h.shape[-1]}")
    last = len(head.weights) - 1
    for k, (w, b) in enumerate(zip(head.weights, head.biases)):
        h = T.matmul(h, w) + b
        if k < last:
            h = T.dropout(T.tanh(h), dropout, rng, training)
    return h
