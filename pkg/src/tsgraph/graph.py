"""Learnable per-window adjacency stacks from source/target node embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, SeededRng, Tensor


@dataclass
class NodeEmbeddings:
    theta: Tensor  # (s, d) source
    psi: Tensor    # (s, d) target


def init_embeddings(d: int, s: int, seed: int | SeededRng) -> NodeEmbeddings:
    if d < 2 or s < 1:
        raise ValueError(f"need d >= 2 and s >= 1, got d={d}, s={s}")
    rng = seed if isinstance(seed, SeededRng) else SeededRng(seed)
    bound = 1.0 / math.sqrt(d)
    theta = Tensor(rng.uniform(-bound, bound, (s, d)), requires_grad=True, name="theta")
    psi = Tensor(rng.uniform(-bound, bound, (s, d)), requires_grad=True, name="psi")
    return NodeEmbeddings(theta, psi)


def build_adjacency(theta_t, psi_t) -> Tensor:
    """A[i, j] = theta[i] * psi[j]; batched over leading axes."""
    theta_t, psi_t = T.as_tensor(theta_t), T.as_tensor(psi_t)
    if theta_t.shape != psi_t.shape:
        raise DimensionError("build_adjacency", [theta_t.shape, psi_t.shape])
    return T.outer(theta_t, psi_t)


def topk_mask(A: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask keeping the k largest off-diagonal entries per row.

    Ties go to the lowest column index. Works on (..., d, d).
    """
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[-1]
    if not 1 <= k <= d - 1:
        raise ValueError(f"k must lie in [1, {d - 1}], got {k}")
    scores = A.copy()
    idx = np.arange(d)
    scores[..., idx, idx] = -np.inf
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    mask = np.zeros_like(A)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


def sparsify_topk(A_t, k: int) -> Tensor:
    """Zero the diagonal and all but the k largest entries of each row.

    The mask is a constant of the step: gradients reach retained entries only.
    """
    A_t = T.as_tensor(A_t)
    return T.apply_mask(A_t, topk_mask(A_t.data, k))


def carry_matrix(s: int, rho: float) -> np.ndarray:
    """Lower-triangular L with L[t, u] = rho**(t-u), so eff = L @ raw."""
    t = np.arange(s)
    expo = t[:, None] - t[None, :]
    return np.where(expo >= 0, float(rho) ** np.maximum(expo, 0), 0.0)


def propagate(emb: NodeEmbeddings, rho: float) -> NodeEmbeddings:
    """Causal carry: eff_t = raw_t + rho * eff_{t-1}."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    s = emb.theta.shape[0]
    if rho == 0.0:
        return emb
    L = Tensor(carry_matrix(s, rho))
    return NodeEmbeddings(T.matmul(L, emb.theta), T.matmul(L, emb.psi))


def build_stack(emb: NodeEmbeddings, k: int, rho: float) -> Tensor:
    """Propagate, build each slice, sparsify. Returns A of shape (s, d, d)."""
    eff = propagate(emb, rho)
    return sparsify_topk(build_adjacency(eff.theta, eff.psi), k)


def default_k(d: int) -> int:
    return min(max(1, math.ceil(d / 2)), d - 1)
