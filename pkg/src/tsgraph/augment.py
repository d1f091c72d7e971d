"""Graph views for contrastive training.

The augmentations act on stacks shaped (..., s, d, d). Each is expressed as a
gather or a multiplication by a constant, so gradients pass through to the
original stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import SeededRng, Tensor


class SimilarityUndefinedError(ValueError):
    pass


class MaskingError(RuntimeError):
    pass


@dataclass
class AugmentConfig:
    shuffle: bool = True
    node_mask_prob: float = 0.1
    edge_perturb_prob: float = 0.1
    jitter: float = 0.1
    n_neg: int = 1

    def __post_init__(self):
        if not 0.0 <= self.node_mask_prob < 1.0:
            raise ValueError("node_mask_prob must lie in [0, 1)")
        if not 0.0 <= self.edge_perturb_prob < 1.0:
            raise ValueError("edge_perturb_prob must lie in [0, 1)")
        if self.jitter < 0 or self.n_neg < 1:
            raise ValueError("jitter must be >= 0 and n_neg >= 1")


def time_shuffle(A, rng: SeededRng):
    """Permute slices along the window axis, independently per leading sample.

    Returns ``(view, perms)`` where ``perms`` has shape (..., s).
    """
    A = T.as_tensor(A)
    s = A.shape[-3]
    lead = A.shape[:-3]
    n = int(np.prod(lead)) if lead else 1
    perms = np.stack([rng.permutation(s) for _ in range(n)]).reshape(lead + (s,))
    if not lead:
        return A[perms], perms
    grids = np.meshgrid(*[np.arange(k) for k in lead], indexing="ij")
    idx = tuple(g[..., None] for g in grids) + (perms,)
    return A[idx], perms


def _draw_node_mask(shape, p, rng):
    keep = (rng.random(shape) >= p).astype(np.float64)
    dead = keep.sum(-1) == 0
    if np.any(dead):
        redraw = (rng.random(shape) >= p).astype(np.float64)
        keep[dead] = redraw[dead]
        if np.any(keep.sum(-1) == 0):
            raise MaskingError("every node was masked twice in a row; lower node_mask_prob")
    return keep


def node_mask(A, p_n: float, rng: SeededRng):
    """Zero row i and column i of every slice for each dropped node i.

    One Bernoulli(p_n) draw per node per sample, shared across the s slices.
    Returns ``(view, keep)`` with ``keep`` shaped (..., d).
    """
    A = T.as_tensor(A)
    if not 0.0 <= p_n < 1.0:
        raise ValueError("p_n must lie in [0, 1)")
    lead, d = A.shape[:-3], A.shape[-1]
    if p_n == 0.0:
        return A, np.ones(lead + (d,))
    keep = _draw_node_mask(lead + (d,), p_n, rng)
    m = keep[..., None, :, None] * keep[..., None, None, :]
    return T.apply_mask(A, m), keep


def edge_perturb(A, p_e: float, sigma_e: float, rng: SeededRng):
    """Select nonzero entries with prob p_e; jitter by N(0, sigma_e*|a|), or zero if sigma_e == 0.

    Unselected entries are multiplied by exactly 1. Returns ``(view, selected)``.
    """
    A = T.as_tensor(A)
    if p_e == 0.0:
        return A, np.zeros(A.shape, bool)
    sel = (rng.random(A.shape) < p_e) & (A.data != 0)
    if sigma_e == 0.0:
        factor = np.where(sel, 0.0, 1.0)
    else:
        noise = rng.normal(A.shape)
        factor = np.where(sel, 1.0 + sigma_e * np.sign(A.data) * noise, 1.0)
    return T.apply_mask(A, factor), sel


def permutation_negative(A, rng: SeededRng) -> Tensor:
    """Relabel nodes by one random permutation applied to rows and columns of every slice."""
    A = T.as_tensor(A)
    perm = rng.permutation(A.shape[-1])
    return A[..., perm, :][..., perm]


def make_negative(A, rng: SeededRng, batch=None, index: int | None = None) -> Tensor:
    """Negative view: another sample's stack when the batch has one, else a node permutation.

    ``batch`` is a sequence of stacks; ``index`` marks the anchor's position in it.
    """
    others = [] if batch is None else [b for i, b in enumerate(batch) if i != index]
    if index is None and batch is not None:
        others = [b for b in batch if b is not A]
    if others:
        return T.as_tensor(others[int(rng.integers(0, len(others)))])
    return permutation_negative(A, rng)


def batch_negatives(G: Tensor, rng: SeededRng, n_neg: int = 1) -> list[Tensor]:
    """In-batch negatives for a batched stack (B, ...): sample b is paired with b + offset."""
    B = G.shape[0]
    if B < 2:
        return [permutation_negative(G, rng) for _ in range(n_neg)]
    offsets = rng.permutation(np.arange(1, B))[:n_neg]
    out = []
    for off in offsets:
        idx = (np.arange(B) + int(off)) % B
        out.append(G[idx])
    while len(out) < n_neg:
        out.append(permutation_negative(G, rng))
    return out


def cosine_sim(A, B) -> Tensor:
    """Cosine of the flattened operands."""
    A, B = T.as_tensor(A), T.as_tensor(B)
    if A.shape != B.shape:
        raise T.DimensionError("cosine_sim", [A.shape, B.shape])
    a, b = T.reshape(A, (-1,)), T.reshape(B, (-1,))
    na, nb = T.l2norm(a), T.l2norm(b)
    if na.data == 0 or nb.data == 0:
        raise SimilarityUndefinedError("cosine similarity of a zero-norm operand")
    return T.sum(a * b) / (na * nb)


def batch_cosine(A, B) -> Tensor:
    """Per-sample cosine over everything but the leading axis. Returns (B,)."""
    A, B = T.as_tensor(A), T.as_tensor(B)
    if A.shape != B.shape:
        raise T.DimensionError("batch_cosine", [A.shape, B.shape])
    n = A.shape[0]
    a, b = T.reshape(A, (n, -1)), T.reshape(B, (n, -1))
    na, nb = T.l2norm(a, axis=1), T.l2norm(b, axis=1)
    if np.any(na.data == 0) or np.any(nb.data == 0):
        raise SimilarityUndefinedError("cosine similarity of a zero-norm operand")
    return T.sum(a * b, axis=1) / (na * nb)


def contrastive_from_sims(pos: Tensor, negs: list[Tensor]) -> Tensor:
    """-mean log(e^pos / (e^pos + sum e^neg)) with similarities as raw logits."""
    denom = T.exp(pos)
    for n in negs:
        denom = denom + T.exp(n)
    return T.mean(T.log(denom) - pos)


def contrastive_loss(anchor, positive, negatives) -> Tensor:
    if len(negatives) < 1:
        raise ValueError("contrastive_loss needs at least one negative")
    pos = cosine_sim(anchor, positive)
    return contrastive_from_sims(pos, [cosine_sim(anchor, n) for n in negatives])


def batch_contrastive_loss(anchor: Tensor, positive: Tensor, negatives: list[Tensor]) -> Tensor:
    if len(negatives) < 1:
        raise ValueError("contrastive_loss needs at least one negative")
    pos = batch_cosine(anchor, positive)
    return contrastive_from_sims(pos, [batch_cosine(anchor, n) for n in negatives])


def augment(A, cfg: AugmentConfig, rng: SeededRng) -> Tensor:
    """Positive view: time shuffle -> node masking -> edge perturbation."""
    view = T.as_tensor(A)
    if cfg.shuffle:
        view, _ = time_shuffle(view, rng)
    view, _ = node_mask(view, cfg.node_mask_prob, rng)
    view, _ = edge_perturb(view, cfg.edge_perturb_prob, cfg.jitter, rng)
    return view
