"""Classification, focal, smoothness, structural and combined objectives."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_EPS = 1e-7


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str):
        self.component = component
        super().__init__(f"loss component {component!r} is not finite")


@dataclass
class LossWeights:
    contrast_weight: float = 0.01
    focal_weight: float = 1.0
    reg_weight: float = 0.5
    struct_weight: float = 0.001
    vgae_weight: float = 1.0
    focal_gamma: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


COMPONENTS = ("bce", "contrast", "focal", "reg", "struct", "vgae")
_WEIGHT_OF = {"contrast": "contrast_weight", "focal": "focal_weight", "reg": "reg_weight",
              "struct": "struct_weight", "vgae": "vgae_weight"}


@dataclass
class LossBreakdown:
    bce: Tensor
    contrast: Tensor
    focal: Tensor
    reg: Tensor
    struct: Tensor
    vgae: Tensor
    total: Tensor

    def to_dict(self) -> dict[str, float]:
        return {f.name: float(np.asarray(getattr(self, f.name).data).reshape(-1)[0]) for f in fields(self)}


def _pt(probs, y):
    p = T.clip(T.as_tensor(probs), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    # p_t = p where y = 1, 1 - p where y = 0
    return T.apply_mask(p, 2.0 * y - 1.0) + (1.0 - y)


def bce_loss(probs, y) -> Tensor:
    return T.mean(-T.log(_pt(probs, y)))


def focal_loss(probs, y, gamma: float = 2.0) -> Tensor:
    """Mean over labels (and samples) of -(1 - p_t)^gamma log p_t."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    pt = _pt(probs, y)
    return T.mean(-(T.power(1.0 - pt, gamma) * T.log(pt)))


def reg_loss(H, edges) -> Tensor:
    """Sum over edges (i, j) of ||h_i - h_j||^2.

    ``edges`` is either a 0/1 (..., d, d) mask broadcastable against the node
    axes of ``H`` (..., d, F), or a list of (i, j) pairs for an unbatched H.
    """
    H = T.as_tensor(H)
    d = H.shape[-2]
    if not isinstance(edges, np.ndarray):
        m = np.zeros((d, d))
        for i, j in edges:
            if not (0 <= i < d and 0 <= j < d):
                raise ValueError(f"edge ({i}, {j}) out of range for {d} nodes")
            m[i, j] += 1.0
        edges = m
    mask = np.asarray(edges != 0, dtype=np.float64) if edges.dtype == bool else np.asarray(edges, float)
    sq = T.sum(H * H, axis=-1)
    gram = T.matmul(H, T.transpose(H))
    dist = T.reshape(sq, sq.shape + (1,)) + T.reshape(sq, sq.shape[:-1] + (1, d)) - 2.0 * gram
    return T.sum(T.apply_mask(dist, mask))


def _cos_rows(a: Tensor, b: Tensor) -> Tensor:
    return T.sum(a * b, axis=-1) / (T.l2norm(a, axis=-1) * T.l2norm(b, axis=-1))


def structural_loss(A, other=None) -> Tensor:
    """Mean of 1 - cos(A_t, A_{t+1}) over consecutive slices of A (s, d, d).

    With ``other`` the pairs are (A_t, other_t) instead. Pairs containing a
    zero-norm slice are skipped with a warning.
    """
    A = T.as_tensor(A)
    s = A.shape[-3]
    flat = T.reshape(A, A.shape[:-2] + (-1,))
    if other is None:
        if s < 2:
            return Tensor(0.0)
        a, b = flat[..., :-1, :], flat[..., 1:, :]
    else:
        other = T.as_tensor(other)
        a, b = flat, T.reshape(other, other.shape[:-2] + (-1,))
        if a.shape != b.shape:
            a = a + Tensor(np.zeros(b.shape))
    na = np.linalg.norm(a.data, axis=-1)
    nb = np.linalg.norm(b.data, axis=-1)
    ok = (na > 0) & (nb > 0)
    if not np.all(ok):
        warnings.warn(f"structural_loss: skipped {int((~ok).sum())} zero-norm slice pair(s)")
        if not np.any(ok):
            return Tensor(0.0)
        safe = np.where(ok, 1.0, 0.0)[..., None]
        a = T.apply_mask(a, safe) + (1.0 - safe)
        b = T.apply_mask(b, safe) + (1.0 - safe)
    cos = _cos_rows(a, b)
    return T.sum(T.apply_mask(1.0 - cos, ok.astype(float))) / float(ok.sum())


def total_loss(components: dict, weights: LossWeights) -> LossBreakdown:
    """bce + contrast_w*contrast + focal_w*focal + reg_w*reg + struct_w*struct + vgae_w*vgae.

    Missing components count as zero.
    """
    parts = {}
    for name in COMPONENTS:
        val = components.get(name)
        val = Tensor(0.0) if val is None else T.as_tensor(val)
        if not np.all(np.isfinite(val.data)):
            raise NonFiniteLossError(name)
        parts[name] = val
    total = parts["bce"]
    for name, wname in _WEIGHT_OF.items():
        w = getattr(weights, wname)
        if w != 0.0:
            total = total + parts[name] * w
    if not np.all(np.isfinite(total.data)):
        raise NonFiniteLossError("total")
    return LossBreakdown(total=total, **parts)
