"""Fusion of adjacency, interpretability and embedding stacks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor


@dataclass
class AssembledGraph:
    G: Tensor
    mode: str = "hadamard"
    sources: dict = field(default_factory=dict)


def assemble(A, I, E, mode: str = "hadamard") -> AssembledGraph:
    """G_t = A_t * I_t + E_t, or concatenation [A | I | E] along the feature axis.

    ``A`` and ``I`` may be cohort-shared (s, d, d) while ``E`` carries a batch
    axis; shared stacks broadcast over it.
    """
    A, I, E = T.as_tensor(A), T.as_tensor(I), T.as_tensor(E)
    tails = {A.shape[-3:], I.shape[-3:], E.shape[-3:]}
    if len(tails) != 1 or A.ndim < 3:
        raise ContractError(f"assemble: shapes differ {A.shape}, {I.shape}, {E.shape}")
    if mode == "hadamard":
        G = A * I + E
    elif mode == "concat":
        lead = E.shape[:-3] if E.ndim > A.ndim else A.shape[:-3]
        parts = [_expand(x, lead) for x in (A, I, E)]
        G = T.concat(parts, axis=-1)
    else:
        raise ContractError(f"unknown assemble mode {mode!r}")
    return AssembledGraph(G, mode, {"A": A.shape, "I": I.shape, "E": E.shape})


def _expand(x: Tensor, lead: tuple) -> Tensor:
    if x.shape[:-3] == lead:
        return x
    return x + Tensor(np.zeros(lead + x.shape[-3:]))
