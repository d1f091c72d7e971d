import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsgraph import tensor as T
from tsgraph.graph import (NodeEmbeddings, build_adjacency, build_stack, carry_matrix, default_k,
                           init_embeddings, propagate, sparsify_topk, topk_mask)
from tsgraph.tensor import DimensionError, Tape, Tensor


def brute_topk(A, k):
    """Per-row enumeration: repeatedly take the largest remaining off-diagonal entry, lowest column on ties."""
    d = A.shape[0]
    out = np.zeros_like(A)
    for i in range(d):
        cand = [j for j in range(d) if j != i]
        for _ in range(k):
            best = cand[0]
            for j in cand[1:]:
                if A[i, j] > A[i, best]:
                    best = j
            out[i, best] = A[i, best]
            cand.remove(best)
    return out


def test_init_shapes_bounds_determinism():
    e1, e2 = init_embeddings(8, 6, 42), init_embeddings(8, 6, 42)
    assert e1.theta.shape == (6, 8) and e1.psi.shape == (6, 8)
    np.testing.assert_array_equal(e1.theta.data, e2.theta.data)
    bound = 1 / math.sqrt(8)
    assert np.all(np.abs(e1.theta.data) <= bound) and np.all(np.abs(e1.psi.data) <= bound)
    with pytest.raises(ValueError):
        init_embeddings(1, 6, 0)


def test_build_adjacency_hand_case():
    np.testing.assert_array_equal(build_adjacency([1.0, 2.0], [3.0, 4.0]).data, [[3, 4], [6, 8]])
    assert not build_adjacency([1.0, 2.0], [0.0, 0.0]).data.any()
    with pytest.raises(DimensionError):
        build_adjacency([1.0, 2.0], [1.0, 2.0, 3.0])


def test_adjacency_is_rank_one():
    rng = np.random.default_rng(0)
    A = build_adjacency(rng.normal(size=5), rng.normal(size=5)).data
    assert np.linalg.matrix_rank(A) == 1


def test_sparsify_hand_case_and_ties():
    A = np.array([[0, 5, 1], [2, 0, 9], [4, 3, 0]], float)
    np.testing.assert_array_equal(sparsify_topk(A, 1).data, [[0, 5, 0], [0, 0, 9], [4, 0, 0]])
    tied = np.array([[0, 7, 7], [1, 0, 2], [3, 1, 0]], float)
    assert sparsify_topk(tied, 1).data[0].tolist() == [0, 7, 0]


def test_sparsify_k_dminus1_only_zeroes_diagonal():
    A = np.random.default_rng(1).uniform(1, 2, (4, 4))
    out = sparsify_topk(A, 3).data
    np.testing.assert_array_equal(out, A * (1 - np.eye(4)))


def test_sparsify_k_out_of_range():
    for k in (0, 4):
        with pytest.raises(ValueError):
            sparsify_topk(np.ones((4, 4)), k)


def test_sparsify_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(200):
        A = rng.normal(size=(8, 8))
        if rng.random() < 0.3:
            A = np.round(A)  # exercise ties
        k = int(rng.integers(1, 8))
        np.testing.assert_array_equal(sparsify_topk(A, k).data, brute_topk(A, k))


def test_propagate_examples():
    th = Tensor([[1.0, 0.0], [0.0, 1.0]])
    emb = NodeEmbeddings(th, Tensor(np.zeros((2, 2))))
    assert propagate(emb, 0.0) is emb
    np.testing.assert_allclose(propagate(emb, 0.5).theta.data[1], [0.5, 1.0])
    same = NodeEmbeddings(Tensor(np.tile([1.0, 2.0], (4, 1))), Tensor(np.ones((4, 2))))
    eff = propagate(same, 0.5).theta.data
    for t in range(4):
        np.testing.assert_allclose(eff[t], np.array([1.0, 2.0]) * sum(0.5 ** i for i in range(t + 1)))
    with pytest.raises(ValueError):
        propagate(emb, 1.0)


def test_carry_matrix_is_lower_triangular():
    L = carry_matrix(4, 0.5)
    assert np.all(np.triu(L, 1) == 0) and np.all(np.diag(L) == 1)


def test_build_stack_structure_and_rho_zero():
    emb = init_embeddings(2, 3, 0)
    A = build_stack(emb, 1, 0.5).data
    assert A.shape == (3, 2, 2)
    assert np.all(np.diagonal(A, axis1=1, axis2=2) == 0)
    assert np.all((A != 0).sum(-1) <= 1)
    emb = init_embeddings(6, 4, 1)
    A0 = build_stack(emb, 3, 0.0).data
    for t in range(4):
        np.testing.assert_array_equal(A0[t], sparsify_topk(build_adjacency(emb.theta.data[t], emb.psi.data[t]), 3).data)


def test_build_stack_grad_check():
    emb = init_embeddings(6, 4, 3)
    psi = emb.psi.data
    R = np.random.default_rng(3).normal(size=(4, 6, 6))
    f = lambda th: T.sum(build_stack(NodeEmbeddings(th, Tensor(psi)), 3, 0.5) * R)
    assert T.grad_check(f, emb.theta.data) < 1e-4


def test_build_stack_causality():
    emb = init_embeddings(5, 4, 4)
    with Tape() as tape:
        th = tape.watch(Tensor(emb.theta.data))
        A = build_stack(NodeEmbeddings(th, Tensor(emb.psi.data)), 2, 0.5)
        loss = T.sum(A[1] * A[1])
    g = T.backward(tape, loss)[th.node_id]
    assert not g[2:].any()
    assert g[:2].any()


def test_default_k():
    assert default_k(8) == 4 and default_k(2) == 1 and default_k(7) == 4


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 7), st.integers(1, 3), st.integers(0, 10 ** 6))
def test_property_nnz_and_permutation_equivariance(d, s, seed):
    rng = np.random.default_rng(seed)
    emb = NodeEmbeddings(Tensor(rng.normal(size=(s, d))), Tensor(rng.normal(size=(s, d))))
    k = int(rng.integers(1, d))
    A = build_stack(emb, k, 0.5).data
    assert np.all((A != 0).sum(-1) <= k)
    assert np.all(np.diagonal(A, axis1=-2, axis2=-1) == 0)
    perm = rng.permutation(d)
    Ap = build_stack(NodeEmbeddings(Tensor(emb.theta.data[:, perm]), Tensor(emb.psi.data[:, perm])), k, 0.5).data
    # equivariance holds away from ties in the row ranking
    ranks_unique = all(len(set(np.round(row, 12))) == d for sl in build_adjacency(
        propagate(emb, 0.5).theta, propagate(emb, 0.5).psi).data for row in sl)
    if ranks_unique:
        np.testing.assert_allclose(Ap, A[:, perm][:, :, perm], atol=1e-12)
