import numpy as np
import pytest

from tsgraph import tensor as T
from tsgraph.assemble import assemble
from tsgraph.tensor import ContractError


def test_identity_coupling_and_zero_adjacency():
    rng = np.random.default_rng(0)
    A, E = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    np.testing.assert_array_equal(assemble(A, np.ones_like(A), np.zeros_like(A)).G.data, A)
    np.testing.assert_array_equal(assemble(np.zeros_like(A), rng.normal(size=A.shape), E).G.data, E)


def test_hand_case():
    A = np.array([[[0, 1], [2, 0]]], float)
    I = np.array([[[1, 2], [3, 1]]], float)
    E = np.ones((1, 2, 2))
    np.testing.assert_array_equal(assemble(A, I, E).G.data, [[[1, 3], [7, 1]]])


def test_linearity():
    rng = np.random.default_rng(1)
    A1, A2, I, E1, E2 = (rng.normal(size=(2, 3, 3)) for _ in range(5))
    g = lambda A, E: assemble(A, I, E).G.data
    c = 2.5
    np.testing.assert_allclose(g(A1 + c * A2, E1 + c * E2), g(A1, E1) + c * g(A2, E2), atol=1e-12)


def test_shared_stacks_broadcast_over_batch():
    rng = np.random.default_rng(2)
    A, I, E = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4)), rng.normal(size=(5, 3, 4, 4))
    G = assemble(A, I, E).G.data
    assert G.shape == (5, 3, 4, 4)
    np.testing.assert_allclose(G[2], A * I + E[2])


def test_concat_mode_shape():
    rng = np.random.default_rng(3)
    A, I, E = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    G = assemble(A, I, E, "concat").G.data
    assert G.shape == (2, 3, 4, 12)
    np.testing.assert_array_equal(G[1, :, :, 8:], E[1])
    np.testing.assert_array_equal(G[0, :, :, :4], A)


def test_errors():
    with pytest.raises(ContractError):
        assemble(np.ones((2, 3, 3)), np.ones((2, 3, 3)), np.ones((2, 4, 4)))
    with pytest.raises(ContractError):
        assemble(np.ones((2, 3, 3)), np.ones((2, 3, 3)), np.ones((2, 3, 3)), "sum")


@pytest.mark.parametrize("which", [0, 1, 2])
def test_gradients_reach_every_constituent(which):
    rng = np.random.default_rng(4 + which)
    parts = [rng.normal(size=(2, 3, 3)) for _ in range(3)]
    R = rng.normal(size=(2, 3, 3))

    def f(x):
        args = list(parts)
        args[which] = x
        return T.sum(assemble(*args).G * R)
    assert T.grad_check(f, parts[which]) < 1e-4
