import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tsgraph import tensor as T
from tsgraph.graph import topk_mask
from tsgraph.tensor import ContractError, DimensionError, DomainError, EvaluationError, SeededRng, Tape, Tensor

from _catalog import CATALOG, OP_NAMES


@pytest.mark.parametrize("name,make", CATALOG, ids=[c[0] for c in CATALOG])
def test_catalog_grad_check(name, make):
    for seed in range(10):
        x0, f = make(np.random.default_rng(seed))
        assert T.grad_check(f, x0, eps=1e-5) <= 1e-4


def test_catalog_covers_every_dispatchable_op():
    assert set(T._CATALOG) <= set(OP_NAMES)


def test_matmul_identity():
    M = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(T.matmul(np.eye(3), M).data, M)


def test_sigmoid_zero():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_sigmoid_extremes_are_finite():
    out = T.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0 and out[1] == 1.0


def test_outer_hand_case():
    np.testing.assert_array_equal(T.outer([1.0, 2.0], [3.0, 4.0]).data, [[3, 4], [6, 8]])


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = x * x
    assert T.backward(tape, y)[x.node_id] == pytest.approx(6.0)


def test_backward_hadamard_square():
    A = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(A * A)
    np.testing.assert_array_equal(T.backward(tape, loss)[A.node_id], [[2, 4], [6, 8]])


def test_unused_leaf_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([5.0, 6.0, 7.0], requires_grad=True)
    with Tape() as tape:
        tape.watch(unused)
        loss = T.sum(x)
    g = T.backward(tape, loss)
    np.testing.assert_array_equal(g[unused.node_id], np.zeros(3))
    np.testing.assert_array_equal(tape.grad(g, Tensor([1.0])), [0.0])


def test_grad_check_of_sum_is_exact():
    x = np.random.default_rng(0).normal(size=6)
    assert T.grad_check(T.sum, x) < 1e-9


def test_grad_check_sigmoid_sum():
    x = np.random.default_rng(1).normal(size=4)
    assert T.grad_check(lambda v: T.sum(T.sigmoid(v)), x, eps=1e-5) < 1e-6


def test_grad_check_with_fixed_topk_mask():
    rng = np.random.default_rng(2)
    A0 = rng.normal(size=(5, 5))
    mask = topk_mask(A0, 2)
    R = rng.normal(size=(5, 5))
    assert T.grad_check(lambda a: T.sum(T.apply_mask(a, mask) * R), A0) < 1e-4


def test_shape_mismatch_is_structured():
    with pytest.raises(DimensionError) as exc:
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert exc.value.op == "matmul"
    assert exc.value.shapes == [(2, 3), (2, 3)]
    with pytest.raises(DimensionError):
        T.add(np.ones((2, 3)), np.ones((4,)))


def test_log_domain_error_names_op():
    with pytest.raises(DomainError) as exc:
        T.log(Tensor([1.0, 0.0]))
    assert exc.value.op == "log"


def test_nonscalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        T.backward(tape, y)


def test_grad_check_eps_range_and_nonfinite():
    with pytest.raises(ValueError):
        T.grad_check(T.sum, np.ones(2), eps=1e-2)
    with pytest.raises(EvaluationError):
        T.grad_check(lambda v: T.sum(v) * np.inf, np.ones(2))


def test_unknown_op_contract_error():
    with pytest.raises(ContractError):
        T.forward_op("conv3d", Tensor(1.0))
    assert T.forward_op("add", Tensor(1.0), Tensor(2.0)).item() == 3.0


def test_backward_is_linear():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(3, 3))
    a, b = 1.7, -0.4

    def grads(fn):
        x = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            out = fn(x)
        return T.backward(tape, out)[x.node_id]

    f = lambda x: T.sum(T.tanh(x))
    g = lambda x: T.sum(T.matmul(x, x))
    combined = grads(lambda x: f(x) * a + g(x) * b)
    np.testing.assert_allclose(combined, a * grads(f) + b * grads(g), rtol=1e-12, atol=1e-12)


def test_replay_is_bit_identical():
    def run(seed):
        rng = SeededRng(seed)
        x = Tensor(rng.normal((4, 5)), requires_grad=True)
        with Tape() as tape:
            y = T.sum(T.dropout(T.tanh(x), 0.5, rng.split(), True) ** 2)
        return y.data.copy(), T.backward(tape, y)[x.node_id]
    (y1, g1), (y2, g2) = run(11), run(11)
    assert y1.tobytes() == y2.tobytes() and g1.tobytes() == g2.tobytes()


def test_seeded_rng_split_and_state():
    a, b = SeededRng(5), SeededRng(5)
    np.testing.assert_array_equal(a.split().normal(3), b.split().normal(3))
    r = SeededRng(9)
    r.normal(4)
    state = r.get_state()
    clone = SeededRng.from_state(state)
    np.testing.assert_array_equal(r.normal(5), clone.normal(5))


def test_dropout_identity_in_eval_and_inverted_scaling():
    x = Tensor(np.ones((200, 50)))
    assert T.dropout(x, 0.4, None, training=False) is x
    out = T.dropout(x, 0.4, SeededRng(0), training=True).data
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.6}
    assert abs(out.mean() - 1.0) < 0.05


def test_xcorr2d_matches_direct_loop():
    rng = np.random.default_rng(4)
    x, w, b = rng.normal(size=(2, 3, 2, 6)), rng.normal(size=(4, 3, 1, 3)), rng.normal(size=4)
    out = T.xcorr2d(x, w, b).data
    ref = np.zeros((2, 4, 2, 4))
    for n in range(2):
        for o in range(4):
            for i in range(2):
                for j in range(4):
                    ref[n, o, i, j] = b[o] + sum(w[o, c, 0, q] * x[n, c, i, j + q]
                                                 for c in range(3) for q in range(3))
    np.testing.assert_allclose(out, ref, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-5, 5, allow_nan=False)))
def test_property_tanh_gradient_bounded(x0):
    x = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        y = T.sum(T.tanh(x))
    g = T.backward(tape, y)[x.node_id]
    assert np.all((g > 0) & (g <= 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10 ** 6))
def test_property_matmul_grad_shapes(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(n, k)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, k, m)), requires_grad=True)
    with Tape() as tape:
        y = T.sum(T.matmul(a, b))
    g = T.backward(tape, y)
    assert g[a.node_id].shape == (n, k) and g[b.node_id].shape == (2, k, m)
    np.testing.assert_allclose(g[a.node_id], np.ones((n, m)) @ b.data.sum(0).T, atol=1e-12)
