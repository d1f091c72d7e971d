import math

import numpy as np
import pytest

from tsgraph import tensor as T
from tsgraph.augment import (AugmentConfig, MaskingError, SimilarityUndefinedError, augment, batch_contrastive_loss,
                             batch_negatives, contrastive_from_sims, contrastive_loss, cosine_sim, edge_perturb,
                             make_negative, node_mask, permutation_negative, time_shuffle)
from tsgraph.tensor import SeededRng, Tensor


def stack(seed=0, s=4, d=5):
    return np.random.default_rng(seed).normal(size=(s, d, d))


def test_time_shuffle_single_slice_identity():
    A = stack(s=1)
    view, perm = time_shuffle(A, SeededRng(0))
    np.testing.assert_array_equal(view.data, A)
    assert perm.tolist() == [0]


def test_time_shuffle_preserves_slice_multiset_and_is_seeded():
    A = stack(1, s=6)
    view, perm = time_shuffle(A, SeededRng(3))
    norms = lambda X: sorted(np.linalg.norm(X.reshape(X.shape[0], -1), axis=1))
    np.testing.assert_allclose(norms(view.data), norms(A))
    np.testing.assert_array_equal(view.data, A[perm])
    _, perm2 = time_shuffle(A, SeededRng(3))
    np.testing.assert_array_equal(perm, perm2)


def test_time_shuffle_batched_independent_per_sample():
    A = np.random.default_rng(2).normal(size=(8, 5, 3, 3))
    view, perms = time_shuffle(A, SeededRng(4))
    for b in range(8):
        np.testing.assert_array_equal(view.data[b], A[b][perms[b]])
    assert len({tuple(p) for p in perms}) > 1


def test_node_mask_examples():
    A = np.array([[[0.0, 1.0], [2.0, 0.0]]])
    view, keep = node_mask(A, 0.0, SeededRng(0))
    np.testing.assert_array_equal(view.data, A)
    m = np.array([0.0, 1.0])
    masked = T.apply_mask(A, m[None, :, None] * m[None, None, :]).data
    np.testing.assert_array_equal(masked, np.zeros((1, 2, 2)))


def test_node_mask_zeroes_rows_and_columns():
    A = np.abs(stack(5)) + 0.1
    view, keep = node_mask(A, 0.4, SeededRng(9))
    for i in np.flatnonzero(keep == 0):
        assert not view.data[:, i, :].any() and not view.data[:, :, i].any()
    for i in np.flatnonzero(keep == 1):
        np.testing.assert_array_equal(view.data[:, i, keep == 1], A[:, i, keep == 1])


def test_node_mask_fraction_monte_carlo():
    A = np.ones((1, 10, 10))
    frac = np.mean([1 - node_mask(A, 0.3, SeededRng(s))[1].mean() for s in range(1000)])
    assert abs(frac - 0.3) < 0.03


def test_node_mask_errors():
    with pytest.raises(ValueError):
        node_mask(np.ones((1, 2, 2)), 1.0, SeededRng(0))
    with pytest.raises(MaskingError):
        node_mask(np.ones((1, 1, 1)), 0.999999, SeededRng(0))


def test_edge_perturb_examples():
    A = stack(6)
    view, sel = edge_perturb(A, 0.0, 0.5, SeededRng(0))
    np.testing.assert_array_equal(view.data, A)
    view, sel = edge_perturb(A, 0.5, 0.0, SeededRng(1))
    assert not view.data[sel].any()
    np.testing.assert_array_equal(view.data[~sel], A[~sel])


def test_edge_perturb_untouched_entries_bit_identical_and_pattern_only_shrinks():
    A = stack(7) * (np.random.default_rng(7).random((4, 5, 5)) > 0.5)
    view, sel = edge_perturb(A, 0.3, 0.2, SeededRng(2))
    assert view.data[~sel].tobytes() == A[~sel].tobytes()
    assert not np.any((A == 0) & (view.data != 0))


def test_edge_perturb_count_monte_carlo():
    A = np.ones((2, 10, 10))
    counts = [edge_perturb(A, 0.2, 0.1, SeededRng(s))[1].sum() for s in range(300)]
    assert abs(np.mean(counts) / A.size - 0.2) < 0.03 * 0.2 * 10


def test_make_negative_other_sample_and_permutation():
    A, B = stack(1), stack(2)
    np.testing.assert_array_equal(make_negative(A, SeededRng(0), [A, B], 0).data, B)
    S = stack(3)
    S = S + np.swapaxes(S, -1, -2)
    neg = make_negative(S, SeededRng(5), []).data
    np.testing.assert_allclose(neg, np.swapaxes(neg, -1, -2))
    np.testing.assert_array_equal(np.sort(neg.ravel()), np.sort(S.ravel()))


def test_permutation_negative_is_simultaneous_relabel():
    S = stack(4)
    neg = permutation_negative(S, SeededRng(8)).data
    perm = SeededRng(8).permutation(5)
    np.testing.assert_array_equal(neg, S[:, perm][:, :, perm])


def test_batch_negatives_come_from_other_samples():
    G = Tensor(np.random.default_rng(0).normal(size=(6, 2, 3, 3)))
    negs = batch_negatives(G, SeededRng(1), 2)
    assert len(negs) == 2
    for n in negs:
        for b in range(6):
            assert not np.array_equal(n.data[b], G.data[b])


def test_cosine_examples_and_errors():
    A = stack(9)
    assert cosine_sim(A, A).item() == pytest.approx(1.0)
    assert cosine_sim(A, -A).item() == pytest.approx(-1.0)
    assert cosine_sim([[1.0, 0.0]], [[0.0, 1.0]]).item() == 0.0
    with pytest.raises(SimilarityUndefinedError):
        cosine_sim(np.zeros((2, 2)), np.ones((2, 2)))


def test_contrastive_examples():
    A = stack(10)
    neg = stack(11)
    # positive and negative at the same similarity
    assert contrastive_loss(A, neg, [neg]).item() == pytest.approx(math.log(2), abs=1e-12)
    val = contrastive_from_sims(Tensor(1.0), [Tensor(0.0)]).item()
    assert val == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert val == pytest.approx(0.3133, abs=1e-4)
    assert contrastive_from_sims(Tensor(50.0), [Tensor(0.0)]).item() < 1e-20
    with pytest.raises(ValueError):
        contrastive_loss(A, A, [])


def test_contrastive_monotonicity():
    vals = [contrastive_from_sims(Tensor(p), [Tensor(0.2)]).item() for p in np.linspace(-1, 1, 9)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    vals = [contrastive_from_sims(Tensor(0.3), [Tensor(n)]).item() for n in np.linspace(-1, 1, 9)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_contrastive_grad_check():
    A, P, N = stack(12), stack(13), stack(14)
    assert T.grad_check(lambda x: contrastive_loss(x, P, [N]), A) < 1e-4
    assert T.grad_check(lambda x: contrastive_loss(A, x, [N]), P) < 1e-4
    assert T.grad_check(lambda x: cosine_sim(x, N), A) < 1e-4
    G = np.random.default_rng(15).normal(size=(3, 2, 3, 3))
    V = np.random.default_rng(16).normal(size=(3, 2, 3, 3))
    assert T.grad_check(lambda x: batch_contrastive_loss(x, Tensor(V), [x[np.array([1, 2, 0])]]), G) < 1e-4


def test_augment_preserves_shape_and_config_validation():
    A = np.random.default_rng(17).normal(size=(3, 4, 5, 5))
    out = augment(A, AugmentConfig(), SeededRng(0))
    assert out.shape == A.shape
    for bad in ({"node_mask_prob": 1.0}, {"edge_perturb_prob": -0.1}, {"n_neg": 0}, {"jitter": -1}):
        with pytest.raises(ValueError):
            AugmentConfig(**bad)
