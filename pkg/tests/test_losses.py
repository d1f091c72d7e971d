import math
import warnings

import numpy as np
import pytest

from tsgraph import tensor as T
from tsgraph.losses import (COMPONENTS, LossWeights, NonFiniteLossError, bce_loss, focal_loss, reg_loss,
                            structural_loss, total_loss)
from tsgraph.tensor import Tensor


def test_focal_examples():
    assert focal_loss([1.0], [1.0]).item() == pytest.approx(0.0, abs=1e-12)
    assert focal_loss([0.5], [1.0], 2.0).item() == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert focal_loss([0.5], [1.0], 2.0).item() == pytest.approx(0.17329, abs=1e-5)
    with pytest.raises(ValueError):
        focal_loss([0.5], [1.0], -1.0)


def test_focal_gamma_zero_is_bce():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.uniform(0.01, 0.99, (5, 3))
        y = (rng.random((5, 3)) > 0.5).astype(float)
        ref = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert focal_loss(p, y, 0.0).item() == pytest.approx(ref, abs=1e-12)
        assert bce_loss(p, y).item() == pytest.approx(ref, abs=1e-12)


def test_focal_decreasing_in_pt():
    vals = [focal_loss([p], [1.0], 2.0).item() for p in np.linspace(0.05, 0.95, 19)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    vals = [focal_loss([p], [0.0], 2.0).item() for p in np.linspace(0.05, 0.95, 19)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_focal_grad_check():
    p = np.random.default_rng(1).uniform(0.1, 0.9, (4, 3))
    y = (np.random.default_rng(2).random((4, 3)) > 0.5).astype(float)
    assert T.grad_check(lambda q: focal_loss(q, y, 2.0), p) < 1e-4


def test_reg_examples():
    H = np.array([[0.0], [3.0]])
    assert reg_loss(H, [(0, 1)]).item() == pytest.approx(9.0)
    assert reg_loss(H, []).item() == 0.0
    assert reg_loss(np.ones((3, 2)), [(0, 1), (1, 2)]).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        reg_loss(H, [(0, 2)])


def test_reg_mask_matches_pair_loop():
    rng = np.random.default_rng(3)
    H = rng.normal(size=(5, 3))
    mask = (rng.random((5, 5)) > 0.6).astype(float)
    ref = sum(np.sum((H[i] - H[j]) ** 2) for i in range(5) for j in range(5) if mask[i, j])
    assert reg_loss(H, mask).item() == pytest.approx(ref, rel=1e-12)
    assert T.grad_check(lambda h: reg_loss(h, mask), H) < 1e-4


def test_structural_examples():
    A = np.random.default_rng(4).normal(size=(3, 3))
    assert structural_loss(np.stack([A, A, 2 * A])).item() == pytest.approx(0.0, abs=1e-12)
    assert structural_loss(np.stack([A, -A])).item() == pytest.approx(2.0)
    E1, E2 = np.zeros((2, 2)), np.zeros((2, 2))
    E1[0, 0], E2[1, 1] = 1.0, 1.0
    assert structural_loss(np.stack([E1, E2])).item() == pytest.approx(1.0)
    assert structural_loss(A[None]).item() == 0.0


def test_structural_range_and_zero_norm_skip():
    rng = np.random.default_rng(5)
    for _ in range(30):
        v = structural_loss(rng.normal(size=(4, 3, 3))).item()
        assert 0.0 <= v <= 2.0
    A = rng.normal(size=(3, 3))
    with pytest.warns(UserWarning):
        v = structural_loss(np.stack([A, np.zeros((3, 3)), A, A])).item()
    assert v == pytest.approx(0.0, abs=1e-12)


def test_structural_paired_mode_and_grad():
    A = np.random.default_rng(6).normal(size=(3, 4, 4))
    assert structural_loss(A, A).item() == pytest.approx(0.0, abs=1e-12)
    assert T.grad_check(lambda a: structural_loss(a), A) < 1e-4


def comps(seed=7):
    rng = np.random.default_rng(seed)
    return {n: Tensor(float(rng.uniform(0.1, 2.0))) for n in COMPONENTS}


def test_total_all_zero_weights_is_bce():
    c = comps()
    w = LossWeights(0, 0, 0, 0, 0)
    assert total_loss(c, w).total.item() == c["bce"].item()


def test_total_default_grid_weighted_sum():
    c = comps()
    v = {k: t.item() for k, t in c.items()}
    expect = v["bce"] + 0.01 * v["contrast"] + v["focal"] + 0.5 * v["reg"] + 0.001 * v["struct"] + v["vgae"]
    assert total_loss(c, LossWeights()).total.item() == pytest.approx(expect, rel=1e-12)


def test_total_linear_in_each_weight():
    c = comps(8)
    base = LossWeights(0.3, 0.7, 0.2, 0.05, 0.9)
    t0 = total_loss(c, base).total.item()
    for name, wname in [("contrast", "contrast_weight"), ("focal", "focal_weight"), ("reg", "reg_weight"),
                        ("struct", "struct_weight"), ("vgae", "vgae_weight")]:
        w = LossWeights(**{**base.__dict__, wname: 2 * getattr(base, wname)})
        delta = total_loss(c, w).total.item() - t0
        assert delta == pytest.approx(getattr(base, wname) * c[name].item(), rel=1e-10)


def test_missing_component_counts_zero_and_nonfinite_named():
    assert total_loss({"bce": Tensor(1.0)}, LossWeights()).total.item() == 1.0
    with pytest.raises(NonFiniteLossError) as exc:
        total_loss({"bce": Tensor(1.0), "reg": Tensor(np.nan)}, LossWeights())
    assert exc.value.component == "reg"
    with pytest.raises(ValueError):
        LossWeights(focal_weight=-1)
