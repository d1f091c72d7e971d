import numpy as np
import pytest

from tsgraph import tensor as T
from tsgraph.data import SynthSpec, cohort_arrays, synth_generate
from tsgraph.lstm import second_moment_embedding
from tsgraph.model import ABLATION_FLAGS, Model, ModelConfig, forward
from tsgraph.tensor import SeededRng

from _catalog import FULL_PASS_PARAMS, full_forward_case


def small(**kw):
    return ModelConfig(gin_hidden=6, latent=3, head_widths=[8], lstm_hidden=3, **kw)


@pytest.fixture(scope="module")
def batch():
    return cohort_arrays(synth_generate(SynthSpec(n=10, seed=0)))


def test_forward_shapes_and_eval_determinism(batch):
    X, Y = batch
    model = Model(small(), seed=1)
    r = forward(model, X)
    assert r.logits.shape == (10, 3) and r.A_hat.shape == (10, 6, 8, 8)
    assert r.losses is None
    assert np.all((r.probs.data > 0) & (r.probs.data < 1))
    np.testing.assert_array_equal(forward(model, X).probs.data, r.probs.data)
    assert r.A.shape == (6, 8, 8) and np.all((r.A.data != 0).sum(-1) <= model.cfg.k)


def test_training_seed_controls_stochastic_pass(batch):
    X, Y = batch
    model = Model(small(), seed=2)
    a = forward(model, X, Y, SeededRng(5), training=True).losses.total.item()
    b = forward(model, X, Y, SeededRng(5), training=True).losses.total.item()
    c = forward(model, X, Y, SeededRng(6), training=True).losses.total.item()
    assert a == b and a != c


def test_ablation_flags_wiring(batch):
    X, Y = batch
    rng = lambda: SeededRng(3)
    ref = forward(Model(small(), seed=3), X, Y, rng(), training=True).losses
    assert ref.contrast.item() > 0 and ref.focal.item() > 0 and ref.vgae.item() > 0
    no_aug = forward(Model(small(ablate=("AUG",)), seed=3), X, Y, rng(), training=True)
    assert no_aug.losses.contrast.item() == 0.0
    for flag, comp in (("FOC", "focal"), ("REG", "reg"), ("STRUC", "struct")):
        cfg = small(ablate=(flag,))
        assert getattr(cfg.effective_weights(), comp + "_weight") == 0
        out = forward(Model(cfg, seed=3), X, Y, rng(), training=True).losses
        assert getattr(out, comp).item() == 0.0
    assert small(ablate=("TGP",)).head_inputs() == 6 * 64
    lstm_off = Model(small(ablate=("LSTM",)), seed=3)
    lstm_off.importance[...] = 1.0
    G = forward(lstm_off, X).G.data
    A = forward(lstm_off, X).A.data
    # with unit coupling, G - A is exactly the embedding term
    np.testing.assert_allclose(G - A, second_moment_embedding(X).data, atol=1e-12)
    with pytest.raises(ValueError):
        ModelConfig(ablate=("XYZ",))
    assert set(ABLATION_FLAGS) == {"AUG", "FOC", "LSTM", "REG", "STRUC", "TGP"}


def test_label_loss_is_single_label_bce(batch):
    X, Y = batch
    model = Model(small(), seed=4)
    r = forward(model, X, Y, label=1)
    p = np.clip(r.probs.data[:, 1], 1e-7, 1 - 1e-7)
    ref = -np.mean(Y[:, 1] * np.log(p) + (1 - Y[:, 1]) * np.log(1 - p))
    assert r.losses.total.item() == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("param", FULL_PASS_PARAMS)
def test_full_pass_grad_check(param):
    x0, f = full_forward_case(0, param)
    assert T.grad_check(f, x0, eps=1e-5) <= 1e-4
