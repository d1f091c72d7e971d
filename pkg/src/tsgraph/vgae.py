"""GIN layers and the variational graph autoencoder built from them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, SeededRng, Tensor

LOGVAR_MIN, LOGVAR_MAX = -30.0, 30.0
PROB_EPS = 1e-7


@dataclass
class GINLayer:
    """MLP((1 + eps) h + sum_u a_vu h_u) with a tanh hidden layer.

    ``out_act`` applies tanh to the layer output as well.
    """

    eps: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    out_act: bool = True

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.eps": self.eps, f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def _linear_init(rng, n_in, n_out, name):
    w = Tensor(T.glorot_uniform(rng, n_in, n_out, (n_in, n_out)), requires_grad=True, name=f"{name}.w")
    b = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.b")
    return w, b


def init_gin_layer(n_in: int, hidden: int, n_out: int, rng: SeededRng, out_act: bool = True) -> GINLayer:
    w1, b1 = _linear_init(rng, n_in, hidden, "gin1")
    w2, b2 = _linear_init(rng, hidden, n_out, "gin2")
    return GINLayer(Tensor(np.zeros(1), requires_grad=True, name="gin.eps"), w1, b1, w2, b2, out_act)


def aggregate(H, A_w, eps) -> Tensor:
    """(1 + eps) H + A_w H."""
    H, A_w = T.as_tensor(H), T.as_tensor(A_w)
    if A_w.shape[-1] != A_w.shape[-2] or A_w.shape[-1] != H.shape[-2]:
        raise ContractError(f"gin: adjacency {A_w.shape} does not match node features {H.shape}")
    return (1.0 + T.as_tensor(eps)) * H + T.matmul(A_w, H)


def mlp2(x, w1, b1, w2, b2, out_act=False) -> Tensor:
    y = T.matmul(T.tanh(T.matmul(x, w1) + b1), w2) + b2
    return T.tanh(y) if out_act else y


def gin_forward(H, A_w, layer: GINLayer) -> Tensor:
    pre = aggregate(H, A_w, layer.eps)
    return mlp2(pre, layer.w1, layer.b1, layer.w2, layer.b2, layer.out_act)


@dataclass
class Encoder:
    layers: list[GINLayer]
    w_mu: Tensor
    b_mu: Tensor
    w_lv: Tensor
    b_lv: Tensor

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for k, layer in enumerate(self.layers):
            out.update(layer.tensors(f"enc{k}"))
        out.update({"enc.w_mu": self.w_mu, "enc.b_mu": self.b_mu,
                    "enc.w_lv": self.w_lv, "enc.b_lv": self.b_lv})
        return out


@dataclass
class Decoder:
    layers: list[GINLayer]

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for k, layer in enumerate(self.layers):
            out.update(layer.tensors(f"dec{k}"))
        return out


@dataclass
class LatentState:
    mu: Tensor
    logvar: Tensor
    z: Tensor


def init_encoder(n_in: int, hidden: int, latent: int, n_layers: int, rng: SeededRng) -> Encoder:
    layers = [init_gin_layer(n_in if k == 0 else hidden, hidden, hidden, rng) for k in range(n_layers)]
    w_mu, b_mu = _linear_init(rng, hidden, latent, "mu")
    w_lv, b_lv = _linear_init(rng, hidden, latent, "logvar")
    return Encoder(layers, w_mu, b_mu, w_lv, b_lv)


def init_decoder(latent: int, hidden: int, n_out: int, n_layers: int, rng: SeededRng) -> Decoder:
    layers = []
    for k in range(n_layers):
        last = k == n_layers - 1
        layers.append(init_gin_layer(latent if k == 0 else hidden, hidden,
                                     n_out if last else hidden, rng, out_act=not last))
    return Decoder(layers)


def encode(G, enc: Encoder, A_w=None):
    """Node features and neighbour weights both come from G unless A_w is given.

    Returns ``(mu, logvar, hidden_states)`` where ``hidden_states`` lists the
    output of every GIN layer.
    """
    G = T.as_tensor(G)
    A_w = G if A_w is None else A_w
    h = G
    states = []
    for layer in enc.layers:
        h = gin_forward(h, A_w, layer)
        states.append(h)
    mu = T.matmul(h, enc.w_mu) + enc.b_mu
    logvar = T.clip(T.matmul(h, enc.w_lv) + enc.b_lv, LOGVAR_MIN, LOGVAR_MAX)
    return mu, logvar, states


def reparameterize(mu, logvar, rng: SeededRng | None = None, noise=None) -> Tensor:
    """z = mu + exp(logvar / 2) * noise; noise ~ N(0, 1) is a constant of the tape."""
    mu, logvar = T.as_tensor(mu), T.as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise T.DimensionError("reparameterize", [mu.shape, logvar.shape])
    if noise is None:
        noise = rng.normal(mu.shape)
    lv = T.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)
    return mu + T.apply_mask(T.exp(lv * 0.5), noise)


def decode_logits(z, dec: Decoder, A_w=None) -> Tensor:
    h = T.as_tensor(z)
    for layer in dec.layers:
        if A_w is None:
            pre = (1.0 + layer.eps) * h
            h = mlp2(pre, layer.w1, layer.b1, layer.w2, layer.b2, layer.out_act)
        else:
            h = gin_forward(h, A_w, layer)
    return h


def decode(z, dec: Decoder, A_w=None) -> Tensor:
    """Reconstructed edge probabilities sigmoid(GIN_decoder(z)), shaped (..., d, d)."""
    return T.sigmoid(decode_logits(z, dec, A_w))


def kl_divergence(mu, logvar) -> Tensor:
    """0.5 * sum(mu^2 + sigma^2 - logvar - 1) over the trailing (node, latent) axes."""
    mu, logvar = T.as_tensor(mu), T.as_tensor(logvar)
    term = mu * mu + T.exp(logvar) - logvar - 1.0
    return T.sum(T.sum(term, axis=-1), axis=-1) * 0.5


def bce(target, probs) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped into [1e-7, 1 - 1e-7]."""
    p = T.clip(T.as_tensor(probs), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(T.as_tensor(target).data, dtype=np.float64)
    return T.mean(T.apply_mask(T.log(p), -y) + T.apply_mask(T.log(1.0 - p), -(1.0 - y)))


def vgae_loss(A_target, A_hat, mu, logvar, kl_per_entry: bool = True) -> Tensor:
    """BCE(binarised target, A_hat) + KL, averaged over graphs when batched.

    The BCE is a mean over the d x d entries. With ``kl_per_entry`` the summed
    KL is divided by the same entry count so both terms share one scale.
    """
    target = (np.asarray(T.as_tensor(A_target).data) != 0).astype(np.float64)
    A_hat = T.as_tensor(A_hat)
    target = np.broadcast_to(target, A_hat.shape)
    kl = kl_divergence(mu, logvar)
    if kl_per_entry:
        kl = kl * (1.0 / (A_hat.shape[-1] * A_hat.shape[-2]))
    if target.ndim == 2:
        return bce(target, A_hat) + kl
    p = T.clip(A_hat, PROB_EPS, 1.0 - PROB_EPS)
    per_entry = T.apply_mask(T.log(p), -target) + T.apply_mask(T.log(1.0 - p), -(1.0 - target))
    rec = T.mean(T.mean(per_entry, axis=-1), axis=-1)  # per graph
    return T.mean(rec + kl)
