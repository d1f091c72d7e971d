"""End-to-end forward pass: graph construction -> assembly -> VGAE -> pooling -> logits."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .assemble import assemble
from .augment import AugmentConfig, augment, batch_contrastive_loss, batch_negatives
from .graph import NodeEmbeddings, build_stack, default_k, init_embeddings, topk_mask
from .importance import init_importance
from .losses import LossBreakdown, LossWeights, bce_loss, focal_loss, reg_loss, structural_loss, total_loss
from .lstm import LSTMParams, embed_windows, init_lstm, second_moment_embedding
from .pooling import (ClassifierHead, PoolLayer, classify, flatten_pooled, init_head, init_pool,
                      pooled_size, temporal_pool)
from .tensor import SeededRng, Tensor
from .vgae import Decoder, Encoder, decode_logits, encode, init_decoder, init_encoder, reparameterize, vgae_loss

ABLATION_FLAGS = ("AUG", "FOC", "LSTM", "REG", "STRUC", "TGP")


@dataclass
class ModelConfig:
    d: int = 8
    s: int = 6
    w: int = 4
    n_labels: int = 3
    k: int | None = None
    rho: float = 0.5
    lstm_hidden: int = 8
    gin_hidden: int = 64
    latent: int = 16
    gin_layers: int = 2
    pool_ratio: float = 0.5
    pool_kernel: int = 3
    head_widths: list[int] = field(default_factory=lambda: [1024, 512, 256])
    dropout: float = 0.5
    assemble_mode: str = "hadamard"
    struct_mode: str = "consecutive"
    pooled_inputs: str = "both"
    vgae_target: str = "shared"
    pool_source: str = "logits"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    ablate: tuple[str, ...] = ()

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.ablate = tuple(sorted(set(self.ablate)))
        bad = set(self.ablate) - set(ABLATION_FLAGS)
        if bad:
            raise ValueError(f"unknown ablation flag(s) {sorted(bad)}")
        if self.k is None:
            self.k = default_k(self.d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ablate"] = list(self.ablate)
        return out

    def effective_weights(self) -> LossWeights:
        w = LossWeights(**asdict(self.weights))
        if "AUG" in self.ablate:
            w.contrast_weight = 0.0
        if "FOC" in self.ablate:
            w.focal_weight = 0.0
        if "REG" in self.ablate:
            w.reg_weight = 0.0
        if "STRUC" in self.ablate:
            w.struct_weight = 0.0
        return w

    def head_inputs(self) -> int:
        d, s = self.d, self.s
        if "TGP" in self.ablate:
            return s * d * d
        n_out = pooled_size(d, self.pool_ratio)
        t_out = s - self.pool_kernel + 1
        n = 0
        if self.pooled_inputs in ("both", "x"):
            n += n_out * d * t_out
        if self.pooled_inputs in ("both", "a"):
            n += s * n_out * n_out
        return n


class Model:
    """Parameters plus the interpretability stack; ``params`` maps names to leaf tensors."""

    def __init__(self, cfg: ModelConfig, seed: int = 42):
        self.cfg = cfg
        rng = SeededRng(seed)
        feat_in = 3 * cfg.d if cfg.assemble_mode == "concat" else cfg.d
        self.emb: NodeEmbeddings = init_embeddings(cfg.d, cfg.s, rng.split())
        self.lstm: LSTMParams = init_lstm(1, cfg.lstm_hidden, rng.split())
        self.enc: Encoder = init_encoder(feat_in, cfg.gin_hidden, cfg.latent, cfg.gin_layers, rng.split())
        self.dec: Decoder = init_decoder(cfg.latent, cfg.gin_hidden, cfg.d, cfg.gin_layers, rng.split())
        self.pool: PoolLayer = init_pool(cfg.d, cfg.pool_ratio, cfg.pool_kernel, rng.split())
        self.head: ClassifierHead = init_head(cfg.head_inputs(), list(cfg.head_widths), cfg.n_labels, rng.split())
        self.importance = init_importance(cfg.d, cfg.s)
        self.params: dict[str, Tensor] = {"theta": self.emb.theta, "psi": self.emb.psi}
        self.params.update({f"lstm.{k}": v for k, v in self.lstm.tensors().items()})
        self.params.update(self.enc.tensors())
        self.params.update(self.dec.tensors())
        self.params.update(self.pool.tensors())
        self.params.update(self.head.tensors())
        for name, t in self.params.items():
            t.name = name

    def coupling(self) -> np.ndarray:
        """Interpretability weights rescaled to unit mean per slice for the Hadamard term."""
        I = self.importance
        m = I.mean(axis=(1, 2), keepdims=True)
        return np.where(m > 0, I / np.where(m > 0, m, 1.0), 1.0)

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())


@dataclass
class ForwardResult:
    logits: Tensor
    probs: Tensor
    A: Tensor
    G: Tensor
    node_in: Tensor
    edge_in: Tensor
    gin_states: list
    mu: Tensor
    logvar: Tensor
    A_hat: Tensor
    losses: LossBreakdown | None = None


def forward(model: Model, X, Y=None, rng: SeededRng | None = None, training: bool = False,
            label: int | None = None) -> ForwardResult:
    """Full pass on a batch X (B, d, w, s).

    Training mode draws augmentation, reparameterisation noise and dropout
    from ``rng``; evaluation mode uses z = mu and no augmentation. With
    ``label`` set, the loss is that label's BCE alone (used for per-label
    importance).
    """
    cfg = model.cfg
    flags = set(cfg.ablate)
    X = T.as_tensor(X)
    B = X.shape[0]

    A = build_stack(model.emb, cfg.k, cfg.rho)
    mask = topk_mask(A.data, cfg.k) if A.data.size else None
    E = second_moment_embedding(X) if "LSTM" in flags else embed_windows(X, model.lstm)
    coupling = model.coupling()
    G_anchor = assemble(A, coupling, E, cfg.assemble_mode).G

    contrast = None
    A_view = None
    G_in = G_anchor
    if training and "AUG" not in flags:
        A_b = A + Tensor(np.zeros((B,) + A.shape))
        A_view = augment(A_b, cfg.augment, rng)
        G_in = assemble(A_view, coupling, E, cfg.assemble_mode).G
        if cfg.weights.contrast_weight > 0:
            negs = batch_negatives(G_anchor, rng, cfg.augment.n_neg)
            contrast = batch_contrastive_loss(G_anchor, G_in, negs)

    node_in = T.identity(G_in)
    if cfg.assemble_mode == "concat":
        edge_in = T.identity(assemble(A, coupling, E).G)
    else:
        edge_in = T.identity(G_in)
    mu, logvar, states = encode(node_in, model.enc, A_w=edge_in)
    # the classifier reads the reconstruction from the posterior mean; a sampled z
    # reconstructs only for the VGAE term, so its noise never reaches the head
    rec_logits = decode_logits(mu, model.dec, A_w=edge_in)
    A_hat = T.sigmoid(rec_logits)
    A_rec = A_hat
    if training and cfg.weights.vgae_weight > 0:
        z = reparameterize(mu, logvar, rng)
        A_rec = T.sigmoid(decode_logits(z, model.dec, A_w=edge_in))

    if "TGP" in flags:
        feats = T.flatten(rec_logits if cfg.pool_source == "logits" else A_hat, 1)
    else:
        pooled = temporal_pool(rec_logits if cfg.pool_source == "logits" else A_hat, [model.pool])
        feats = flatten_pooled(pooled, cfg.pooled_inputs in ("both", "x"), cfg.pooled_inputs in ("both", "a"))
    logits = classify(feats, model.head, cfg.dropout, rng, training)
    probs = T.sigmoid(logits)

    res = ForwardResult(logits, probs, A, G_in, node_in, edge_in, states, mu, logvar, A_hat)
    if Y is None:
        return res
    Y = np.asarray(Y, dtype=np.float64)
    if label is not None:
        bce = bce_loss(probs[:, label], Y[:, label])
        res.losses = total_loss({"bce": bce}, LossWeights(0, 0, 0, 0, 0))
        return res
    w = cfg.effective_weights()
    comps = {"bce": bce_loss(probs, Y), "contrast": contrast}
    if w.focal_weight > 0:
        comps["focal"] = focal_loss(probs, Y, w.focal_gamma)
    if w.reg_weight > 0:
        # averaged per edge and coordinate so the weight does not scale with graph size
        H0 = states[0]
        comps["reg"] = reg_loss(H0, mask) * (1.0 / (B * max(mask.sum(), 1.0) * H0.shape[-1]))
    if w.struct_weight > 0:
        if cfg.struct_mode == "augmented" and A_view is not None:
            comps["struct"] = structural_loss(A, A_view)
        else:
            comps["struct"] = structural_loss(A)
    if w.vgae_weight > 0:
        if cfg.vgae_target == "sample":
            # each graph's own strongest edges by magnitude
            target = topk_mask(np.abs(edge_in.data), cfg.k)
        else:
            target = mask
        comps["vgae"] = vgae_loss(target, A_rec, mu, logvar)
    res.losses = total_loss(comps, w)
    return res
