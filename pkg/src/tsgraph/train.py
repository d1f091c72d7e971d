"""Optimisation, evaluation metrics, checkpoints and the training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import CohortSplit, SynthSpec, WindowedSample, cohort_arrays, stratified_split
from .importance import accumulate, frobenius_delta
from .losses import PROB_EPS, NonFiniteLossError
from .model import Model, ModelConfig, forward
from .tensor import SeededRng

log = logging.getLogger(__name__)

PAPER_SEEDS = (42, 1992, 1709, 250, 213)


class DivergenceError(FloatingPointError):
    def __init__(self, msg: str, checkpoint: "Checkpoint | None" = None):
        self.checkpoint = checkpoint
        super().__init__(msg)


class NonFiniteGradError(FloatingPointError):
    def __init__(self, name: str):
        self.param = name
        super().__init__(f"gradient of {name!r} is not finite; step rejected")


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Rejects the whole step on a non-finite grad."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradError(name)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class PlateauState:
    lr: float
    best: float = math.inf
    bad_epochs: int = 0
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-6


def schedule(state: PlateauState, val_loss: float) -> float:
    """Halve the rate after ``patience`` epochs without improvement; floor at min_lr."""
    if val_loss < state.best:
        state.best = val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.lr = max(state.lr * state.factor, state.min_lr)
            state.bad_epochs = 0
    return state.lr


def inverse_time_lr(lr0: float, epoch: int) -> float:
    """eta_t = eta_0 / t for epochs t = 1, 2, ..."""
    return lr0 / max(epoch, 1)


# ---------------------------------------------------------------- metrics

@dataclass
class LabelMetrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def sensitivity(self) -> float | None:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None

    @property
    def specificity(self) -> float | None:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else None

    @property
    def balanced_accuracy(self) -> float | None:
        se, sp = self.sensitivity, self.specificity
        if se is None or sp is None:
            return None
        return 0.5 * (se + sp)

    @property
    def f1(self) -> float | None:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if self.tp + self.fn else None


@dataclass
class MetricsReport:
    labels: list[LabelMetrics]
    balanced_accuracy: float
    f1: float
    sensitivity: float

    def to_dict(self) -> dict:
        return {
            "balanced_accuracy": self.balanced_accuracy, "f1": self.f1,
            "sensitivity": self.sensitivity,
            "per_label": [{**asdict(m), "sensitivity": m.sensitivity, "specificity": m.specificity,
                           "balanced_accuracy": m.balanced_accuracy, "f1": m.f1} for m in self.labels],
        }


def _mean_defined(vals, what):
    kept = [v for v in vals if v is not None]
    if len(kept) < len(vals):
        warnings.warn(f"{what}: {len(vals) - len(kept)} label(s) without positives excluded")
    return float(np.mean(kept)) if kept else float("nan")


def compute_metrics(probs: np.ndarray, Y: np.ndarray, threshold: float = 0.5) -> MetricsReport:
    P = np.asarray(probs) >= threshold
    Y = np.asarray(Y).astype(bool)
    labels = []
    for c in range(Y.shape[1]):
        p, y = P[:, c], Y[:, c]
        labels.append(LabelMetrics(int(np.sum(p & y)), int(np.sum(p & ~y)),
                                   int(np.sum(~p & ~y)), int(np.sum(~p & y))))
    return MetricsReport(labels,
                         _mean_defined([m.balanced_accuracy for m in labels], "balanced accuracy"),
                         _mean_defined([m.f1 for m in labels], "F1"),
                         _mean_defined([m.sensitivity for m in labels], "sensitivity"))


def summarize_seeds(values: Sequence[float]) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=0)), "values": [float(v) for v in a]}


# ---------------------------------------------------------------- configuration

@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 128
    lr: float = 1e-3
    lr_schedule: str = "plateau"
    epochs: int = 100
    scheduler_patience: int = 5
    early_stop_patience: int = 10
    importance_decay: float = 0.9
    importance_samples: int = 256
    seeds: list[int] = field(default_factory=lambda: list(PAPER_SEEDS))
    seed: int = 42
    split_ratios: tuple = (0.8, 0.1, 0.1)
    data: dict = field(default_factory=lambda: {"source": "synth"})
    synth: SynthSpec = field(default_factory=SynthSpec)
    shuffle_labels: bool = False

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.synth, dict):
            self.synth = SynthSpec.from_dict(self.synth)
        self.split_ratios = tuple(self.split_ratios)
        for name in ("batch_size", "lr", "scheduler_patience", "early_stop_patience"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_schedule not in ("plateau", "inverse_time", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "batch_size": self.batch_size, "lr": self.lr,
                "lr_schedule": self.lr_schedule, "epochs": self.epochs,
                "scheduler_patience": self.scheduler_patience,
                "early_stop_patience": self.early_stop_patience,
                "importance_decay": self.importance_decay,
                "importance_samples": self.importance_samples, "seeds": list(self.seeds),
                "seed": self.seed, "split_ratios": list(self.split_ratios), "data": dict(self.data),
                "synth": self.synth.to_dict(), "shuffle_labels": self.shuffle_labels}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def with_seed(self, seed: int) -> "TrainConfig":
        d = self.to_dict()
        d["seed"] = seed
        return TrainConfig.from_dict(d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    importance: np.ndarray
    moments: dict
    epoch: int
    config: dict
    config_hash: str
    rng_state: dict
    extra: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model: Model, opt: AdamState | None, epoch: int, cfg: TrainConfig,
                rng: SeededRng, extra: dict | None = None) -> "Checkpoint":
        moments = {}
        if opt is not None:
            moments = {"t": opt.t, "m": {k: v.copy() for k, v in opt.m.items()},
                       "v": {k: v.copy() for k, v in opt.v.items()}}
        return cls({k: t.data.copy() for k, t in model.params.items()}, model.importance.copy(),
                   moments, epoch, cfg.to_dict(), cfg.hash(), rng.get_state(), dict(extra or {}))

    def restore(self) -> Model:
        cfg = TrainConfig.from_dict(self.config)
        model = Model(cfg.model, seed=cfg.seed)
        for k, arr in self.arrays.items():
            model.params[k].data[...] = arr
        model.importance = self.importance.copy()
        return model

    def save(self, path) -> Path:
        """Directory with ``arrays.bin`` (concatenated little-endian float64) and ``manifest.json``."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        entries, chunks, offset = [], [], 0
        named = [(f"param/{k}", v) for k, v in self.arrays.items()]
        named.append(("importance", self.importance))
        for k in sorted(self.moments.get("m", {})):
            named.append((f"adam_m/{k}", self.moments["m"][k]))
            named.append((f"adam_v/{k}", self.moments["v"][k]))
        for name, arr in named:
            a = np.ascontiguousarray(arr, dtype="<f8")
            chunks.append(a.tobytes())
            entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
            offset += a.nbytes
        (path / "arrays.bin").write_bytes(b"".join(chunks))
        manifest = {"format": "tsgraph-checkpoint/1", "dtype": "<f8", "arrays": entries,
                    "epoch": self.epoch, "adam_t": self.moments.get("t", 0), "config": self.config,
                    "config_hash": self.config_hash, "rng_state": self.rng_state, "extra": self.extra}
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "arrays.bin").read_bytes()
        arrays, m, v, importance = {}, {}, {}, None
        for e in manifest["arrays"]:
            a = np.frombuffer(blob, dtype="<f8", count=e["count"], offset=e["offset"]).reshape(e["shape"]).copy()
            kind, _, name = e["name"].partition("/")
            if kind == "param":
                arrays[name] = a
            elif kind == "adam_m":
                m[name] = a
            elif kind == "adam_v":
                v[name] = a
            else:
                importance = a
        moments = {"t": manifest["adam_t"], "m": m, "v": v} if m else {}
        return cls(arrays, importance, moments, manifest["epoch"], manifest["config"],
                   manifest["config_hash"], manifest["rng_state"], manifest.get("extra", {}))


# ---------------------------------------------------------------- data

def load_cohort(cfg: TrainConfig, base_dir=None) -> list[WindowedSample]:
    src = cfg.data.get("source", "synth")
    if src == "synth":
        from .data import synth_generate
        return synth_generate(cfg.synth)
    if src == "csv":
        from .data import impute_cohort, ingest_csv, to_windowed
        root = Path(cfg.data.get("dir") or base_dir or ".")
        raws, _ = ingest_csv(root / cfg.data.get("series", "series.csv"),
                             root / cfg.data.get("statics", "statics.csv"))
        dense = impute_cohort(raws, cfg.data.get("interval", 1.0), length=cfg.data.get("length"))
        return to_windowed(dense, cfg.model.s)
    raise ValueError(f"unknown data source {src!r}")


# ---------------------------------------------------------------- loops

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    convergence: list[float]
    split: CohortSplit
    best_epoch: int
    best_val: MetricsReport | None
    last: Checkpoint | None = None


def predict(model: Model, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for lo in range(0, len(X), batch_size):
        out.append(forward(model, X[lo:lo + batch_size]).probs.data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.n_labels))


def probs_loss(probs: np.ndarray, Y: np.ndarray, focal_weight: float = 1.0, gamma: float = 2.0) -> float:
    """bce + focal_weight * focal evaluated on fixed probabilities (no tape)."""
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    Y = np.asarray(Y, dtype=np.float64)
    pt = np.where(Y > 0.5, p, 1 - p)
    nll = -np.log(pt)
    return float(nll.mean() + focal_weight * ((1 - pt) ** gamma * nll).mean())


def eval_loss(model: Model, X, Y, batch_size: int = 256) -> float:
    w = model.cfg.effective_weights()
    return probs_loss(predict(model, X, batch_size), Y, w.focal_weight, w.focal_gamma)


def gradient_magnitudes(model: Model, X, Y, label: int | None = None, batch_size: int = 128):
    """Sample-resolved dL/dG as edge gradients and node-feature gradients, evaluation mode.

    Returns ``(edge, node, layers)``: edge and node are (n, s, d, d); layers
    lists the per-GIN-layer state gradients (n, s, d, F). Per-sample scaling
    undoes the batch mean in the loss.
    """
    edges, nodes, layers = [], [], []
    for lo in range(0, len(X), batch_size):
        xb, yb = X[lo:lo + batch_size], Y[lo:lo + batch_size]
        with T.Tape() as tape:
            r = forward(model, xb, yb, label=label)
        g = T.backward(tape, r.losses.total)
        B = len(xb)
        edges.append(tape.grad(g, r.edge_in) * B)
        nodes.append(tape.grad(g, r.node_in) * B)
        layers.append([tape.grad(g, st) * B for st in r.gin_states])
    return (np.concatenate(edges), np.concatenate(nodes),
            [np.concatenate(per_layer) for per_layer in zip(*layers)])


def set_output_prior(model: Model, Y: np.ndarray) -> None:
    """Start the output bias at the training log-odds so early steps are not spent on the base rate."""
    if len(Y) == 0:
        return
    p = np.clip(np.asarray(Y, dtype=np.float64).mean(axis=0), 1e-3, 1 - 1e-3)
    model.head.biases[-1].data[...] = np.log(p / (1 - p))


def train(cfg: TrainConfig, cohort: Sequence[WindowedSample] | None = None,
          split: CohortSplit | None = None, progress: bool = False) -> TrainResult:
    """Train one seed; keep the checkpoint with the best validation balanced accuracy."""
    if cohort is None:
        cohort = load_cohort(cfg)
    X, Y = cohort_arrays(cohort)
    if split is None:
        split = stratified_split(Y, cfg.split_ratios, seed=cfg.seed)
    rng = SeededRng(cfg.seed)
    Ytrain = Y.copy()
    if cfg.shuffle_labels:
        Ytrain = Y[rng.split().permutation(len(Y))]
    model = Model(cfg.model, seed=cfg.seed)
    set_output_prior(model, Ytrain[np.array(split.train)])
    opt = AdamState()
    plateau = PlateauState(cfg.lr, patience=cfg.scheduler_patience)
    tr_idx = np.array(split.train)
    va_idx = np.array(split.validation)
    imp_idx = tr_idx[: cfg.importance_samples]
    data_rng, step_rng = rng.split(), rng.split()

    history: list[dict] = []
    trace: list[float] = []
    best_ck = Checkpoint.capture(model, opt, 0, cfg, rng)
    best_val, best_score, best_epoch = None, -math.inf, 0
    stale, best_vloss = 0, math.inf
    lr = cfg.lr
    eff = cfg.model.effective_weights()
    for epoch in range(1, cfg.epochs + 1):
        if cfg.lr_schedule == "inverse_time":
            lr = inverse_time_lr(cfg.lr, epoch)
        order = tr_idx[data_rng.permutation(len(tr_idx))]
        sums: dict[str, float] = {}
        nb = 0
        for lo in range(0, len(order), cfg.batch_size):
            bi = order[lo:lo + cfg.batch_size]
            try:
                with T.Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
                    r = forward(model, X[bi], Ytrain[bi], step_rng, training=True)
            except NonFiniteLossError as exc:
                raise DivergenceError(f"non-finite {exc.component} loss at epoch {epoch}", best_ck) from exc
            loss = r.losses
            g = T.backward(tape, loss.total)
            grads = {k: tape.grad(g, p) for k, p in model.params.items()}
            try:
                adam_step(model.params, grads, opt, lr)
            except NonFiniteGradError as exc:
                raise DivergenceError(str(exc), best_ck) from exc
            for k, v in loss.to_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            nb += 1

        prev = model.importance.copy()
        if len(imp_idx):
            ge, gn, _ = gradient_magnitudes(model, X[imp_idx], Ytrain[imp_idx])
            model.importance = accumulate(model.importance, ge, gn, cfg.importance_decay)
        trace.append(frobenius_delta(prev, model.importance))

        rec = {"epoch": epoch, "lr": lr, "train": {k: v / max(nb, 1) for k, v in sums.items()},
               "importance_delta": trace[-1]}
        if len(va_idx):
            vprobs = predict(model, X[va_idx])
            vY = Ytrain[va_idx] if cfg.shuffle_labels else Y[va_idx]
            vm = compute_metrics(vprobs, vY)
            vloss = probs_loss(vprobs, vY, eff.focal_weight, eff.focal_gamma)
            rec.update(val_loss=vloss, val_balanced_accuracy=vm.balanced_accuracy)
            if cfg.lr_schedule == "plateau":
                lr = schedule(plateau, vloss)
            score = vm.balanced_accuracy
            if score > best_score:
                best_score, best_val, best_epoch = score, vm, epoch
                best_ck = Checkpoint.capture(model, opt, epoch, cfg, rng)
            if vloss < best_vloss:
                best_vloss, stale = vloss, 0
            else:
                stale += 1
        else:
            best_ck = Checkpoint.capture(model, opt, epoch, cfg, rng)
            best_epoch = epoch
        history.append(rec)
        if progress:
            log.info("epoch %d lr %.2e loss %.4f val_ba %s", epoch, lr, rec["train"]["total"],
                     rec.get("val_balanced_accuracy"))
        if len(va_idx) and stale >= cfg.early_stop_patience:
            break
    best_ck.extra.update(split=split.to_dict(), convergence=trace)
    last = Checkpoint.capture(model, opt, len(history), cfg, rng)
    return TrainResult(best_ck, history, trace, split, best_epoch, best_val, last)


def evaluate(checkpoint: Checkpoint, cohort: Sequence[WindowedSample], indices: Sequence[int] | None = None,
             labels: np.ndarray | None = None) -> MetricsReport:
    if indices is not None and len(indices) == 0:
        raise ValueError("evaluation split is empty")
    model = checkpoint.restore()
    X, Y = cohort_arrays(cohort)
    if indices is not None:
        X, Y = X[list(indices)], Y[list(indices)]
    if labels is not None:
        Y = labels
    return compute_metrics(predict(model, X), Y)
