"""Explanation export, ablation tables and out-of-distribution runs built on :mod:`train`."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import (CohortSplit, EmptySubgroupError, WindowedSample, cohort_arrays, exclude_subgroup,
                   make_predicate, stratified_split)
from .importance import ImportanceReport, accumulate, init_importance, normalize_report, write_report
from .model import ABLATION_FLAGS, Model
from .train import Checkpoint, TrainConfig, TrainResult, compute_metrics, gradient_magnitudes, predict, train

log = logging.getLogger(__name__)

TOP_N = 10


# ---------------------------------------------------------------- explanation

def label_importance(model: Model, X: np.ndarray, Y: np.ndarray, label: int) -> np.ndarray:
    """Importance stack (s, d, d) from one label's BCE gradients alone.

    This is a single accumulation with decay 0, so it reflects the current
    parameters only and carries no history from training.
    """
    ge, gn, _ = gradient_magnitudes(model, X, Y, label=label)
    I0 = init_importance(model.cfg.d, model.cfg.s)
    return accumulate(I0, ge, gn, decay=0.0)


@dataclass
class Explanation:
    overall: ImportanceReport
    per_label: list[ImportanceReport] = field(default_factory=list)
    files: list[Path] = field(default_factory=list)

    def top(self, label: int | None = None, n: int = TOP_N) -> list[str]:
        rep = self.overall if label is None else self.per_label[label]
        return rep.top[:n]


def explain(checkpoint: Checkpoint, cohort: Sequence[WindowedSample] | None, out_dir=None,
            alpha: float = 0.5, smooth_sigma: float | None = None, per_label: bool = True,
            indices: Sequence[int] | None = None, max_samples: int = 512,
            features: Sequence[str] | None = None) -> Explanation:
    """Importance heatmaps, window graphs and top-feature lists for a trained checkpoint.

    The overall report comes from the accumulated stack stored in the
    checkpoint. Per-label reports need ``cohort``: gradients of each label's
    loss are taken on ``indices`` (default: the training split recorded in
    the checkpoint, capped at ``max_samples``).
    """
    model = checkpoint.restore()
    overall = normalize_report(checkpoint.importance, features=features, alpha=alpha,
                               trace=checkpoint.extra.get("convergence"), smooth_sigma=smooth_sigma)
    reports = []
    if per_label and cohort is not None and len(cohort):
        X, Y = cohort_arrays(cohort)
        if indices is None:
            indices = checkpoint.extra.get("split", {}).get("train") or range(len(cohort))
        idx = np.asarray(list(indices), dtype=int)[:max_samples]
        for c in range(model.cfg.n_labels):
            I_c = label_importance(model, X[idx], Y[idx], c)
            reports.append(normalize_report(I_c, features=overall.features, alpha=alpha,
                                            smooth_sigma=smooth_sigma))
    exp = Explanation(overall, reports)
    if out_dir is not None:
        exp.files = write_explanation(exp, out_dir)
    return exp


def write_explanation(exp: Explanation, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = write_report(exp.overall, out, "importance")
    for c, rep in enumerate(exp.per_label):
        files += write_report(rep, out, f"importance_label{c}")
    summary = {"top": exp.overall.top[:TOP_N],
               "per_label_top": [rep.top[:TOP_N] for rep in exp.per_label],
               "convergence": exp.overall.trace}
    p = out / "top_features.json"
    p.write_text(json.dumps(summary, indent=1))
    files.append(p)
    return files


# ---------------------------------------------------------------- ablation

def variant_name(flags: Sequence[str]) -> str:
    return "Ref" if not flags else "w/o " + "+".join(sorted(flags))


def default_flag_sets() -> list[tuple[str, ...]]:
    """Ref plus each module removed alone: 7 variants."""
    return [()] + [(f,) for f in ABLATION_FLAGS]


@dataclass
class AblationRow:
    name: str
    flags: tuple[str, ...]
    seeds: list[int]
    balanced_accuracy: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.balanced_accuracy))

    @property
    def std(self) -> float:
        return float(np.std(self.balanced_accuracy))


@dataclass
class AblationTable:
    rows: list[AblationRow]
    split: str = "test"

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"split": self.split,
                "rows": [{"name": r.name, "flags": list(r.flags), "seeds": r.seeds,
                          "balanced_accuracy": r.balanced_accuracy, "mean": r.mean, "std": r.std}
                         for r in self.rows]}

    def to_text(self) -> str:
        lines = [f"{'variant':<14}{'mean':>8}{'std':>8}  per-seed ({self.split} balanced accuracy)"]
        for r in self.rows:
            per = " ".join(f"{v:.3f}" for v in r.balanced_accuracy)
            lines.append(f"{r.name:<14}{r.mean:>8.4f}{r.std:>8.4f}  {per}")
        return "\n".join(lines)


def split_score(result: TrainResult, cohort: Sequence[WindowedSample], which: str = "test") -> float:
    """Balanced accuracy of the selected checkpoint on one split of the run."""
    if which == "validation" and result.best_val is not None:
        return result.best_val.balanced_accuracy
    idx = getattr(result.split, which)
    X, Y = cohort_arrays([cohort[i] for i in idx])
    return compute_metrics(predict(result.checkpoint.restore(), X), Y).balanced_accuracy


def with_flags(cfg: TrainConfig, flags: Sequence[str]) -> TrainConfig:
    d = cfg.to_dict()
    d["model"]["ablate"] = sorted(set(flags))
    return TrainConfig.from_dict(d)


def ablate(cfg: TrainConfig, flag_sets: Sequence[Sequence[str]] | None = None,
           seeds: Sequence[int] | None = None, cohort: Sequence[WindowedSample] | None = None,
           split: str = "test", cache: dict | None = None,
           on_run: Callable[[str, int, TrainResult], None] | None = None) -> AblationTable:
    """Train every flag set on the same seeds and tabulate balanced accuracy.

    ``cache`` maps ``(variant name, seed)`` to finished :class:`TrainResult`
    objects; hits are reused and misses are added, so a caller can share runs
    between analyses.
    """
    from .train import load_cohort
    flag_sets = default_flag_sets() if flag_sets is None else [tuple(sorted(set(f))) for f in flag_sets]
    seeds = list(cfg.seeds if seeds is None else seeds)
    if cohort is None:
        cohort = load_cohort(cfg)
    cache = {} if cache is None else cache
    rows = []
    for flags in flag_sets:
        name = variant_name(flags)
        scores = []
        for seed in seeds:
            key = (name, seed)
            if key not in cache:
                run_cfg = with_flags(cfg, flags).with_seed(seed)
                cache[key] = train(run_cfg, cohort)
                if on_run is not None:
                    on_run(name, seed, cache[key])
            scores.append(split_score(cache[key], cohort, split))
        rows.append(AblationRow(name, flags, seeds, scores))
        log.info("%s: %.4f", name, rows[-1].mean)
    return AblationTable(rows, split)


# ---------------------------------------------------------------- out-of-distribution

@dataclass
class OODRow:
    name: str
    n_source: int
    n_ood: int
    in_distribution: float
    ood: float

    def to_dict(self) -> dict:
        return {"name": self.name, "n_source": self.n_source, "n_ood": self.n_ood,
                "in_distribution_balanced_accuracy": self.in_distribution,
                "ood_balanced_accuracy": self.ood}


def ood_split(cohort: Sequence[WindowedSample], predicate, ratios=(0.8, 0.1, 0.1), seed: int = 42):
    """Source split (global indices) with the subgroup removed, plus the subgroup itself."""
    source, ood = exclude_subgroup(cohort, predicate)
    if not source:
        raise ValueError("predicate selects every patient; nothing left to train on")
    _, Y = cohort_arrays([cohort[i] for i in source])
    local = stratified_split(Y, ratios, seed=seed)
    src = np.asarray(source)
    split = CohortSplit(src[local.train].tolist(), src[local.validation].tolist(), src[local.test].tolist())
    return split, ood


def ood_run(cfg: TrainConfig, predicates: dict[str, dict], cohort: Sequence[WindowedSample] | None = None,
            seed: int | None = None) -> list[OODRow]:
    """For each named predicate: train without the subgroup, then score its test split and the subgroup."""
    from .train import load_cohort
    if cohort is None:
        cohort = load_cohort(cfg)
    run_cfg = cfg if seed is None else cfg.with_seed(seed)
    rows = []
    for name, spec in predicates.items():
        pred = make_predicate(spec, cohort)
        try:
            split, ood = ood_split(cohort, pred, run_cfg.split_ratios, run_cfg.seed)
        except EmptySubgroupError:
            warnings.warn(f"subgroup {name!r} is empty; row skipped")
            continue
        res = train(run_cfg, cohort, split)
        model = res.checkpoint.restore()
        X, Y = cohort_arrays(cohort)
        ind = compute_metrics(predict(model, X[split.test]), Y[split.test]).balanced_accuracy
        out = compute_metrics(predict(model, X[ood]), Y[ood]).balanced_accuracy
        rows.append(OODRow(name, len(cohort) - len(ood), len(ood), ind, out))
    return rows
