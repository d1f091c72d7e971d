"""Cohort ingestion, imputation, windowing, splitting and synthetic cohorts."""

from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .tensor import SeededRng

MISSING = None


class SchemaError(ValueError):
    pass


class InputError(ValueError):
    pass


class FeatureEmptyError(ValueError):
    def __init__(self, feature: str):
        self.feature = feature
        super().__init__(f"feature {feature!r} has no observations")


class TooShortError(ValueError):
    pass


class EmptySubgroupError(ValueError):
    pass


class SpecError(ValueError):
    pass


@dataclass
class RawSeries:
    patient_id: str
    features: list[str]
    observations: dict[str, list[tuple[float, float | None]]]
    statics: dict[str, float] = field(default_factory=dict)
    labels: list[int] = field(default_factory=list)


@dataclass
class DenseSeries:
    patient_id: str
    features: list[str]
    times: np.ndarray
    values: np.ndarray  # (d, L)
    statics: dict[str, float] = field(default_factory=dict)
    labels: list[int] = field(default_factory=list)

    def to_raw(self) -> RawSeries:
        obs = {f: [(float(t), float(v)) for t, v in zip(self.times, self.values[i])]
               for i, f in enumerate(self.features)}
        return RawSeries(self.patient_id, list(self.features), obs, dict(self.statics),
                         list(self.labels))


@dataclass
class WindowedSample:
    """``X`` has shape (d, w, s): features x steps-per-window x windows."""

    X: np.ndarray
    y: np.ndarray
    statics: dict[str, float] = field(default_factory=dict)
    patient_id: str = ""

    @property
    def d(self) -> int:
        return self.X.shape[0]

    @property
    def w(self) -> int:
        return self.X.shape[1]

    @property
    def s(self) -> int:
        return self.X.shape[2]


@dataclass
class CohortSplit:
    train: list[int]
    validation: list[int]
    test: list[int]

    def to_dict(self) -> dict:
        return {"train": self.train, "validation": self.validation, "test": self.test}

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSplit":
        return cls(list(d["train"]), list(d["validation"]), list(d["test"]))


@dataclass
class CsvSchema:
    id_col: str = "patient_id"
    time_col: str = "timestamp"
    feature_col: str = "feature"
    value_col: str = "value"
    static_cols: tuple[str, ...] = ("age", "sex")
    label_prefix: str = "label_"


@dataclass
class IngestStats:
    rows: int = 0
    bad_rows: int = 0
    duplicates: int = 0


# ---------------------------------------------------------------- CSV ingestion

def ingest_csv(path, statics_path=None, schema: CsvSchema | None = None):
    """Read long-format observations (and optional statics/labels) per patient.

    Returns ``(series, stats)``. Empty value cells become missing markers;
    unparseable rows are skipped and counted; a duplicated (feature, timestamp)
    keeps the last occurrence.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InputError(f"{path} is empty")
        need = [schema.id_col, schema.time_col, schema.feature_col, schema.value_col]
        missing = [c for c in need if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        stats = IngestStats()
        obs: dict[str, dict[str, dict[float, float | None]]] = defaultdict(lambda: defaultdict(dict))
        order: list[str] = []
        feat_order: list[str] = []
        for row in reader:
            stats.rows += 1
            try:
                pid = row[schema.id_col].strip()
                t = float(row[schema.time_col])
                feat = row[schema.feature_col].strip()
                raw = (row[schema.value_col] or "").strip()
                val = float(raw) if raw else MISSING
                if not pid or not feat or not math.isfinite(t):
                    raise ValueError
            except (TypeError, ValueError, AttributeError):
                stats.bad_rows += 1
                continue
            if pid not in obs:
                order.append(pid)
            if feat not in feat_order:
                feat_order.append(feat)
            if t in obs[pid][feat]:
                stats.duplicates += 1
            obs[pid][feat][t] = val
    if stats.rows == 0:
        raise InputError(f"{path} has a header but no rows")

    statics, labels = {}, {}
    if statics_path is not None:
        statics, labels = _read_statics(Path(statics_path), schema)

    series = []
    for pid in order:
        per = obs[pid]
        feats = [f for f in feat_order if f in per]
        observations = {f: sorted(per[f].items()) for f in feats}
        series.append(RawSeries(pid, feats, observations, statics.get(pid, {}),
                                labels.get(pid, [])))
    if stats.bad_rows or stats.duplicates:
        warnings.warn(f"{path}: {stats.bad_rows} unparseable row(s), "
                      f"{stats.duplicates} duplicate timestamp(s) (last kept)")
    return series, stats


def _read_statics(path: Path, schema: CsvSchema):
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InputError(f"{path} is empty")
        if schema.id_col not in reader.fieldnames:
            raise SchemaError(f"{path}: missing column {schema.id_col!r}")
        label_cols = sorted((c for c in reader.fieldnames if c.startswith(schema.label_prefix)),
                            key=lambda c: int(c[len(schema.label_prefix):]))
        static_cols = [c for c in reader.fieldnames
                       if c != schema.id_col and c not in label_cols]
        statics, labels = {}, {}
        for row in reader:
            pid = row[schema.id_col].strip()
            statics[pid] = {c: float(row[c]) for c in static_cols if row[c] not in ("", None)}
            labels[pid] = [int(float(row[c])) for c in label_cols]
    return statics, labels


def write_csv(path, series: Sequence[DenseSeries], statics_path=None, schema: CsvSchema | None = None):
    schema = schema or CsvSchema()
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([schema.id_col, schema.time_col, schema.feature_col, schema.value_col])
        for sr in series:
            for i, f in enumerate(sr.features):
                for t, v in zip(sr.times, sr.values[i]):
                    w.writerow([sr.patient_id, repr(float(t)), f, repr(float(v))])
    if statics_path is None:
        return
    keys = sorted({k for sr in series for k in sr.statics})
    n_labels = max((len(sr.labels) for sr in series), default=0)
    with Path(statics_path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([schema.id_col, *keys, *(f"{schema.label_prefix}{c}" for c in range(n_labels))])
        for sr in series:
            w.writerow([sr.patient_id, *(repr(float(sr.statics[k])) for k in keys),
                        *(int(v) for v in sr.labels)])


# ---------------------------------------------------------------- imputation

def impute_resample(raw: RawSeries, interval: float, start: float | None = None,
                    end: float | None = None) -> DenseSeries:
    """Sample every feature on a regular grid using last-observation-carried-forward.

    Grid points before a feature's first observation take that first observed
    value (backward fill). ``end`` acts as the optional outcome-alignment cut:
    observations after it are ignored.
    """
    if not interval > 0:
        raise ValueError(f"interval must be positive, got {interval}")
    cleaned = {}
    for f in raw.features:
        pts = [(t, v) for t, v in raw.observations.get(f, []) if v is not None]
        if end is not None:
            pts = [(t, v) for t, v in pts if t <= end]
        if not pts:
            raise FeatureEmptyError(f)
        cleaned[f] = pts
    all_t = [t for pts in cleaned.values() for t, _ in pts]
    t0 = min(all_t) if start is None else start
    t1 = max(all_t) if end is None else end
    n = int(math.floor((t1 - t0) / interval + 1e-9)) + 1
    grid = t0 + interval * np.arange(n)
    values = np.empty((len(raw.features), n))
    for i, f in enumerate(raw.features):
        ts = np.array([t for t, _ in cleaned[f]])
        vs = np.array([v for _, v in cleaned[f]])
        idx = np.searchsorted(ts, grid + 1e-9, side="right") - 1
        values[i] = vs[np.maximum(idx, 0)]
    return DenseSeries(raw.patient_id, list(raw.features), grid, values,
                       dict(raw.statics), list(raw.labels))


def impute_cohort(raws: Sequence[RawSeries], interval: float, features: Sequence[str] | None = None,
                  length: int | None = None, on_empty: str = "drop_patient") -> list[DenseSeries]:
    """Impute a cohort onto a shared feature list; keep the last ``length`` steps.

    A patient lacking any observation of a required feature is dropped
    (``on_empty="drop_patient"``) or raises (``"raise"``).
    """
    if features is None:
        features = []
        for r in raws:
            features.extend(f for f in r.features if f not in features)
    out = []
    for r in raws:
        sub = RawSeries(r.patient_id, list(features),
                        {f: r.observations.get(f, []) for f in features}, r.statics, r.labels)
        try:
            dense = impute_resample(sub, interval)
        except FeatureEmptyError:
            if on_empty == "raise":
                raise
            warnings.warn(f"dropping patient {r.patient_id}: a feature has no observations")
            continue
        if length is not None:
            if dense.values.shape[1] < length:
                warnings.warn(f"dropping patient {r.patient_id}: fewer than {length} steps")
                continue
            dense.values = dense.values[:, -length:]
            dense.times = dense.times[-length:]
        out.append(dense)
    return out


# ---------------------------------------------------------------- windowing

def window(values: np.ndarray, s: int, y=None, statics=None, patient_id: str = "") -> WindowedSample:
    """Reshape a (d, l) series to (d, l // s, s); trailing remainder steps are dropped."""
    values = np.asarray(values, dtype=np.float64)
    d, l = values.shape
    if s < 1:
        raise ValueError("s must be >= 1")
    if l < s:
        raise TooShortError(f"series length {l} is shorter than {s} windows")
    w = l // s
    X = values[:, : w * s].reshape(d, s, w).transpose(0, 2, 1).copy()
    y = np.zeros(0) if y is None else np.asarray(y, dtype=np.float64)
    return WindowedSample(X, y, dict(statics or {}), patient_id)


def unwindow(X: np.ndarray) -> np.ndarray:
    d, w, s = X.shape
    return X.transpose(0, 2, 1).reshape(d, w * s)


def to_windowed(dense: Sequence[DenseSeries], s: int) -> list[WindowedSample]:
    return [window(ds.values, s, ds.labels, ds.statics, ds.patient_id) for ds in dense]


# ---------------------------------------------------------------- splitting

def stratified_split(labels, ratios=(0.8, 0.1, 0.1), seed: int = 42) -> CohortSplit:
    """Per-patient split stratified on the joint label pattern.

    Each stratum is shuffled with ``seed`` and apportioned by largest remainder,
    so membership is a pure function of (label matrix, ratios, seed).
    """
    Y = np.asarray(labels).astype(int)
    if Y.ndim == 1:
        Y = Y[:, None]
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    for c in range(Y.shape[1]):
        if Y[:, c].sum() < 3:
            warnings.warn(f"label {c} has fewer than 3 positives; stratification is degraded")
    rng = np.random.Generator(np.random.PCG64(seed))
    strata = defaultdict(list)
    for i, row in enumerate(Y):
        strata[tuple(row)].append(i)
    parts: list[list[int]] = [[], [], []]
    for key in sorted(strata):
        members = np.array(strata[key])
        members = members[rng.permutation(len(members))]
        counts = _apportion(len(members), ratios)
        lo = 0
        for p, c in enumerate(counts):
            parts[p].extend(int(i) for i in members[lo:lo + c])
            lo += c
    return CohortSplit(*(sorted(p) for p in parts))


def _apportion(n: int, ratios: np.ndarray) -> list[int]:
    exact = n * ratios
    base = np.floor(exact + 1e-9).astype(int)
    rem = n - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    for j in order[:rem]:
        base[j] += 1
    return [int(b) for b in base]


def exclude_subgroup(cohort: Sequence[WindowedSample], predicate: Callable[[WindowedSample], bool]):
    """Split a cohort into (indices without the subgroup, subgroup indices)."""
    ood = [i for i, smp in enumerate(cohort) if predicate(smp)]
    if not ood:
        raise EmptySubgroupError("predicate selects no patients")
    oset = set(ood)
    return [i for i in range(len(cohort)) if i not in oset], ood


_OPS = {
    ">": lambda a, b: a > b, ">=": lambda a, b: a >= b, "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b, "==": lambda a, b: a == b, "!=": lambda a, b: a != b,
}


def make_predicate(spec: dict, cohort: Sequence[WindowedSample] | None = None):
    """Build a predicate from ``{"field", "op", "value"}``.

    ``field == "time_quartile"`` compares the quartile (0-3) of the static
    ``admit_time`` within ``cohort``. ``{"always": bool}`` gives a constant.
    """
    if "always" in spec:
        val = bool(spec["always"])
        return lambda smp: val
    fld, op, ref = spec["field"], _OPS[spec["op"]], spec["value"]
    if fld == "time_quartile":
        if cohort is None:
            raise ValueError("time_quartile predicates need the cohort")
        times = np.array([smp.statics["admit_time"] for smp in cohort])
        edges = np.quantile(times, [0.25, 0.5, 0.75])
        return lambda smp: op(int(np.searchsorted(edges, smp.statics["admit_time"], side="right")), ref)
    return lambda smp: op(smp.statics[fld], ref)


# ---------------------------------------------------------------- synthetic cohorts

@dataclass
class PlantedRule:
    features: tuple[int, int]
    window: int
    sign: int
    label: int
    subgroup: dict | None = None


@dataclass
class SynthSpec:
    n: int = 2000
    d: int = 8
    length: int = 24
    s: int = 6
    n_labels: int = 3
    rules: list[PlantedRule] = field(default_factory=lambda: [
        PlantedRule((0, 1), 1, 1, 0),
        PlantedRule((2, 3), 3, -1, 1),
        PlantedRule((4, 5), 4, 1, 2),
    ])
    prevalence: list[float] = field(default_factory=lambda: [0.3, 0.25, 0.2])
    noise: float = 0.1
    ar_coef: float = 0.5
    seed: int = 42

    def to_dict(self) -> dict:
        return {"n": self.n, "d": self.d, "length": self.length, "s": self.s,
                "n_labels": self.n_labels, "noise": self.noise, "ar_coef": self.ar_coef,
                "seed": self.seed, "prevalence": list(self.prevalence),
                "rules": [{"features": list(r.features), "window": r.window, "sign": r.sign,
                           "label": r.label, **({"subgroup": r.subgroup} if r.subgroup else {})}
                          for r in self.rules]}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        base = cls()
        rules = d.get("rules")
        return cls(
            n=d.get("n", base.n), d=d.get("d", base.d), length=d.get("length", base.length),
            s=d.get("s", base.s), n_labels=d.get("n_labels", base.n_labels),
            rules=base.rules if rules is None else [
                PlantedRule(tuple(r["features"]), r["window"], r.get("sign", 1), r["label"],
                            r.get("subgroup")) for r in rules],
            prevalence=d.get("prevalence", base.prevalence), noise=d.get("noise", base.noise),
            ar_coef=d.get("ar_coef", base.ar_coef), seed=d.get("seed", base.seed))

    def validate(self):
        if self.length < self.s:
            raise SpecError("length must be at least s")
        if len(self.prevalence) != self.n_labels:
            raise SpecError("one prevalence per label is required")
        if any(not 0.0 < p < 1.0 for p in self.prevalence):
            raise SpecError("prevalences must lie in (0, 1)")
        seen = {}
        for r in self.rules:
            i, j = r.features
            if not (0 <= i < self.d and 0 <= j < self.d) or i == j:
                raise SpecError(f"rule features {r.features} invalid for d={self.d}")
            if not 0 <= r.window < self.s:
                raise SpecError(f"rule window {r.window} out of range for s={self.s}")
            if not 0 <= r.label < self.n_labels:
                raise SpecError(f"rule label {r.label} out of range")
            if r.sign not in (-1, 1):
                raise SpecError("rule sign must be +1 or -1")
            key = (frozenset(r.features), r.window, r.label, repr(r.subgroup))
            if key in seen and seen[key] != r.sign:
                raise SpecError(f"contradictory signs for pair {r.features} in window {r.window}")
            seen[key] = r.sign
        for c in range(self.n_labels):
            feats = {f for r in self.rules if r.label == c for f in r.features}
            if feats and not 2 <= len(feats) <= 4:
                raise SpecError(f"label {c} has {len(feats)} informative features; need 2-4")


def planted_features(spec: SynthSpec, label: int) -> set[int]:
    return {f for r in spec.rules if r.label == label and r.subgroup is None for f in r.features}


def synth_generate(spec: SynthSpec) -> list[WindowedSample]:
    """Generate a cohort whose labels are carried by within-window feature correlations.

    Background series are unit-variance AR(1). For each label a latent score is
    drawn and thresholded at its empirical quantile so the positive count is
    exactly ``round(n * prevalence)``. Positives of a rule get the rule's pair
    driven by one shared latent inside the rule window (correlation
    ``1 / (1 + noise**2)``); negatives get the same marginals, independently.
    """
    spec.validate()
    n, d, L, s, C = spec.n, spec.d, spec.length, spec.s, spec.n_labels
    if n == 0:
        return []
    rng = SeededRng(spec.seed)
    statics = [{"age": float(rng.integers(18, 96)), "sex": float(rng.integers(0, 2)),
                "admit_time": float(rng.random())} for _ in range(n)]
    proto = [WindowedSample(np.zeros((d, 1, 1)), np.zeros(C), st) for st in statics]

    Y = np.zeros((n, C))
    for c, p in enumerate(spec.prevalence):
        score = rng.normal(n)
        k = int(round(n * p))
        if k:
            thresh = np.sort(score)[n - k]
            Y[:, c] = score >= thresh

    phi = spec.ar_coef
    series = np.empty((n, d, L))
    series[:, :, 0] = rng.normal((n, d))
    innov = rng.normal((n, d, L)) * math.sqrt(1 - phi * phi)
    for t in range(1, L):
        series[:, :, t] = phi * series[:, :, t - 1] + innov[:, :, t]

    w = L // s
    scale = 1.0 / math.sqrt(1.0 + spec.noise ** 2)
    membership = []
    for r in spec.rules:
        if r.subgroup is None:
            membership.append(np.ones(n, bool))
        else:
            pred = make_predicate(r.subgroup, proto)
            membership.append(np.array([pred(p) for p in proto]))
    for ri, r in enumerate(spec.rules):
        i, j = r.features
        sl = slice(r.window * w, (r.window + 1) * w)
        # subgroup-specific rules replace the general rules of their label for members
        applies = membership[ri].copy()
        if r.subgroup is None:
            for rj, other in enumerate(spec.rules):
                if other.label == r.label and other.subgroup is not None:
                    applies &= ~membership[rj]
        pos = (Y[:, r.label] == 1) & applies
        neg_ = ~pos
        z = rng.normal((n, w))
        ni, nj = rng.normal((n, w)), rng.normal((n, w))
        xi = (z + spec.noise * ni) * scale
        xj = r.sign * (z + spec.noise * nj) * scale
        ui, uj = rng.normal((n, w)), rng.normal((n, w))
        series[pos, i, sl] = xi[pos]
        series[pos, j, sl] = xj[pos]
        series[neg_, i, sl] = ui[neg_]
        series[neg_, j, sl] = uj[neg_]

    return [window(series[k], s, Y[k], statics[k], f"p{k:05d}") for k in range(n)]


def cohort_arrays(cohort: Sequence[WindowedSample]):
    """Stack a cohort into X (N, d, w, s) and Y (N, C)."""
    X = np.stack([smp.X for smp in cohort])
    Y = np.stack([smp.y for smp in cohort])
    return X, Y


def cohort_to_dense(cohort: Sequence[WindowedSample], interval: float = 1.0) -> list[DenseSeries]:
    out = []
    for smp in cohort:
        vals = unwindow(smp.X)
        out.append(DenseSeries(smp.patient_id, [f"f{i}" for i in range(smp.d)],
                               interval * np.arange(vals.shape[1]), vals, dict(smp.statics),
                               [int(v) for v in smp.y]))
    return out
