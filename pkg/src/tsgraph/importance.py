"""Gradient-magnitude importance stacks, node scores, reports and convergence checks."""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class AccumulationError(FloatingPointError):
    pass


class InsufficientDataError(ValueError):
    pass


def init_importance(d: int, s: int) -> np.ndarray:
    """Uniform ones, shaped (s, d, d)."""
    return np.ones((s, d, d))


def accumulate(I: np.ndarray, grad_A: np.ndarray, grad_H: np.ndarray, decay: float = 0.9) -> np.ndarray:
    """EMA of gradient magnitudes.

    Off-diagonal I[t, v, u] tracks |dL/de_vu|; diagonal I[t, v, v] tracks
    ||dL/dh_v||_2. ``grad_A`` is (s, d, d) or sample-resolved (n, s, d, d);
    ``grad_H`` is (s, d, F) or (n, s, d, F). Sample-resolved inputs are
    reduced as the mean magnitude over samples.
    """
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    I = np.asarray(I, dtype=np.float64)
    gA = np.asarray(grad_A, dtype=np.float64)
    gH = np.asarray(grad_H, dtype=np.float64)
    for t in range(I.shape[0]):
        if not (np.all(np.isfinite(gA[..., t, :, :])) and np.all(np.isfinite(gH[..., t, :, :]))):
            raise AccumulationError(f"non-finite gradient in slice {t}")
    edge = np.abs(gA)
    node = np.linalg.norm(gH, axis=-1)
    if edge.ndim == 4:
        edge = edge.mean(axis=0)
    if node.ndim == 3:
        node = node.mean(axis=0)
    d = I.shape[-1]
    fresh = edge.copy()
    idx = np.arange(d)
    fresh[:, idx, idx] = node
    return decay * I + (1.0 - decay) * fresh


def node_importance(I_t: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """alpha * I_vv + (1 - alpha) * mean_{u != v} I_vu for one slice (d, d)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    I_t = np.asarray(I_t, dtype=np.float64)
    d = I_t.shape[-1]
    diag = np.diagonal(I_t, axis1=-2, axis2=-1)
    off = (I_t.sum(-1) - diag) / max(d - 1, 1)
    return alpha * diag + (1.0 - alpha) * off


def importance_matrix(I: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Raw node importance for every window: (d, s)."""
    return node_importance(np.asarray(I), alpha).T


def layerwise_score(layer_grads: Sequence[np.ndarray], K: int | None = None) -> np.ndarray:
    """Sum over GIN layers of the per-node gradient norm.

    Each entry of ``layer_grads`` is (..., d, F); leading sample axes are averaged.
    """
    if K is not None and len(layer_grads) != K:
        raise ValueError(f"expected {K} layer gradients, got {len(layer_grads)}")
    if not layer_grads:
        raise ValueError("need at least one layer")
    score = 0.0
    for g in layer_grads:
        n = np.linalg.norm(np.asarray(g, dtype=np.float64), axis=-1)
        while n.ndim > 1:
            n = n.mean(axis=0)
        score = score + n
    return score


def minmax_features(M: np.ndarray) -> np.ndarray:
    """Min-max across the feature axis (rows) separately for each window column.

    A constant column maps to zeros.
    """
    M = np.asarray(M, dtype=np.float64)
    lo, hi = M.min(axis=0, keepdims=True), M.max(axis=0, keepdims=True)
    span = hi - lo
    out = np.where(span > 0, (M - lo) / np.where(span > 0, span, 1.0), 0.0)
    return out


@dataclass
class ImportanceReport:
    features: list[str]
    scores: np.ndarray              # (d, s) normalised to [0, 1]
    raw: np.ndarray                 # (d, s) before normalisation
    edges: np.ndarray               # (s, d, d) edge weights (off-diagonal of I)
    trace: list[float] = field(default_factory=list)

    @property
    def top(self) -> list[str]:
        return top_features(self.raw, self.features, 10)


def normalize_report(I: np.ndarray, windows: Sequence[int] | None = None, features=None,
                     alpha: float = 0.5, trace=None, smooth_sigma: float | None = None) -> ImportanceReport:
    """Per-window min-max normalised node importance, optionally smoothed along windows."""
    I = np.asarray(I, dtype=np.float64)
    if I.size == 0:
        raise ValueError("empty importance stack")
    if windows is not None:
        I = I[list(windows)]
    d = I.shape[-1]
    features = list(features) if features is not None else [f"f{i}" for i in range(d)]
    raw = importance_matrix(I, alpha)
    if smooth_sigma:
        from scipy.ndimage import gaussian_filter1d
        raw = gaussian_filter1d(raw, smooth_sigma, axis=1, mode="nearest")
    return ImportanceReport(features, minmax_features(raw), raw, I.copy(), list(trace or []))


def top_features(raw: np.ndarray, names: Sequence[str], n: int = 10) -> list[str]:
    """Rank by importance summed over windows; ties go to the lower index."""
    total = np.asarray(raw).sum(axis=1)
    order = sorted(range(len(names)), key=lambda i: (-total[i], i))
    return [names[i] for i in order[:n]]


def peak_window(raw: np.ndarray, feats: Sequence[int] | None = None) -> int:
    """Window with the largest summed raw importance over ``feats`` (all if None)."""
    raw = np.asarray(raw)
    rows = raw if feats is None else raw[list(feats)]
    return int(np.argmax(rows.sum(axis=0)))


# ---------------------------------------------------------------- convergence

def frobenius_delta(prev: np.ndarray, cur: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(cur) - np.asarray(prev)))


@dataclass
class ConvergenceVerdict:
    passed: bool
    slope: float
    last: float
    peak: float


def convergence_check(trace: Sequence[float], window: int = 20) -> ConvergenceVerdict:
    """Least-squares slope of log(delta) over the last ``window`` entries.

    Passes iff the slope is <= 0 and the last delta is at most half the
    largest delta. An all-zero tail counts as converged.
    """
    tr = np.asarray(trace, dtype=np.float64)
    if tr.size < window:
        raise InsufficientDataError(f"need {window} entries, got {tr.size}")
    if np.any(tr < 0):
        raise ValueError("deltas must be non-negative")
    tail = tr[-window:]
    peak, last = float(tr.max()), float(tr[-1])
    if np.all(tail == 0):
        return ConvergenceVerdict(True, 0.0, last, peak)
    floor = np.finfo(float).tiny
    y = np.log(np.maximum(tail, floor))
    x = np.arange(window, dtype=np.float64)
    slope = float(np.polyfit(x, y, 1)[0])
    return ConvergenceVerdict(slope <= 0 and last <= peak / 2, slope, last, peak)


# ---------------------------------------------------------------- export

def report_to_csv(report: ImportanceReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    s = report.scores.shape[1]
    w.writerow(["feature", *(f"window_{t}" for t in range(s))])
    for name, row in zip(report.features, report.scores):
        w.writerow([name, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def parse_report_csv(text: str) -> tuple[list[str], np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))
    names = [r[0] for r in rows[1:]]
    return names, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


GRAY_LEVELS = 100


def window_dot(report: ImportanceReport, t: int, min_edge: float = 0.0) -> str:
    """DOT graph for window t: node width from I_v, edge darkness from I_vu."""
    node = report.raw[:, t]
    E = report.edges[t]
    nmax = node.max() if node.max() > 0 else 1.0
    d = len(report.features)
    off = E[~np.eye(d, dtype=bool)]
    emax = off.max() if off.size and off.max() > 0 else 1.0
    lines = [f"digraph window_{t} {{"]
    for i, name in enumerate(report.features):
        width = 0.3 + 1.2 * node[i] / nmax
        lines.append(f'  "{name}" [importance={float(node[i])!r}, width={width:.4f}];')
    for i in range(d):
        for j in range(d):
            if i == j or E[i, j] <= min_edge:
                continue
            shade = int(round(GRAY_LEVELS * (1.0 - E[i, j] / emax) * 0.9))
            lines.append(f'  "{report.features[i]}" -> "{report.features[j]}" '
                         f'[weight={float(E[i, j])!r}, color="gray{shade}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


_NODE = re.compile(r'^\s*"([^"]+)" \[importance=([^,\]]+),')
_EDGE = re.compile(r'^\s*"([^"]+)" -> "([^"]+)" \[weight=([^,\]]+),')


def parse_dot(text: str):
    """Inverse of :func:`window_dot` for its own output: (node importances, edge weights)."""
    nodes, edges = {}, {}
    for line in text.splitlines():
        m = _EDGE.match(line)
        if m:
            edges[(m.group(1), m.group(2))] = float(m.group(3))
            continue
        m = _NODE.match(line)
        if m:
            nodes[m.group(1)] = float(m.group(2))
    return nodes, edges


def write_report(report: ImportanceReport, out_dir, prefix: str = "importance") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{prefix}.csv"]
    paths[0].write_text(report_to_csv(report))
    for t in range(report.scores.shape[1]):
        p = out / f"{prefix}_window_{t}.dot"
        p.write_text(window_dot(report, t))
        paths.append(p)
    return paths


def smooth_windows(M: np.ndarray, sigma: float = 0.6) -> np.ndarray:
    from scipy.ndimage import gaussian_filter1d
    return gaussian_filter1d(np.asarray(M, dtype=np.float64), sigma, axis=1, mode="nearest")

