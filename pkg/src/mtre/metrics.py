"""Binary classification metrics and the Youden cutoff used by score-based baselines.

Every decision rule here predicts positive when ``score >= threshold``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        y = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if s.shape != y.shape:
            raise DataError(f"scores and labels differ in length ({s.shape[0]} vs {y.shape[0]})")
        if not np.isfinite(s).all():
            raise DataError("scores must be finite")
        if not np.isin(y, (0, 1)).all():
            raise DataError("labels must be binary")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)


def _as_set(scores, labels=None) -> ScoredSet:
    return scores if isinstance(scores, ScoredSet) else ScoredSet(scores, labels)


def _require_both(s: ScoredSet, what: str):
    n1 = int(s.labels.sum())
    n0 = s.labels.shape[0] - n1
    if n0 == 0 or n1 == 0:
        raise DataError(f"{what} needs both labels (got {n0} negatives, {n1} positives)")
    return n0, n1


def auroc(scores, labels=None) -> float:
    """Mann-Whitney AUROC with midranks, so tied pairs count one half."""
    s = _as_set(scores, labels)
    n0, n1 = _require_both(s, "AUROC")
    ranks = rankdata(s.scores)
    u = ranks[s.labels == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n0 * n1))


def auroc_bruteforce(scores, labels=None) -> float:
    s = _as_set(scores, labels)
    _require_both(s, "AUROC")
    pos = s.scores[s.labels == 1]
    neg = s.scores[s.labels == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def _confusion(pred, labels):
    pred = np.asarray(pred).astype(np.int64).reshape(-1)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if pred.shape != labels.shape:
        raise DataError(f"predictions and labels differ in length ({pred.shape[0]} vs {labels.shape[0]})")
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    return tp, fp, fn, tn


def f1(predictions, labels) -> float:
    tp, fp, fn, _ = _confusion(predictions, labels)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def accuracy(predictions, labels) -> float:
    tp, fp, fn, tn = _confusion(predictions, labels)
    n = tp + fp + fn + tn
    if n == 0:
        raise DataError("accuracy of an empty sequence")
    return (tp + tn) / n


def youden_j(scores, labels, threshold: float) -> float:
    s = _as_set(scores, labels)
    n0, n1 = _require_both(s, "Youden index")
    pred = s.scores >= threshold
    tpr = np.sum(pred & (s.labels == 1)) / n1
    fpr = np.sum(pred & (s.labels == 0)) / n0
    return float(tpr - fpr)


def youden_cutoff(scores, labels=None) -> float:
    """Threshold maximizing TPR - FPR over the observed scores and +inf.

    Ties go to the smallest threshold.
    """
    s = _as_set(scores, labels)
    n0, n1 = _require_both(s, "Youden cutoff")
    order = np.argsort(-s.scores, kind="stable")
    sorted_scores = s.scores[order]
    sorted_labels = s.labels[order]
    tps = np.cumsum(sorted_labels)
    fps = np.cumsum(1 - sorted_labels)
    # last index of each run of equal scores, descending
    last = np.flatnonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])
    cands = np.r_[math.inf, sorted_scores[last]]
    j = np.r_[0.0, tps[last] / n1 - fps[last] / n0]
    best = j.max()
    return float(cands[np.flatnonzero(j == best)[-1]])


def average_precision(scores, labels=None) -> float:
    """Step-wise area under the precision-recall curve over distinct thresholds."""
    s = _as_set(scores, labels)
    _, n1 = _require_both(s, "PR-AUC")
    order = np.argsort(-s.scores, kind="stable")
    ys = s.labels[order]
    ss = s.scores[order]
    last = np.flatnonzero(np.r_[ss[1:] != ss[:-1], True])
    tps = np.cumsum(ys)[last]
    fps = np.cumsum(1 - ys)[last]
    precision = tps / (tps + fps)
    recall = tps / n1
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def f1_at_fpr(scores, labels=None, target_fpr: float = 0.1) -> float:
    """F1 at the smallest threshold whose false-positive rate stays within ``target_fpr``."""
    if not 0 <= target_fpr <= 1:
        raise ConfigError(f"target_fpr must lie in [0, 1], got {target_fpr}")
    s = _as_set(scores, labels)
    n0, _ = _require_both(s, "F1 at FPR")
    cands = np.r_[np.unique(s.scores), math.inf]
    for thr in cands:
        if np.sum((s.scores >= thr) & (s.labels == 0)) / n0 <= target_fpr:
            return f1(s.scores >= thr, s.labels)
    return 0.0


def binary_report(method: str, split: str, scores, labels, predictions, threshold: float) -> dict:
    labels = np.asarray(labels)
    return {
        "method": method,
        "split": split,
        "accuracy": accuracy(predictions, labels),
        "f1": f1(predictions, labels),
        "auroc": auroc(scores, labels),
        "threshold": encode_float(threshold),
    }


def encode_float(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return float(x)


def decode_float(x) -> float:
    return float(x)


def format_table(rows: list[dict]) -> str:
    cols = ["method", "split", "accuracy", "f1", "auroc", "threshold"]
    cells = [cols] + [
        [r["method"], r["split"]] + [f"{r[c]:.4f}" for c in ("accuracy", "f1", "auroc")]
        + [r["threshold"] if isinstance(r["threshold"], str) else f"{r['threshold']:.6g}"]
        for r in rows
    ]
    widths = [max(len(str(row[i])) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells)


def write_report(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
