"""Positionwise KL divergence between hallucinated and truthful next-token distributions."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import DEFAULT_T_CAP, SentenceRecord
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

MEAN_TAG = "mean"
UNGROUPED_TAG = "all"


@dataclass
class KLCurve:
    """Averaged KL per position; ``values[t-1]`` is NaN where a label class has no responses."""

    values: np.ndarray
    pair_counts: np.ndarray
    group_tag: str


def softmax(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kl(p, q) -> float:
    """sum p log(p/q), with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ConfigError(f"distribution lengths differ ({p.shape} vs {q.shape})")
    nz = p > 0
    return max(float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz])))), 0.0)


def _mean_pairwise_kl(logits_p: np.ndarray, logits_q: np.ndarray) -> float:
    """Mean of KL(p_i || q_j) over all pairs, from raw logit rows."""
    lp = log_softmax(logits_p)
    lq = log_softmax(logits_q)
    p = np.exp(lp)
    neg_entropy = np.sum(p * lp, axis=1)
    cross = p @ lq.T
    return float(np.mean(neg_entropy[:, None] - cross))


def _group_curve(records: Sequence[SentenceRecord], t_cap: int, p_label: int, tag: str) -> KLCurve:
    values = np.full(t_cap, np.nan)
    counts = np.zeros(t_cap, dtype=np.int64)
    for t in range(t_cap):
        alive = [r for r in records if r.num_tokens > t]
        rows_p = [r.logits[t] for r in alive if r.label == p_label]
        rows_q = [r.logits[t] for r in alive if r.label != p_label]
        counts[t] = len(rows_p) * len(rows_q)
        if counts[t]:
            values[t] = _mean_pairwise_kl(np.stack(rows_p), np.stack(rows_q))
    return KLCurve(values, counts, tag)


def positionwise_kl_curve(
    records: Sequence[SentenceRecord],
    t_cap: int = DEFAULT_T_CAP,
    p_label: int = 0,
) -> list[KLCurve]:
    """One curve per group tag, followed by their position-wise mean when there are several.

    ``p_label`` is the label whose distributions take the first KL argument;
    the default compares hallucinated (0) against truthful (1). Records without
    a group form one implicit group.
    """
    if t_cap < 1:
        raise ConfigError(f"t_cap must be >= 1, got {t_cap}")
    if p_label not in (0, 1):
        raise ConfigError(f"p_label must be 0 or 1, got {p_label}")
    groups: dict[str, list[SentenceRecord]] = {}
    for r in records:
        groups.setdefault(r.group if r.group is not None else UNGROUPED_TAG, []).append(r)
    curves = []
    for tag in sorted(groups):
        members = groups[tag]
        if len({r.label for r in members}) < 2:
            warnings.warn(f"group {tag!r} lacks one label; skipped")
            continue
        curves.append(_group_curve(members, t_cap, p_label, tag))
    if not curves:
        raise DataError("no group contains both labels")
    if len(curves) == 1:
        return curves
    stacked = np.stack([c.values for c in curves])
    present = ~np.isnan(stacked)
    with np.errstate(invalid="ignore"):
        mean = np.where(present.any(axis=0), np.nansum(stacked, axis=0) / present.sum(axis=0), np.nan)
    counts = np.sum([c.pair_counts for c in curves], axis=0)
    curves.append(KLCurve(mean, counts, MEAN_TAG))
    return curves


def kl_curve_bruteforce(records: Sequence[SentenceRecord], t_cap: int, p_label: int = 0) -> np.ndarray:
    """Double loop over pairs with :func:`kl`; single group only."""
    out = np.full(t_cap, np.nan)
    for t in range(t_cap):
        ps = [softmax(r.logits[t]) for r in records if r.num_tokens > t and r.label == p_label]
        qs = [softmax(r.logits[t]) for r in records if r.num_tokens > t and r.label != p_label]
        if ps and qs:
            out[t] = sum(kl(p, q) for p in ps for q in qs) / (len(ps) * len(qs))
    return out


def largest_increase_position(values) -> int:
    """1-based position t whose step from t-1 is the largest."""
    v = np.asarray(values, dtype=np.float64)
    return int(np.nanargmax(np.diff(v))) + 2


def write_curves_csv(curves: Sequence[KLCurve], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "t", "kl_mean", "pair_count"])
        for c in curves:
            for t, (v, n) in enumerate(zip(c.values, c.pair_counts), 1):
                w.writerow([c.group_tag, t, "" if math.isnan(v) else repr(float(v)), int(n)])
