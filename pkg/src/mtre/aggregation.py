"""Sentence-level evidence: per-token log-likelihood ratios summed over a prefix."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .classifier import PCLAMP
from .dataset import DEFAULT_EPSILON, DEFAULT_T_CAP, SentenceRecord, effective_length, pad_mask
from .errors import ConfigError, DataError


@dataclass
class EvidenceTrace:
    llrs: np.ndarray
    cumulative: np.ndarray
    mask: np.ndarray
    tau: int
    decision: int


@dataclass
class DetectionResult:
    sentence_id: str
    score: float
    method: str
    decision: int | None = None
    tau: int | None = None
    trace: EvidenceTrace | None = None

    def to_json(self) -> dict:
        return {
            "id": self.sentence_id,
            "method": self.method,
            "score": float(self.score),
            "decision": None if self.decision is None else int(self.decision),
            "tau": None if self.tau is None else int(self.tau),
        }


def token_llr(p):
    """log(p / (1 - p)); accepts a scalar or an array of clamped probabilities."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr < PCLAMP) or np.any(arr > 1.0 - PCLAMP) or not np.isfinite(arr).all():
        raise ConfigError(f"probability outside [{PCLAMP}, {1 - PCLAMP}]")
    z = np.log(arr) - np.log1p(-arr)
    return float(z) if z.ndim == 0 else z


def masked_cumsum(llrs, mask) -> np.ndarray:
    return np.cumsum(np.asarray(llrs, dtype=np.float64) * np.asarray(mask, dtype=np.float64))


def aggregate_evidence(llrs, mask, tau: int) -> float:
    """Sum of ``mask[t] * llrs[t]`` for t = 1..tau."""
    llrs = np.asarray(llrs, dtype=np.float64)
    mask = np.asarray(mask)
    if llrs.shape != mask.shape:
        raise ConfigError(f"llrs and mask lengths differ ({llrs.shape[0]} vs {mask.shape[0]})")
    if not 1 <= tau <= llrs.shape[0]:
        raise ConfigError(f"tau={tau} outside [1, {llrs.shape[0]}]")
    return float(masked_cumsum(llrs, mask)[tau - 1])


def decide(evidence: float, delta: float = 0.0) -> int:
    """MAP rule: truthful (1) iff evidence >= delta."""
    if not math.isfinite(evidence):
        raise ConfigError(f"evidence must be finite, got {evidence}")
    return int(evidence >= delta)


def sentence_llrs(head, record: SentenceRecord, t_cap: int, temperature: float = 1.0,
                  epsilon: float = DEFAULT_EPSILON) -> tuple[np.ndarray, np.ndarray]:
    """Scaled LLRs and padding mask over the scored window of a sentence.

    Trailing zero-norm rows are dropped before the ``t_cap`` window is taken, so
    appended padding never changes the window.
    """
    if t_cap < 1:
        raise ConfigError(f"t_cap must be >= 1, got {t_cap}")
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    mask = pad_mask(record, epsilon)
    n = max(1, min(effective_length(mask), t_cap))
    mask = mask[:n]
    z = token_llr(head.predict_proba(record.logits[:n])) / temperature
    return np.atleast_1d(z), mask


def classify_sentence(head, record: SentenceRecord, t_cap: int = DEFAULT_T_CAP, temperature: float = 1.0,
                      delta: float = 0.0, epsilon: float = DEFAULT_EPSILON, method: str = "mtre") -> DetectionResult:
    z, mask = sentence_llrs(head, record, t_cap, temperature, epsilon)
    cumulative = masked_cumsum(z, mask)
    tau = len(z)
    score = float(cumulative[tau - 1])
    decision = decide(score, delta)
    trace = EvidenceTrace(llrs=z, cumulative=cumulative, mask=mask, tau=tau, decision=decision)
    return DetectionResult(record.id, score, method, decision, tau, trace)


def classify_all(head, records: Iterable[SentenceRecord], **kwargs) -> list[DetectionResult]:
    return [classify_sentence(head, r, **kwargs) for r in records]


def write_results(results: Iterable[DetectionResult], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_results(path) -> list[DetectionResult]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if not math.isfinite(d["score"]):
                raise DataError(f"non-finite score for {d['id']!r}")
            out.append(DetectionResult(d["id"], d["score"], d["method"], d.get("decision"), d.get("tau")))
    return out
