"""Comparison detectors computed from the same logit container.

Each method declares its score orientation in ``ORIENTATION``: +1 when a larger
score means more reliable, -1 when it means less reliable (an uncertainty).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .aggregation import DetectionResult
from .classifier import LinearProbe, TrainConfig, train_reliability_head
from .dataset import DEFAULT_T_CAP, SentenceRecord, TokenExample
from .divergence import log_softmax
from .errors import ConfigError, DataError
from .metrics import youden_cutoff

log = logging.getLogger(__name__)

ORIENTATION = {
    "mtre": 1,
    "mtre_tau": 1,
    "seq_logprob": 1,
    "lp_first_token": 1,
    "p_true": 1,
    "token_sar": -1,
}


@dataclass(frozen=True)
class PTrueConfig:
    true_token_id: int = 0
    false_token_id: int = 1
    answer_position: int = 1

    def __post_init__(self):
        if self.true_token_id == self.false_token_id:
            raise ConfigError("true_token_id and false_token_id must differ")
        if self.answer_position < 1:
            raise ConfigError(f"answer_position must be >= 1, got {self.answer_position}")


def _chosen_logprobs(record: SentenceRecord, t_cap: int) -> np.ndarray:
    if record.token_ids is None or len(record.token_ids) != record.num_tokens:
        raise DataError(f"sentence {record.id!r}: token_ids missing")
    n = min(record.num_tokens, t_cap)
    lp = log_softmax(record.logits[:n])
    return lp[np.arange(n), record.token_ids[:n]]


def seq_logprob(record: SentenceRecord, t_cap: int = DEFAULT_T_CAP) -> float:
    """Length-normalized log-probability of the chosen tokens."""
    return float(np.mean(_chosen_logprobs(record, t_cap)))


def token_sar(record: SentenceRecord, t_cap: int = DEFAULT_T_CAP) -> float:
    """Relevance-weighted token NLL; uniform weights when relevance is absent."""
    nll = -_chosen_logprobs(record, t_cap)
    n = nll.shape[0]
    if record.relevance is None:
        log.debug("sentence %r has no relevance weights; using uniform", record.id)
        return float(np.mean(nll))
    r = np.asarray(record.relevance[:n], dtype=np.float64)
    total = r.sum()
    if not total > 0:
        raise DataError(f"sentence {record.id!r}: relevance weights within the first {n} tokens sum to zero")
    return float(np.sum((r / total) * nll))


def p_true_score(record: SentenceRecord, config: PTrueConfig = PTrueConfig()) -> float:
    """Two-way softmax of the true/false verdict logits at the answer position."""
    t = config.answer_position
    if t > record.num_tokens:
        raise ConfigError(f"sentence {record.id!r}: answer_position {t} beyond {record.num_tokens} tokens")
    row = record.logits[t - 1]
    v = row.shape[0]
    if not (0 <= config.true_token_id < v and 0 <= config.false_token_id < v):
        raise ConfigError("verdict token id outside the vocabulary")
    a = float(row[config.true_token_id])
    b = float(row[config.false_token_id])
    # larger of the two probabilities, always in [0.5, 1]; the complement is then
    # exact, so swapping the verdict tokens gives 1 - p bit for bit
    hi = float(1.0 / (1.0 + np.exp(-abs(a - b))))
    return hi if a >= b else 1.0 - hi


def train_first_token_probe(train_records: Sequence[SentenceRecord], config: TrainConfig) -> LinearProbe:
    labels = {r.label for r in train_records}
    if labels != {0, 1}:
        raise ConfigError("first-token probe needs both labels in the training set")
    examples = [TokenExample(r.logits[0], r.label, r.id, 1) for r in train_records]
    return train_reliability_head(examples, config, kind="probe")


def first_token_probe_with_cutoff(train_records, eval_records, config: TrainConfig):
    """Probe results on ``eval_records`` and the Youden cutoff fitted on training scores."""
    probe = train_first_token_probe(train_records, config)
    train_scores = probe.predict_proba(np.stack([r.logits[0] for r in train_records]))
    cutoff = youden_cutoff(train_scores, [r.label for r in train_records])
    scores = probe.predict_proba(np.stack([r.logits[0] for r in eval_records]))
    results = [DetectionResult(r.id, float(s), "lp_first_token", int(s >= cutoff)) for r, s in zip(eval_records, scores)]
    return results, cutoff


def first_token_probe(train_records, eval_records, config: TrainConfig) -> list[DetectionResult]:
    """Logistic probe on position-1 logits; decisions use the Youden cutoff of training scores."""
    return first_token_probe_with_cutoff(train_records, eval_records, config)[0]


def score_records(method: str, records, t_cap: int = DEFAULT_T_CAP, p_true: PTrueConfig = PTrueConfig()):
    if method == "seq_logprob":
        return np.array([seq_logprob(r, t_cap) for r in records])
    if method == "token_sar":
        missing = sum(r.relevance is None for r in records)
        if missing:
            log.warning("%d of %d sentences lack relevance weights; TokenSAR uses uniform weights for them",
                        missing, len(records))
        return np.array([token_sar(r, t_cap) for r in records])
    if method == "p_true":
        return np.array([p_true_score(r, p_true) for r in records])
    raise ConfigError(f"unknown score-based baseline {method!r}")


def score_baseline_with_cutoff(method: str, train_records, eval_records, t_cap: int = DEFAULT_T_CAP,
                               p_true: PTrueConfig = PTrueConfig()):
    """Like :func:`score_baseline`, also returning the oriented cutoff."""
    sign = ORIENTATION[method]
    train = sign * score_records(method, train_records, t_cap, p_true)
    cutoff = youden_cutoff(train, [r.label for r in train_records])
    raw = score_records(method, eval_records, t_cap, p_true)
    results = [DetectionResult(r.id, float(s), method, int(sign * s >= cutoff)) for r, s in zip(eval_records, raw)]
    return results, cutoff


def score_baseline(method: str, train_records, eval_records, t_cap: int = DEFAULT_T_CAP,
                   p_true: PTrueConfig = PTrueConfig()) -> list[DetectionResult]:
    """Scores on ``eval_records`` with decisions from the Youden cutoff fitted on ``train_records``.

    The cutoff is applied to reliability-oriented scores; stored scores keep their raw sign.
    """
    return score_baseline_with_cutoff(method, train_records, eval_records, t_cap, p_true)[0]
