"""Synthetic logit sequences with a known hallucination onset.

Rows before ``onset`` are a shared per-position base vector plus Gaussian
noise, identical in distribution for both labels. From ``onset`` on, truthful
rows are shifted by ``+signal_strength`` along a seeded unit direction and
hallucinated rows by ``-signal_strength``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ._rng import substream
from .dataset import DatasetMeta, SentenceRecord
from .errors import ConfigError


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 64
    num_sentences: int = 200
    tokens_per_sentence: int | tuple = 10
    onset: int = 1
    signal_strength: float = 3.0
    noise_scale: float = 0.1
    positive_fraction: float = 0.5
    seed: int = 0
    base_scale: float = 1.0
    groups: tuple = ()
    with_relevance: bool = False

    def __post_init__(self):
        lo, hi = self.length_range
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.num_sentences < 1:
            raise ConfigError(f"num_sentences must be >= 1, got {self.num_sentences}")
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid tokens_per_sentence {self.tokens_per_sentence!r}")
        if not 1 <= self.onset <= hi:
            raise ConfigError(f"onset={self.onset} must lie in [1, {hi}] (max tokens per sentence)")
        if self.signal_strength < 0:
            raise ConfigError(f"signal_strength must be >= 0, got {self.signal_strength}")
        if not self.noise_scale > 0:
            raise ConfigError(f"noise_scale must be positive, got {self.noise_scale}")
        if not 0 < self.positive_fraction < 1:
            raise ConfigError(f"positive_fraction must lie in (0, 1), got {self.positive_fraction}")

    @property
    def length_range(self) -> tuple[int, int]:
        t = self.tokens_per_sentence
        if isinstance(t, (list, tuple)):
            return int(t[0]), int(t[1])
        return int(t), int(t)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if isinstance(d.get("tokens_per_sentence"), list):
            d["tokens_per_sentence"] = tuple(d["tokens_per_sentence"])
        if "groups" in d:
            d["groups"] = tuple(d["groups"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth config fields: {sorted(unknown)}")
        return cls(**d)


def _structure(config: SynthConfig):
    rng = substream(config.seed, "structure")
    _, hi = config.length_range
    base = rng.normal(0.0, config.base_scale, size=(hi, config.vocab_size))
    direction = rng.normal(size=config.vocab_size)
    return base, direction / np.linalg.norm(direction)


def _labels(config: SynthConfig) -> np.ndarray:
    n = config.num_sentences
    n_pos = int(round(config.positive_fraction * n))
    if n >= 2:
        n_pos = min(max(n_pos, 1), n - 1)
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_pos] = 1
    return labels[substream(config.seed, "labels").permutation(n)]


def generate_sentence(config: SynthConfig, index: int, label: int, base, direction) -> SentenceRecord:
    """Sentence ``index``; depends only on (seed, index, label), so generation order is irrelevant."""
    rng = substream(config.seed, "sentence", index)
    lo, hi = config.length_range
    n = int(rng.integers(lo, hi + 1)) if hi > lo else hi
    rows = base[:n] + rng.normal(0.0, config.noise_scale, size=(n, config.vocab_size))
    sign = 1.0 if label == 1 else -1.0
    rows[config.onset - 1:] += sign * config.signal_strength * direction
    rows = rows.astype(np.float32)
    probs = np.exp(rows - rows.max(axis=1, keepdims=True))
    cdf = np.cumsum(probs / probs.sum(axis=1, keepdims=True), axis=1)
    u = rng.random(n)
    token_ids = np.minimum((cdf < u[:, None]).sum(axis=1), config.vocab_size - 1)
    relevance = rng.uniform(0.1, 1.0, size=n) if config.with_relevance else None
    group = config.groups[index % len(config.groups)] if config.groups else None
    return SentenceRecord(id=f"s{index:06d}", label=int(label), token_ids=token_ids, logits=rows,
                          group=group, relevance=relevance)


def generate(config: SynthConfig) -> tuple[DatasetMeta, list[SentenceRecord]]:
    base, direction = _structure(config)
    labels = _labels(config)
    meta = DatasetMeta(config.vocab_size, config.length_range[1])
    records = [generate_sentence(config, i, labels[i], base, direction) for i in range(config.num_sentences)]
    return meta, records


def _phi(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def describe(config: SynthConfig) -> dict:
    """Generative ground truth; everything except ``seed`` is independent of the seed."""
    lo, hi = config.length_range
    s, sigma = config.signal_strength, config.noise_scale
    informative_min = max(lo - config.onset + 1, 0)
    informative_max = hi - config.onset + 1
    summary = asdict(config)
    summary["tokens_per_sentence"] = [lo, hi]
    summary["groups"] = list(config.groups)
    summary.update({
        "signal_direction": "seeded unit vector, shared by all sentences",
        "label_dependent_positions": list(range(config.onset, hi + 1)),
        "informative_tokens": [informative_min, informative_max],
        # class means differ by 2s along the direction; noise along it has std sigma
        "bayes_token_auroc": _phi(math.sqrt(2.0) * s / sigma),
        "bayes_first_token_auroc": _phi(math.sqrt(2.0) * s / sigma) if config.onset == 1 else 0.5,
        "bayes_sentence_auroc": _phi(math.sqrt(2.0 * informative_min) * s / sigma),
    })
    return summary
