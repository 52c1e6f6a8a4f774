"""Logit-sequence container: on-disk format, validation, token flattening, folds.

A dataset directory holds three files::

    meta.json        {"vocab_size", "max_tokens", "value_encoding", "format_version"}
    manifest.jsonl   one sentence per line, with a byte_offset into logits.bin
    logits.bin       float32 little-endian rows, token-major within a sentence
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._rng import substream
from .errors import ConfigError, DataError

FORMAT_VERSION = 1
VALUE_ENCODINGS = ("f32le",)
DEFAULT_EPSILON = 1e-8
DEFAULT_T_CAP = 10

META_FILE = "meta.json"
MANIFEST_FILE = "manifest.jsonl"
LOGITS_FILE = "logits.bin"

_F32LE = np.dtype("<f4")


@dataclass(frozen=True)
class DatasetMeta:
    vocab_size: int
    max_tokens: int
    value_encoding: str = "f32le"

    def __post_init__(self):
        if int(self.vocab_size) < 2:
            raise DataError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if int(self.max_tokens) < 1:
            raise DataError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.value_encoding not in VALUE_ENCODINGS:
            raise DataError(f"unknown value_encoding {self.value_encoding!r}")

    @property
    def row_bytes(self) -> int:
        return self.vocab_size * _F32LE.itemsize

    def to_json(self) -> dict:
        return {
            "vocab_size": int(self.vocab_size),
            "max_tokens": int(self.max_tokens),
            "value_encoding": self.value_encoding,
            "format_version": FORMAT_VERSION,
        }


@dataclass(eq=False)
class SentenceRecord:
    """One model response.

    ``logits`` has shape (T, vocab_size) and is kept as float32 so a
    save/load cycle is bit-exact. ``label`` is 1 for truthful, 0 for
    hallucinated.
    """

    id: str
    label: int
    token_ids: np.ndarray
    logits: np.ndarray
    group: str | None = None
    relevance: np.ndarray | None = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float32)
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64).reshape(-1)
        if self.relevance is not None:
            self.relevance = np.asarray(self.relevance, dtype=np.float64).reshape(-1)

    @property
    def num_tokens(self) -> int:
        return int(self.logits.shape[0])

    def __eq__(self, other):
        if not isinstance(other, SentenceRecord):
            return NotImplemented
        if (self.id, self.label, self.group) != (other.id, other.label, other.group):
            return False
        if (self.relevance is None) != (other.relevance is None):
            return False
        if self.relevance is not None and not np.array_equal(self.relevance, other.relevance):
            return False
        return (
            np.array_equal(self.token_ids, other.token_ids)
            and self.logits.shape == other.logits.shape
            and self.logits.tobytes() == other.logits.tobytes()
        )

    def validate(self, meta: DatasetMeta) -> None:
        if self.label not in (0, 1):
            raise DataError(f"sentence {self.id!r}: label must be 0 or 1, got {self.label!r}")
        if self.logits.ndim != 2 or self.logits.shape[1] != meta.vocab_size:
            raise DataError(
                f"sentence {self.id!r}: logits shape {self.logits.shape} "
                f"does not match vocab_size {meta.vocab_size}"
            )
        t = self.num_tokens
        if not 1 <= t <= meta.max_tokens:
            raise DataError(f"sentence {self.id!r}: {t} tokens outside [1, {meta.max_tokens}]")
        if self.token_ids.shape[0] != t:
            raise DataError(f"sentence {self.id!r}: {self.token_ids.shape[0]} token ids for {t} logit rows")
        bad = (self.token_ids < 0) | (self.token_ids >= meta.vocab_size)
        if bad.any():
            pos = int(np.argmax(bad)) + 1
            raise DataError(f"sentence {self.id!r}: token id out of range at token {pos}")
        finite = np.isfinite(self.logits).all(axis=1)
        if not finite.all():
            pos = int(np.argmin(finite)) + 1
            raise DataError(f"sentence {self.id!r}: non-finite logit at token {pos}")
        if self.relevance is not None:
            r = self.relevance
            if r.shape[0] != t:
                raise DataError(f"sentence {self.id!r}: {r.shape[0]} relevance weights for {t} tokens")
            if not np.isfinite(r).all() or (r < 0).any() or not (r > 0).any():
                raise DataError(
                    f"sentence {self.id!r}: relevance must be finite, non-negative, with a positive entry"
                )


@dataclass(frozen=True)
class TokenExample:
    features: np.ndarray
    label: int
    sentence_id: str
    position: int


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: dict
    k_cv: int
    seed: int

    def members(self, fold: int) -> list[str]:
        return [sid for sid, f in self.fold_of.items() if f == fold]


def _check_unique_ids(records: Sequence[SentenceRecord]) -> None:
    seen = set()
    for r in records:
        if r.id in seen:
            raise DataError(f"duplicate sentence id {r.id!r}")
        seen.add(r.id)


def validate_records(meta: DatasetMeta, records: Sequence[SentenceRecord]) -> None:
    _check_unique_ids(records)
    for r in records:
        r.validate(meta)


def save_dataset(meta: DatasetMeta, records: Sequence[SentenceRecord], root_path) -> None:
    """Write ``records`` under ``root_path``. Everything is validated before any file is touched."""
    records = list(records)
    validate_records(meta, records)
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)

    lines = []
    offset = 0
    for r in records:
        lines.append(
            json.dumps(
                {
                    "id": r.id,
                    "label": int(r.label),
                    "group": r.group,
                    "num_tokens": r.num_tokens,
                    "byte_offset": offset,
                    "token_ids": [int(t) for t in r.token_ids],
                    "relevance": None if r.relevance is None else [float(x) for x in r.relevance],
                }
            )
        )
        offset += r.num_tokens * meta.row_bytes

    with open(root / LOGITS_FILE, "wb") as fh:
        for r in records:
            fh.write(np.ascontiguousarray(r.logits, dtype=_F32LE).tobytes())
    with open(root / MANIFEST_FILE, "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))
    with open(root / META_FILE, "w", encoding="utf-8") as fh:
        json.dump(meta.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_meta(root: Path) -> DatasetMeta:
    path = root / META_FILE
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if raw.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format_version {raw.get('format_version')!r}")
    try:
        return DatasetMeta(int(raw["vocab_size"]), int(raw["max_tokens"]), str(raw["value_encoding"]))
    except KeyError as exc:
        raise DataError(f"{path}: missing field {exc.args[0]!r}") from None


def load_dataset(root_path) -> tuple[DatasetMeta, list[SentenceRecord]]:
    """Load and validate a dataset directory; logits are read-only views of a memory map."""
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    meta = _read_meta(root)
    manifest_path = root / MANIFEST_FILE
    logits_path = root / LOGITS_FILE
    for p in (manifest_path, logits_path):
        if not p.is_file():
            raise DataError(f"missing file: {p}")

    size = os.path.getsize(logits_path)
    if size % meta.row_bytes:
        raise DataError(
            f"{logits_path}: size {size} is not a multiple of the row size "
            f"{meta.row_bytes} (vocab_size {meta.vocab_size})"
        )
    if size:
        blob = np.memmap(logits_path, dtype=_F32LE, mode="r")
    else:
        blob = np.zeros(0, dtype=_F32LE)

    entries = []
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{manifest_path}:{lineno}: invalid JSON ({exc})") from None

    regions = []
    for e in entries:
        sid = e.get("id")
        try:
            n = int(e["num_tokens"])
            off = int(e["byte_offset"])
        except (KeyError, TypeError, ValueError):
            raise DataError(f"sentence {sid!r}: manifest row lacks num_tokens/byte_offset") from None
        end = off + n * meta.row_bytes
        if off < 0 or end > size:
            raise DataError(
                f"sentence {sid!r}: byte region [{off}, {end}) out of bounds "
                f"for {LOGITS_FILE} of {size} bytes"
            )
        if off % meta.row_bytes:
            raise DataError(f"sentence {sid!r}: byte_offset {off} not aligned to row size {meta.row_bytes}")
        regions.append((off, end, sid))
    for (a0, a1, aid), (b0, b1, bid) in zip(sorted(regions), sorted(regions)[1:]):
        if b0 < a1:
            raise DataError(f"sentence {aid!r}: byte region [{a0}, {a1}) overlaps sentence {bid!r} at byte offset {b0}")

    records = []
    for e, (off, end, sid) in zip(entries, regions):
        n = int(e["num_tokens"])
        start = off // _F32LE.itemsize
        logits = blob[start:start + n * meta.vocab_size].reshape(n, meta.vocab_size)
        finite = np.isfinite(logits).all(axis=1)
        if not finite.all():
            t = int(np.argmin(finite))
            raise DataError(
                f"sentence {sid!r}: non-finite logit at token {t + 1} (byte offset {off + t * meta.row_bytes})"
            )
        token_ids = e.get("token_ids")
        if token_ids is None:
            raise DataError(f"sentence {sid!r}: missing token_ids")
        rec = SentenceRecord(
            id=str(sid),
            label=e.get("label"),
            group=e.get("group"),
            token_ids=np.asarray(token_ids, dtype=np.int64),
            logits=logits,
            relevance=None if e.get("relevance") is None else np.asarray(e["relevance"], dtype=np.float64),
        )
        try:
            rec.validate(meta)
        except DataError as exc:
            raise DataError(f"{exc} (byte offset {off})") from None
        records.append(rec)
    _check_unique_ids(records)
    return meta, records


def build_token_dataset(records: Iterable[SentenceRecord], t_cap: int = DEFAULT_T_CAP, seed: int = 0) -> list[TokenExample]:
    """Flatten sentences into (logit row, sentence label) pairs and shuffle them."""
    if t_cap < 1:
        raise ConfigError(f"t_cap must be >= 1, got {t_cap}")
    examples = []
    for r in records:
        for t in range(min(r.num_tokens, t_cap)):
            examples.append(TokenExample(r.logits[t], int(r.label), r.id, t + 1))
    order = substream(seed, "shuffle").permutation(len(examples))
    return [examples[i] for i in order]


def stack_examples(examples: Sequence[TokenExample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([np.asarray(e.features, dtype=np.float64) for e in examples])
    y = np.array([e.label for e in examples], dtype=np.float64)
    return x, y


def pad_mask(record: SentenceRecord, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """1 where the row's L2 norm strictly exceeds ``epsilon``."""
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    norms = np.linalg.norm(np.asarray(record.logits, dtype=np.float64), axis=1)
    return (norms > epsilon).astype(np.int8)


def effective_length(mask: np.ndarray) -> int:
    """Length after stripping trailing padded rows."""
    nz = np.flatnonzero(mask)
    return int(nz[-1]) + 1 if nz.size else 0


def split_stratified(records: Sequence[SentenceRecord], k_cv: int, seed: int = 0) -> FoldAssignment:
    """Stratified fold assignment: each label is dealt round-robin over a seeded permutation."""
    if k_cv < 2:
        raise ConfigError(f"K_cv must be >= 2, got {k_cv}")
    rng = substream(seed, "split")
    fold_of = {}
    cursor = 0
    for label in (0, 1):
        ids = [r.id for r in records if r.label == label]
        if len(ids) < k_cv:
            raise ConfigError(f"only {len(ids)} sentences with label {label}; need at least K_cv={k_cv}")
        for j, i in enumerate(rng.permutation(len(ids))):
            fold_of[ids[i]] = (cursor + j) % k_cv
        cursor = (cursor + len(ids)) % k_cv
    fold_of = {r.id: fold_of[r.id] for r in records}
    return FoldAssignment(fold_of=fold_of, k_cv=k_cv, seed=seed)


def append_padding(record: SentenceRecord, n_rows: int) -> SentenceRecord:
    """Copy of ``record`` with ``n_rows`` all-zero logit rows appended."""
    v = record.logits.shape[1]
    rel = record.relevance
    if rel is not None:
        rel = np.concatenate([rel, np.zeros(n_rows)])
    return SentenceRecord(
        id=record.id,
        label=record.label,
        group=record.group,
        token_ids=np.concatenate([record.token_ids, np.zeros(n_rows, dtype=np.int64)]),
        logits=np.concatenate([record.logits, np.zeros((n_rows, v), dtype=np.float32)]),
        relevance=rel,
    )
