"""Cross-fitted calibration for early-stopped evidence aggregation.

The pipeline is: out-of-fold LLR collection, a global temperature fitted by
token-broadcast cross-entropy, and a grid search over stopping thresholds
``(c_u, c_b, t_max)``; the head is then retrained on all training sentences.
"""

from __future__ import annotations

import json
import logging
import math
import re
import warnings
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from ._rng import substream
from .aggregation import DetectionResult, decide, masked_cumsum, sentence_llrs
from .classifier import AttentionConfig, TrainConfig, train_reliability_head
from .dataset import (DEFAULT_EPSILON, DEFAULT_T_CAP, FoldAssignment, SentenceRecord, build_token_dataset,
                      split_stratified)
from .errors import ConfigError, DataError
from .metrics import auroc, average_precision, decode_float, encode_float, f1_at_fpr

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOG_C_BRACKET = (math.log(1e-3), math.log(1e3))
GOLDEN_TOL = 1e-6
DECILES = tuple(q / 10 for q in range(1, 10))

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


class CalibrationWarning(UserWarning):
    pass


@dataclass
class OofLlrTable:
    """Out-of-fold token LLRs, one row per (sentence, position).

    ``trained_on`` maps each fold index to the ids its scoring head was trained on.
    """

    sentence_id: list = field(default_factory=list)
    position: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    z: np.ndarray = field(default_factory=lambda: np.zeros(0))
    label: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    fold: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    trained_on: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sentence_id = list(self.sentence_id)
        self.position = np.asarray(self.position, dtype=np.int64)
        self.z = np.asarray(self.z, dtype=np.float64)
        self.label = np.asarray(self.label, dtype=np.int64)
        self.fold = np.asarray(self.fold, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.int8)
        n = len(self.sentence_id)
        if any(a.shape[0] != n for a in (self.position, self.z, self.label, self.fold, self.mask)):
            raise DataError("OOF table columns differ in length")
        if len(set(zip(self.sentence_id, self.position.tolist()))) != n:
            raise DataError("OOF table has duplicate (sentence, position) rows")

    def __len__(self):
        return len(self.sentence_id)

    def concat(self, other: "OofLlrTable") -> "OofLlrTable":
        return OofLlrTable(
            self.sentence_id + other.sentence_id,
            np.r_[self.position, other.position],
            np.r_[self.z, other.z],
            np.r_[self.label, other.label],
            np.r_[self.fold, other.fold],
            np.r_[self.mask, other.mask],
            {**self.trained_on, **other.trained_on},
        )

    def sentences(self) -> list[tuple[str, int, np.ndarray, np.ndarray]]:
        """(id, label, z sequence, mask sequence) per sentence, ordered by position."""
        groups: dict[str, list[int]] = {}
        for i, sid in enumerate(self.sentence_id):
            groups.setdefault(sid, []).append(i)
        out = []
        for sid, rows in groups.items():
            rows = np.asarray(rows)[np.argsort(self.position[rows], kind="stable")]
            out.append((sid, int(self.label[rows[0]]), self.z[rows], self.mask[rows]))
        return out


@dataclass(frozen=True)
class CalibrationParams:
    c_star: float
    c_u: float
    c_b: float
    t_max: int
    objective: str = "auroc"
    k_cv: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if not (self.c_star > 0 and math.isfinite(self.c_star)):
            raise ConfigError(f"c_star must be positive and finite, got {self.c_star}")
        if not self.c_b < 0 < self.c_u:
            raise ConfigError(f"thresholds must satisfy c_b < 0 < c_u, got ({self.c_b}, {self.c_u})")
        if self.t_max < 1:
            raise ConfigError(f"t_max must be >= 1, got {self.t_max}")
        parse_objective(self.objective)

    def to_json(self) -> dict:
        return {
            "c_star": float(self.c_star),
            "c_u": encode_float(self.c_u),
            "c_b": encode_float(self.c_b),
            "t_max": int(self.t_max),
            "objective": self.objective,
            "k_cv": self.k_cv,
            "seed": self.seed,
            "format_version": FORMAT_VERSION,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CalibrationParams":
        missing = {"c_star", "c_u", "c_b", "t_max", "objective", "k_cv", "seed", "format_version"} - set(d)
        if missing:
            raise DataError(f"calibration params missing fields: {sorted(missing)}")
        if d["format_version"] != FORMAT_VERSION:
            raise DataError(f"unsupported calibration format_version {d['format_version']!r}")
        return cls(float(d["c_star"]), decode_float(d["c_u"]), decode_float(d["c_b"]), int(d["t_max"]),
                   d["objective"], d["k_cv"], d["seed"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CalibrationParams":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


_F1_AT_FPR = re.compile(r"^f1_at_fpr(?:\(([0-9.eE+-]+)\))?$")


def parse_objective(objective: str):
    """Return a callable ``(scores, labels) -> float`` for an objective name.

    Names: ``auroc``, ``pr_auc``, ``f1_at_fpr`` or ``f1_at_fpr(0.05)``.
    """
    if objective == "auroc":
        return auroc
    if objective == "pr_auc":
        return average_precision
    m = _F1_AT_FPR.match(objective)
    if m:
        target = float(m.group(1)) if m.group(1) else 0.1
        return lambda s, y: f1_at_fpr(s, y, target)
    raise ConfigError(f"unknown objective {objective!r}")


def _fold_config(config: TrainConfig, fold: int) -> TrainConfig:
    seed = int(substream(config.seed, "fold", fold).integers(0, 2**63 - 1))
    return replace(config, seed=seed)


def collect_oof_llrs(
    records: Sequence[SentenceRecord],
    folds: FoldAssignment,
    train_config: TrainConfig,
    kind: str = "attention",
    t_cap: int = DEFAULT_T_CAP,
    arch: AttentionConfig | None = None,
    initial: OofLlrTable | None = None,
    epsilon: float = DEFAULT_EPSILON,
    heads: list | None = None,
) -> OofLlrTable:
    """Train one head per fold on its complement and score only that fold.

    Trained fold heads are appended to ``heads`` when a list is passed.
    """
    missing = [r.id for r in records if r.id not in folds.fold_of]
    if missing:
        raise ConfigError(f"{len(missing)} sentences have no fold (first: {missing[0]!r})")
    cols = {"sid": [], "pos": [], "z": [], "y": [], "fold": [], "mask": []}
    trained_on = {}
    for j in range(folds.k_cv):
        train = [r for r in records if folds.fold_of[r.id] != j]
        held = [r for r in records if folds.fold_of[r.id] == j]
        labels = {r.label for r in train}
        if labels != {0, 1}:
            raise ConfigError(f"fold {j}: training complement lacks label(s) {sorted({0, 1} - labels)}")
        cfg = _fold_config(train_config, j)
        head = train_reliability_head(build_token_dataset(train, t_cap, cfg.seed), cfg, kind, arch)
        if heads is not None:
            heads.append(head)
        trained_on[j] = frozenset(r.id for r in train)
        for r in held:
            z, mask = sentence_llrs(head, r, t_cap, 1.0, epsilon)
            n = len(z)
            cols["sid"].extend([r.id] * n)
            cols["pos"].extend(range(1, n + 1))
            cols["z"].extend(z.tolist())
            cols["y"].extend([r.label] * n)
            cols["fold"].extend([j] * n)
            cols["mask"].extend(mask.tolist())
    table = OofLlrTable(cols["sid"], cols["pos"], cols["z"], cols["y"], cols["fold"], cols["mask"], trained_on)
    return initial.concat(table) if initial is not None else table


def temperature_objective(z, y, c: float) -> float:
    """Mean token-broadcast BCE of sigmoid(z / c) against labels y."""
    sign = 2.0 * np.asarray(y, dtype=np.float64) - 1.0
    return float(np.mean(np.logaddexp(0.0, -sign * np.asarray(z, dtype=np.float64) / c)))


def golden_section(f, a: float, b: float, tol: float = GOLDEN_TOL) -> float:
    """Minimize a unimodal ``f`` on [a, b] to absolute tolerance ``tol``."""
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def fit_temperature(table: OofLlrTable) -> float:
    """C* minimizing token-broadcast BCE, by golden-section search over log C."""
    keep = table.mask.astype(bool)
    z, y = table.z[keep], table.label[keep]
    if z.size == 0:
        raise ConfigError("cannot fit a temperature on an empty table")
    if len(set(y.tolist())) < 2:
        warnings.warn("single-label OOF table: temperature objective is degenerate", CalibrationWarning)

    def f(u):
        return temperature_objective(z, y, math.exp(u))

    lo, hi = LOG_C_BRACKET
    u = golden_section(f, lo, hi)
    best = min((f(u), u), (f(lo), lo), (f(hi), hi))[1]
    if best - lo <= GOLDEN_TOL or hi - best <= GOLDEN_TOL:
        best = lo if best - lo <= GOLDEN_TOL else hi
        warnings.warn(f"temperature at bracket edge C={math.exp(best):.6g}", CalibrationWarning)
    return math.exp(best)


def early_stop_trace(llrs, c_u: float, c_b: float, t_max: int | None) -> tuple[float, int]:
    """Accumulate LLRs until the running sum leaves (c_b, c_u) or t_max tokens are used."""
    llrs = np.asarray(llrs, dtype=np.float64)
    if not c_b < 0 < c_u:
        raise ConfigError(f"thresholds must satisfy c_b < 0 < c_u, got ({c_b}, {c_u})")
    if llrs.size == 0:
        raise ConfigError("empty LLR sequence")
    cap = llrs.shape[0] if t_max is None or t_max > llrs.shape[0] else int(t_max)
    if cap < 1:
        raise ConfigError(f"t_max must be >= 1, got {t_max}")
    cum = np.cumsum(llrs[:cap])
    hit = np.flatnonzero((cum >= c_u) | (cum <= c_b))
    tau = int(hit[0]) + 1 if hit.size else cap
    return float(cum[tau - 1]), tau


class _EvidenceMatrix:
    """Calibrated, masked OOF sentences packed for vectorized threshold search."""

    def __init__(self, table: OofLlrTable, c_star: float):
        sents = table.sentences()
        self.ids = [s[0] for s in sents]
        self.labels = np.array([s[1] for s in sents], dtype=np.int64)
        self.lengths = np.array([len(s[2]) for s in sents], dtype=np.int64)
        width = int(self.lengths.max())
        self.cum = np.zeros((len(sents), width))
        for i, (_, _, z, m) in enumerate(sents):
            c = masked_cumsum(z / c_star, m)
            self.cum[i, :len(c)] = c
            self.cum[i, len(c):] = c[-1]
        self.rows = np.arange(len(sents))

    @property
    def final(self) -> np.ndarray:
        return self.cum[self.rows, self.lengths - 1]

    def first_crossing(self, c_u: float, c_b: float) -> np.ndarray:
        """1-based first index where the running sum leaves (c_b, c_u); width+1 when never."""
        hit = (self.cum >= c_u) | (self.cum <= c_b)
        any_hit = hit.any(axis=1)
        return np.where(any_hit, hit.argmax(axis=1) + 1, self.cum.shape[1] + 1)

    def stop(self, first: np.ndarray, t_max: int) -> tuple[np.ndarray, np.ndarray]:
        tau = np.minimum(first, np.minimum(self.lengths, t_max))
        return self.cum[self.rows, tau - 1], tau


def default_grid(table: OofLlrTable, c_star: float, t_cap: int) -> list[tuple[float, float, int]]:
    """Deciles of |final OOF evidence| (mirrored for c_b) plus infinities, times t_max in 1..t_cap."""
    final = np.abs(_EvidenceMatrix(table, c_star).final)
    qs = sorted({float(q) for q in np.quantile(final, DECILES) if q > 0})
    uppers = qs + [math.inf]
    lowers = [-q for q in qs] + [-math.inf]
    return [(u, b, t) for u, b, t in product(uppers, lowers, range(1, t_cap + 1))]


def fit_stopping_thresholds(
    table: OofLlrTable,
    c_star: float,
    objective: str = "auroc",
    grid: Iterable[tuple[float, float, int]] | None = None,
    t_cap: int | None = None,
) -> tuple[float, float, int]:
    """Grid triple maximizing the objective on early-stopped OOF evidence.

    Ties prefer smaller mean tau, then smaller c_u, then larger c_b.
    """
    if len(table) == 0:
        raise ConfigError("cannot fit thresholds on an empty table")
    score_fn = parse_objective(objective)
    mat = _EvidenceMatrix(table, c_star)
    if len(set(mat.labels.tolist())) < 2:
        raise ConfigError("threshold search needs both labels in the OOF table")
    if grid is None:
        grid = default_grid(table, c_star, t_cap or int(mat.lengths.max()))
    grid = list(grid)
    if not grid:
        raise ConfigError("empty threshold grid")
    best_key, best = None, None
    crossings = {}
    for c_u, c_b, t_max in grid:
        if not c_b < 0 < c_u or t_max < 1:
            raise ConfigError(f"invalid grid triple {(c_u, c_b, t_max)}")
        if (c_u, c_b) not in crossings:
            crossings[(c_u, c_b)] = mat.first_crossing(c_u, c_b)
        final, tau = mat.stop(crossings[(c_u, c_b)], int(t_max))
        key = (score_fn(final, mat.labels), -float(tau.mean()), -c_u, c_b)
        if best_key is None or key > best_key:
            best_key, best = key, (float(c_u), float(c_b), int(t_max))
    log.info("threshold search: %d triples, best %s objective %.6f", len(grid), best, best_key[0])
    return best


def classify_sentence_tau(head, record: SentenceRecord, params: CalibrationParams,
                          epsilon: float = DEFAULT_EPSILON, method: str = "mtre_tau") -> DetectionResult:
    """Temperature-scaled evidence with early stopping; decides by sign (delta = 0)."""
    z, mask = sentence_llrs(head, record, params.t_max, params.c_star, epsilon)
    score, tau = early_stop_trace(z * mask, params.c_u, params.c_b, params.t_max)
    return DetectionResult(record.id, score, method, decide(score, 0.0), tau)


@dataclass
class CrossFitResult:
    head: object
    params: CalibrationParams
    table: OofLlrTable
    folds: FoldAssignment
    fold_heads: list
    fold_summaries: list


def cross_fit(
    records: Sequence[SentenceRecord],
    k_cv: int = 5,
    train_config: TrainConfig = TrainConfig(),
    kind: str = "attention",
    t_cap: int = DEFAULT_T_CAP,
    objective: str = "auroc",
    arch: AttentionConfig | None = None,
    grid: Iterable[tuple[float, float, int]] | None = None,
    seed: int | None = None,
    epsilon: float = DEFAULT_EPSILON,
) -> CrossFitResult:
    parse_objective(objective)
    seed = train_config.seed if seed is None else seed
    folds = split_stratified(records, k_cv, seed)
    fold_heads: list = []
    table = collect_oof_llrs(records, folds, train_config, kind, t_cap, arch, epsilon=epsilon, heads=fold_heads)
    summaries = []
    for j in range(k_cv):
        rows = table.fold == j
        sub = OofLlrTable([s for s, keep in zip(table.sentence_id, rows) if keep], table.position[rows],
                          table.z[rows], table.label[rows], table.fold[rows], table.mask[rows])
        mat = _EvidenceMatrix(sub, 1.0)
        both = len(set(mat.labels.tolist())) == 2
        summaries.append({
            "fold": j,
            "sentences": len(mat.ids),
            "tokens": int(rows.sum()),
            "auroc": auroc(mat.final, mat.labels) if both else None,
        })
    c_star = fit_temperature(table)
    c_u, c_b, t_max = fit_stopping_thresholds(table, c_star, objective, grid, t_cap)
    head = train_reliability_head(build_token_dataset(records, t_cap, train_config.seed), train_config, kind, arch)
    params = CalibrationParams(c_star, c_u, c_b, t_max, objective, k_cv, seed)
    return CrossFitResult(head, params, table, folds, fold_heads, summaries)


def calibrate(records, k_cv=5, train_config=TrainConfig(), kind="attention", t_cap=DEFAULT_T_CAP,
              objective="auroc", **kwargs):
    """Cross-fit calibration; returns ``(head retrained on all records, CalibrationParams)``."""
    res = cross_fit(records, k_cv, train_config, kind, t_cap, objective, **kwargs)
    return res.head, res.params
