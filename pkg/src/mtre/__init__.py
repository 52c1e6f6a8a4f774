"""Hallucination detection from per-token logit sequences by multi-token evidence aggregation."""

from .aggregation import DetectionResult, classify_sentence, sentence_llrs, token_llr
from .calibration import CalibrationParams, calibrate, classify_sentence_tau, cross_fit
from .classifier import AttentionConfig, TrainConfig, load_head, save_head, train_reliability_head
from .dataset import DatasetMeta, SentenceRecord, build_token_dataset, load_dataset, save_dataset
from .divergence import positionwise_kl_curve
from .errors import ConfigError, DataError, MTREError, NumericError
from .synthgen import SynthConfig, generate

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "CalibrationParams", "ConfigError", "DataError", "DatasetMeta", "DetectionResult",
    "MTREError", "NumericError", "SentenceRecord", "SynthConfig", "TrainConfig", "build_token_dataset",
    "calibrate", "classify_sentence", "classify_sentence_tau", "cross_fit", "generate", "load_dataset",
    "load_head", "positionwise_kl_curve", "save_dataset", "save_head", "sentence_llrs", "token_llr",
    "train_reliability_head",
]
