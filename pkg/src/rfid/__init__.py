"""Fusion-in-decoder reader with per-passage rationale classification and
rationale-embedding guidance of the decoder."""

from .analysis import CARatioReport, ca_ratio, case_report, passage_cross_attention
from .data import (MatchPolicy, Passage, QAExample, SynthesisConfig, Vocabulary, format_input,
                   generate_synthetic_corpus, label_rationale, load_corpus, normalize_answer, tokenize)
from .estimator import RFiDReader
from .evaluation import EvalReport, evaluate, exact_match
from .model import AttentionTrace, ModelConfig, RFiDModel, load_checkpoint, save_checkpoint
from .training import LossBreakdown, TrainConfig, Variant, gradient_check, total_loss, train

__all__ = [
    "AttentionTrace", "CARatioReport", "EvalReport", "LossBreakdown", "MatchPolicy", "ModelConfig", "Passage",
    "QAExample", "RFiDModel", "RFiDReader", "SynthesisConfig", "TrainConfig", "Variant", "Vocabulary",
    "ca_ratio", "case_report", "evaluate", "exact_match", "format_input", "generate_synthetic_corpus",
    "gradient_check", "label_rationale", "load_checkpoint", "load_corpus", "normalize_answer",
    "passage_cross_attention", "save_checkpoint", "tokenize", "total_loss", "train",
]
