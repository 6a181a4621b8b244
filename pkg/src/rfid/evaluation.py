"""Exact-match scoring, rationale metrics and dataset-level evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .data import CompatibilityError, QAExample, Vocabulary, encode_target, format_input, normalize_answer, tokenize
from .model import AttentionTrace, RFiDModel, traces_from_maps


def exact_match(prediction: str, golds: Sequence[str]) -> bool:
    if not golds:
        raise ValueError("golds must be non-empty")
    pred = normalize_answer(prediction)
    return any(pred == normalize_answer(g) for g in golds)


@dataclass
class EncodedCorpus:
    """Token arrays for a list of examples under one vocabulary and config."""
    enc_ids: np.ndarray  # (N, K, L)
    enc_mask: np.ndarray  # (N, K, L)
    dec_in: np.ndarray  # (N, T)
    gold: np.ndarray  # (N, T)
    labels: np.ndarray  # (N, K)

    def __len__(self):
        return len(self.enc_ids)

    def batch(self, idx):
        return (torch.from_numpy(self.enc_ids[idx]), torch.from_numpy(self.enc_mask[idx]),
                torch.from_numpy(self.dec_in[idx]), torch.from_numpy(self.gold[idx]),
                torch.from_numpy(self.labels[idx]))


def encode_corpus(examples: Sequence[QAExample], vocab: Vocabulary, K: int, L: int, max_target_len: int) -> EncodedCorpus:
    check_compatible(examples, K)
    N = len(examples)
    enc_ids = np.zeros((N, K, L), dtype=np.int64)
    enc_mask = np.zeros((N, K, L), dtype=bool)
    dec_in = np.zeros((N, max_target_len), dtype=np.int64)
    gold = np.zeros((N, max_target_len), dtype=np.int64)
    labels = np.zeros((N, K), dtype=np.int64)
    for i, ex in enumerate(examples):
        for k, p in enumerate(ex.passages):
            pair = tokenize(format_input(ex.question, p), vocab, L)
            enc_ids[i, k] = pair.ids
            enc_mask[i, k] = pair.attention_mask
        dec_in[i], gold[i] = encode_target(ex.answers[0], vocab, max_target_len)
        labels[i] = ex.labels
    return EncodedCorpus(enc_ids, enc_mask, dec_in, gold, labels)


def check_compatible(examples: Sequence[QAExample], K: int, vocab: Optional[Vocabulary] = None,
                     model_vocab_size: Optional[int] = None) -> None:
    """Raise CompatibilityError naming the first field that disagrees."""
    for ex in examples:
        if ex.K != K:
            raise CompatibilityError(f"K mismatch: example {ex.id} has {ex.K} passages, model expects K={K}")
    if vocab is not None and model_vocab_size is not None and len(vocab) != model_vocab_size:
        raise CompatibilityError(f"vocab mismatch: vocabulary has {len(vocab)} tokens, model expects {model_vocab_size}")


@dataclass
class Prediction:
    id: str
    answer: str
    rationale_preds: list
    trace: Optional[AttentionTrace] = None


def predict(model: RFiDModel, examples: Sequence[QAExample], vocab: Vocabulary, batch_size: int = 64,
            trace: bool = False, encoded: Optional[EncodedCorpus] = None) -> list[Prediction]:
    """Greedy answers and rationale predictions, optionally with attention traces."""
    cfg = model.cfg
    if encoded is None:
        encoded = encode_corpus(examples, vocab, cfg.K, cfg.L, cfg.max_target_len)
    was_training = model.training
    model.eval()
    out = []
    try:
        for start in range(0, len(examples), batch_size):
            idx = np.arange(start, min(start + batch_size, len(examples)))
            enc_ids, enc_mask = torch.from_numpy(encoded.enc_ids[idx]), torch.from_numpy(encoded.enc_mask[idx])
            generated, _, preds, maps, lengths = model.greedy_decode(enc_ids, enc_mask, trace=trace)
            traces = traces_from_maps(maps, lengths, cfg.K, cfg.L, cfg.guide_decoder) if trace else [None] * len(idx)
            for j, i in enumerate(idx):
                ex = examples[i]
                out.append(Prediction(ex.id, " ".join(vocab.decode(generated[j])), preds[j].tolist(), traces[j]))
    finally:
        model.train(was_training)
    return out


@dataclass
class EvalReport:
    exact_match: float
    ratn_accuracy: float
    ratn_precision: float
    ratn_recall: float
    n_questions: int
    records: list = field(default_factory=list)

    def to_dict(self, with_records: bool = False) -> dict:
        d = asdict(self)
        if not with_records:
            d.pop("records")
        return d

    def to_json(self, with_records: bool = False) -> str:
        return json.dumps(self.to_dict(with_records), indent=2)


def rationale_counts(records) -> dict:
    tp = fp = tn = fn = 0
    for r in records:
        for p, b in zip(r["rationale_preds"], r["labels"]):
            if p and b:
                tp += 1
            elif p:
                fp += 1
            elif b:
                fn += 1
            else:
                tn += 1
    return {"tp": tp, "fp": fp, "tn": tn, "fn": fn}


def report_from_predictions(examples: Sequence[QAExample], predictions: Sequence[Prediction]) -> EvalReport:
    by_id = {p.id: p for p in predictions}
    records = []
    for ex in sorted(examples, key=lambda e: e.id):
        p = by_id[ex.id]
        records.append({"id": ex.id, "prediction": p.answer, "em": int(exact_match(p.answer, ex.answers)),
                        "rationale_preds": [int(x) for x in p.rationale_preds], "labels": [int(b) for b in ex.labels]})
    n = len(records)
    c = rationale_counts(records)
    total = sum(c.values())
    return EvalReport(
        exact_match=sum(r["em"] for r in records) / n if n else 0.0,
        ratn_accuracy=(c["tp"] + c["tn"]) / total if total else 0.0,
        ratn_precision=c["tp"] / (c["tp"] + c["fp"]) if c["tp"] + c["fp"] else 0.0,
        ratn_recall=c["tp"] / (c["tp"] + c["fn"]) if c["tp"] + c["fn"] else 0.0,
        n_questions=n,
        records=records,
    )


def evaluate(examples: Sequence[QAExample], model: RFiDModel, vocab: Vocabulary, batch_size: int = 64,
             encoded: Optional[EncodedCorpus] = None) -> EvalReport:
    check_compatible(examples, model.cfg.K, vocab, model.cfg.vocab_size)
    preds = predict(model, examples, vocab, batch_size=batch_size, encoded=encoded)
    return report_from_predictions(examples, preds)
