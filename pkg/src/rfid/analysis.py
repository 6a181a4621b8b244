"""Decoder cross-attention attribution to passages: per-passage mass, the
positive/negative ratio and per-question case reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import QAExample, Vocabulary
from .evaluation import check_compatible, predict
from .model import AttentionTrace, RFiDModel


def _check_passage(trace: AttentionTrace, k: int) -> None:
    if not 0 <= k < trace.K:
        raise IndexError(f"passage index {k} out of range for K={trace.K}")


def passage_cross_attention(trace: AttentionTrace, k: int) -> float:
    """Attention mass on passage ``k``'s L token positions.

    Heads are averaged; layers, generated steps and positions are summed.
    The appended rationale-embedding slot is not included.
    """
    _check_passage(trace, k)
    start = k * trace.block_len
    return float(trace.ca[:, :, :, start:start + trace.L].mean(axis=1).sum())


def guidance_attention(trace: AttentionTrace, k: int) -> float:
    """Head-averaged mass on passage ``k``'s rationale-embedding slot (0 when unguided)."""
    _check_passage(trace, k)
    if not trace.guided:
        return 0.0
    return float(trace.ca[:, :, :, k * trace.block_len + trace.L].mean(axis=1).sum())


@dataclass
class QuestionAttention:
    id: str
    labels: list
    ca: list
    guidance: list

    @property
    def n_pos(self) -> int:
        return sum(self.labels)


def question_attention(qid: str, labels: Sequence[bool], trace: AttentionTrace) -> QuestionAttention:
    return QuestionAttention(qid, [int(b) for b in labels],
                             [passage_cross_attention(trace, k) for k in range(trace.K)],
                             [guidance_attention(trace, k) for k in range(trace.K)])


@dataclass
class CARatioReport:
    mean_CA_pos: Optional[float]
    mean_CA_neg: Optional[float]
    r_pos_neg: Optional[float]
    N_q: int
    n_pos_eligible: int
    n_neg_eligible: int
    excluded_no_pos: int
    excluded_no_neg: int
    null_reason: Optional[str] = None
    rows: list = field(default_factory=list)

    def to_dict(self, with_rows: bool = True) -> dict:
        d = asdict(self)
        if not with_rows:
            d.pop("rows")
        return d

    def to_json(self, with_rows: bool = False) -> str:
        return json.dumps(self.to_dict(with_rows), indent=2)


def ratio_report(rows: Sequence[QuestionAttention]) -> CARatioReport:
    """Two-level average: per-question mean over positive (negative) passages,
    then the mean of those over questions that have any.

    Questions are folded in id order so the result does not depend on corpus order.
    """
    rows = sorted(rows, key=lambda r: r.id)
    K = len(rows[0].labels) if rows else 0
    pos_means, neg_means = [], []
    for r in rows:
        pos = [c for c, b in zip(r.ca, r.labels) if b]
        neg = [c for c, b in zip(r.ca, r.labels) if not b]
        if pos:
            pos_means.append(sum(pos) / len(pos))
        if neg:
            neg_means.append(sum(neg) / len(neg))
    mean_pos = float(np.mean(pos_means)) if pos_means else None
    mean_neg = float(np.mean(neg_means)) if neg_means else None
    reason = None
    if mean_pos is None or mean_neg is None:
        ratio = None
        reason = "no eligible questions with positive passages" if mean_pos is None else "no eligible questions with negative passages"
    elif mean_neg <= 0:
        ratio, reason = None, "mean negative cross-attention is zero"
    else:
        ratio = mean_pos / mean_neg
    return CARatioReport(
        mean_CA_pos=mean_pos, mean_CA_neg=mean_neg, r_pos_neg=ratio, N_q=len(rows),
        n_pos_eligible=len(pos_means), n_neg_eligible=len(neg_means),
        excluded_no_pos=sum(1 for r in rows if r.n_pos == 0),
        excluded_no_neg=sum(1 for r in rows if r.n_pos == K),
        null_reason=reason, rows=[asdict(r) for r in rows],
    )


def ca_ratio(examples: Sequence[QAExample], model: RFiDModel, vocab: Vocabulary, batch_size: int = 64) -> CARatioReport:
    check_compatible(examples, model.cfg.K, vocab, model.cfg.vocab_size)
    preds = predict(model, examples, vocab, batch_size=batch_size, trace=True)
    return ratio_report([question_attention(ex.id, ex.labels, p.trace) for ex, p in zip(examples, preds)])


@dataclass
class CaseReport:
    id: str
    question: str
    prediction: str
    answers: list
    rows: list

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_table(self, excerpt_width: int = 60) -> str:
        lines = [f"question:   {self.question}", f"prediction: {self.prediction}",
                 f"gold:       {' | '.join(self.answers)}", ""]
        header = f"{'psg':>3}  {'label':>5}  {'pred':>4}  {'CA':>8}  {'guide':>8}  passage"
        lines += [header, "-" * len(header)]
        for r in self.rows:
            text = r["excerpt"] if len(r["excerpt"]) <= excerpt_width else r["excerpt"][:excerpt_width - 3] + "..."
            lines.append(f"{r['passage']:>3}  {r['label']:>5}  {r['pred']:>4}  {r['ca']:>8.4f}  {r['guidance']:>8.4f}  {text}")
        return "\n".join(lines)


def case_report(qid: str, examples: Sequence[QAExample], model: RFiDModel, vocab: Vocabulary) -> CaseReport:
    """Per-passage label, prediction and attention mass for one question, highest mass first."""
    matches = [ex for ex in examples if ex.id == qid]
    if not matches:
        raise KeyError(qid)
    ex = matches[0]
    check_compatible([ex], model.cfg.K, vocab, model.cfg.vocab_size)
    (p,) = predict(model, [ex], vocab, trace=True)
    qa = question_attention(ex.id, ex.labels, p.trace)
    rows = [{"passage": k, "label": int(ex.labels[k]), "pred": int(p.rationale_preds[k]), "ca": qa.ca[k],
             "guidance": qa.guidance[k], "excerpt": f"{psg.title}: {psg.context}"}
            for k, psg in enumerate(ex.passages)]
    rows.sort(key=lambda r: (-r["ca"], r["passage"]))
    return CaseReport(ex.id, ex.question, p.answer, list(ex.answers), rows)
