import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfid.analysis import (QuestionAttention, ca_ratio, case_report, guidance_attention, passage_cross_attention,
                           question_attention, ratio_report)
from rfid.model import AttentionTrace, ModelConfig, RFiDModel


def _random_trace(rng, guided=None):
    K, L = rng.integers(1, 4), rng.integers(1, 5)
    n_ly, heads, steps = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 4)
    guided = bool(rng.integers(0, 2)) if guided is None else guided
    M = K * (L + guided)
    raw = rng.random((n_ly, heads, steps, M))
    raw[raw < 0.2] = 0.0
    raw[..., 0] += 1e-3
    return AttentionTrace(raw / raw.sum(-1, keepdims=True), K=int(K), L=int(L), guided=guided)


def _nested_loop_ca(trace, k):
    n_ly, heads, steps, _ = trace.ca.shape
    block = trace.L + (1 if trace.guided else 0)
    total = 0.0
    for ly in range(n_ly):
        for t in range(steps):
            for pos in range(trace.L):
                s = 0.0
                for h in range(heads):
                    s += trace.ca[ly, h, t, k * block + pos]
                total += s / heads
    return total


def test_matches_nested_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        tr = _random_trace(rng)
        for k in range(tr.K):
            assert abs(passage_cross_attention(tr, k) - _nested_loop_ca(tr, k)) <= 1e-6


def test_uniform_attention_splits_evenly():
    K, L, n_ly, T = 4, 5, 2, 3
    tr = AttentionTrace(np.full((n_ly, 2, T, K * L), 1 / (K * L)), K=K, L=L, guided=False)
    for k in range(K):
        assert passage_cross_attention(tr, k) == pytest.approx(n_ly * T / K)


def test_concentrated_attention():
    K, L = 3, 4
    ca = np.zeros((1, 2, 2, K * (L + 1)))
    ca[..., 1 * (L + 1) + 2] = 1.0
    tr = AttentionTrace(ca, K=K, L=L, guided=True)
    assert [passage_cross_attention(tr, k) for k in range(K)] == [0.0, 2.0, 0.0]


def test_guidance_slot_excluded():
    K, L = 2, 3
    ca = np.zeros((1, 1, 1, K * (L + 1)))
    ca[..., L] = 0.5
    ca[..., 0] = 0.5
    tr = AttentionTrace(ca, K=K, L=L, guided=True)
    assert passage_cross_attention(tr, 0) == 0.5
    assert guidance_attention(tr, 0) == 0.5
    assert guidance_attention(AttentionTrace(np.zeros((1, 1, 1, 6)), K=2, L=3, guided=False), 0) == 0.0


def test_index_out_of_range():
    tr = AttentionTrace(np.zeros((1, 1, 1, 6)), K=2, L=3, guided=False)
    with pytest.raises(IndexError):
        passage_cross_attention(tr, 2)
    with pytest.raises(IndexError):
        passage_cross_attention(tr, -1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_layer_additivity_and_mass_conservation(seed):
    rng = np.random.default_rng(seed)
    tr = _random_trace(rng)
    n_ly = tr.ca.shape[0]
    for k in range(tr.K):
        split = sum(passage_cross_attention(AttentionTrace(tr.ca[i:i + 1], tr.K, tr.L, tr.guided), k)
                    for i in range(n_ly))
        assert split == pytest.approx(passage_cross_attention(tr, k), abs=1e-9)
    total = sum(passage_cross_attention(tr, k) + guidance_attention(tr, k) for k in range(tr.K))
    assert total == pytest.approx(n_ly * tr.steps, abs=1e-9)


def _row(qid, labels, ca):
    return QuestionAttention(qid, [int(b) for b in labels], [float(c) for c in ca], [0.0] * len(labels))


def test_ratio_two_level_average():
    rows = [_row("a", [1, 0, 0], [3.0, 1.0, 1.0]), _row("b", [1, 1, 0], [2.0, 4.0, 0.5])]
    rep = ratio_report(rows)
    assert rep.mean_CA_pos == pytest.approx((3.0 + 3.0) / 2)
    assert rep.mean_CA_neg == pytest.approx((1.0 + 0.5) / 2)
    assert rep.r_pos_neg == pytest.approx(3.0 / 0.75)
    assert rep.N_q == 2 and rep.n_pos_eligible == rep.n_neg_eligible == 2


def test_ratio_exclusions():
    rows = [_row("a", [1, 0], [2.0, 1.0]), _row("b", [0, 0], [1.0, 1.0]), _row("c", [1, 1], [5.0, 5.0])]
    rep = ratio_report(rows)
    assert rep.excluded_no_pos == 1 and rep.excluded_no_neg == 1
    assert rep.mean_CA_pos == pytest.approx(3.5) and rep.mean_CA_neg == pytest.approx(1.0)


def test_all_positive_gives_null_ratio():
    rep = ratio_report([_row("a", [1, 1], [1.0, 2.0])])
    assert rep.r_pos_neg is None and "negative" in rep.null_reason
    rep = ratio_report([_row("a", [0, 0], [1.0, 2.0])])
    assert rep.r_pos_neg is None and "positive" in rep.null_reason
    rep = ratio_report([_row("a", [1, 0], [1.0, 0.0])])
    assert rep.r_pos_neg is None and rep.null_reason


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_ratio_invariant_to_question_order(seed):
    rng = np.random.default_rng(seed)
    rows = [_row(f"q{i}", rng.integers(0, 2, 3), rng.random(3)) for i in range(8)]
    a = ratio_report(rows).to_json(with_rows=True)
    b = ratio_report([rows[i] for i in rng.permutation(8)]).to_json(with_rows=True)
    assert a == b


def test_question_attention_on_trace():
    tr = AttentionTrace(np.full((1, 1, 2, 6), 1 / 6), K=2, L=3, guided=False)
    qa = question_attention("x", [True, False], tr)
    assert qa.labels == [1, 0] and qa.ca == pytest.approx([1.0, 1.0])


def test_untrained_model_ratio_near_one(small_corpus, small_vocab, corpus_cfg):
    rep = ca_ratio(small_corpus, RFiDModel(corpus_cfg), small_vocab)
    assert rep.N_q == len(small_corpus)
    assert 0.8 < rep.r_pos_neg < 1.25


def test_case_report(small_corpus, small_vocab, corpus_cfg):
    model = RFiDModel(corpus_cfg)
    ex = small_corpus[5]
    rep = case_report(ex.id, small_corpus, model, small_vocab)
    assert len(rep.rows) == 4
    cas = [r["ca"] for r in rep.rows]
    assert cas == sorted(cas, reverse=True)
    assert sorted(r["passage"] for r in rep.rows) == [0, 1, 2, 3]
    assert [r["label"] for r in sorted(rep.rows, key=lambda r: r["passage"])] == [int(b) for b in ex.labels]
    assert rep.to_json() == case_report(ex.id, small_corpus, model, small_vocab).to_json()
    assert json.loads(rep.to_json())["id"] == ex.id
    assert ex.question in rep.to_table()


def test_case_report_unknown_id(small_corpus, small_vocab, corpus_cfg):
    with pytest.raises(KeyError):
        case_report("missing", small_corpus, RFiDModel(corpus_cfg), small_vocab)


def test_case_report_with_guidance_trace(small_corpus, small_vocab):
    cfg = ModelConfig(K=4, L=32, d=16, n_enc_layers=1, n_dec_layers=1, n_heads=2, vocab_size=len(small_vocab),
                      max_target_len=4)
    rep = case_report(small_corpus[0].id, small_corpus, RFiDModel(cfg), small_vocab)
    assert all(r["guidance"] > 0 for r in rep.rows)
