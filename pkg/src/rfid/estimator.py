"""scikit-learn style wrapper around training and inference."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .analysis import passage_cross_attention
from .data import QAExample, Vocabulary
from .evaluation import evaluate, predict
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train
from .validation import check_answers, check_corpus, unique_ids


class RFiDReader(BaseEstimator):
    """Multi-passage reader. ``X`` is a sequence of QAExample.

    ``variant`` is ``"fid"`` (plain fusion-in-decoder), ``"rfid"`` (rationale
    head plus decoder guidance) or ``"rfid-noguide"`` (rationale head only).

    Fitted attributes: ``model_``, ``vocab_``, ``n_passages_``, ``history_``,
    ``best_step_``.
    """

    def __init__(self, variant="rfid", max_tokens=32, d_model=64, n_enc_layers=2, n_dec_layers=2, n_heads=4,
                 max_target_len=8, learning_rate=1e-4, weight_decay=0.01, batch_size=16, total_steps=3000,
                 eval_interval=250, random_state=0):
        self.variant = variant
        self.max_tokens = max_tokens
        self.d_model = d_model
        self.n_enc_layers = n_enc_layers
        self.n_dec_layers = n_dec_layers
        self.n_heads = n_heads
        self.max_target_len = max_target_len
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.total_steps = total_steps
        self.eval_interval = eval_interval
        self.random_state = random_state

    def _configs(self, K):
        mcfg = ModelConfig(K=K, L=self.max_tokens, d=self.d_model, n_enc_layers=self.n_enc_layers,
                           n_dec_layers=self.n_dec_layers, n_heads=self.n_heads,
                           max_target_len=self.max_target_len, seed=self.random_state)
        tcfg = TrainConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, total_steps=self.total_steps,
                           eval_interval=self.eval_interval, seed=self.random_state, variant=self.variant)
        return mcfg, tcfg

    def fit(self, X, y=None, X_dev=None, vocab: Optional[Vocabulary] = None, out_dir=None):
        """Train on ``X``; ``y`` optionally replaces each example's gold answers.

        Model selection uses dev EM on ``X_dev`` when given.
        """
        X = check_corpus(X)
        y = check_answers(y, len(X))
        if y is not None:
            X = [QAExample.build(ex.id, ex.question, ans, ex.passages) for ex, ans in zip(X, y)]
        dev = check_corpus(X_dev, X[0].K) if X_dev is not None else []
        self.n_passages_ = X[0].K
        self.vocab_ = vocab or Vocabulary.from_corpus(list(X) + list(dev))
        mcfg, tcfg = self._configs(self.n_passages_)
        result = train(X, dev, tcfg, mcfg, self.vocab_, out_dir=out_dir)
        self.model_ = result.model
        self.history_ = result.history
        self.best_step_ = result.best_step
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        return check_corpus(X, self.n_passages_)

    def predict(self, X) -> np.ndarray:
        X = self._check(X)
        return np.array([p.answer for p in predict(self.model_, X, self.vocab_)], dtype=object)

    def predict_rationale(self, X) -> np.ndarray:
        """(n_questions, K) predicted rationale labels."""
        X = self._check(X)
        return np.array([p.rationale_preds for p in predict(self.model_, X, self.vocab_)], dtype=np.int64)

    def transform(self, X) -> np.ndarray:
        """(n_questions, K) decoder cross-attention mass per passage."""
        X = self._check(X)
        preds = predict(self.model_, X, self.vocab_, trace=True)
        return np.array([[passage_cross_attention(p.trace, k) for k in range(self.n_passages_)] for p in preds])

    def score(self, X, y=None) -> float:
        """Exact match of greedy answers against the examples' gold answers."""
        X = self._check(X)
        y = check_answers(y, len(X))
        if y is not None:
            X = [QAExample.build(ex.id, ex.question, ans, ex.passages) for ex, ans in zip(X, y)]
        unique_ids(X)
        return evaluate(X, self.model_, self.vocab_).exact_match

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.vocab_, {"estimator_params": self.get_params()})

    @classmethod
    def load(cls, path) -> "RFiDReader":
        ckpt = load_checkpoint(path)
        est = cls(**ckpt.meta.get("estimator_params", {}))
        est.model_, est.vocab_ = ckpt.model, ckpt.vocab
        est.n_passages_ = ckpt.model.cfg.K
        est.history_, est.best_step_ = [], None
        return est
