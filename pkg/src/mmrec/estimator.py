"""Scikit-learn style estimator wrapping the full pipeline.

``MMRecRanker`` follows the estimator contract: hyperparameters are stored
verbatim in ``__init__`` (so ``get_params``/``set_params``/``clone`` work),
fitted state lives in trailing-underscore attributes, and calling
``predict``/``score`` before ``fit`` raises ``NotFittedError``.

X is a list of :class:`~mmrec.data.ImpressionSample`; the news-side inputs
(a :class:`~mmrec.data.NewsTable` with the vocabulary applied, plus the
:class:`~mmrec.data.Vocabulary`) ride along as keyword arguments to ``fit``
because they are shared lookup structures, not per-sample features.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import ExperimentConfig
from .data import ImpressionSample, NewsTable, Vocabulary, recent_history
from .metrics import auc, evaluate_model
from .training import train

__all__ = ["MMRecRanker"]


def _validate_impressions(X, name="X"):
    if not isinstance(X, (list, tuple)) or len(X) == 0:
        raise ValueError(f"{name} must be a non-empty list of ImpressionSample")
    for item in X:
        if not isinstance(item, ImpressionSample):
            raise TypeError(
                f"{name} must contain ImpressionSample objects, found {type(item).__name__}"
            )
    return list(X)


class MMRecRanker(BaseEstimator):
    """Click-ranking estimator over impression lists.

    Parameters mirror the flat experiment config. ``score`` returns mean
    per-impression AUC, so the estimator plugs into model-selection tooling
    that expects "higher is better".
    """

    def __init__(
        self,
        d=64,
        d_img=64,
        d_a=32,
        heads=4,
        n_text_layers=2,
        n_co_layers=1,
        m_max=30,
        k_max=8,
        ffn_mult=4,
        freeze_below=0,
        variant="full",
        scaled_attention=False,
        lr=1e-3,
        batch_size=32,
        epochs=3,
        k_neg=4,
        grad_clip_norm=5.0,
        history_max=50,
        seed=0,
    ):
        self.d = d
        self.d_img = d_img
        self.d_a = d_a
        self.heads = heads
        self.n_text_layers = n_text_layers
        self.n_co_layers = n_co_layers
        self.m_max = m_max
        self.k_max = k_max
        self.ffn_mult = ffn_mult
        self.freeze_below = freeze_below
        self.variant = variant
        self.scaled_attention = scaled_attention
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.k_neg = k_neg
        self.grad_clip_norm = grad_clip_norm
        self.history_max = history_max
        self.seed = seed

    # ------------------------------------------------------------------

    def _experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig(**self.get_params())

    def fit(self, X, y=None, *, news: NewsTable, vocab: Vocabulary, dev=None):
        """Train on impressions ``X``; labels live inside the impressions.

        ``news`` must already have the vocabulary applied (title id arrays
        present). ``dev`` optionally supplies impressions for per-epoch
        validation metrics.
        """
        X = _validate_impressions(X)
        if not isinstance(news, NewsTable):
            raise TypeError(f"news must be a NewsTable, got {type(news).__name__}")
        if not isinstance(vocab, Vocabulary):
            raise TypeError(f"vocab must be a Vocabulary, got {type(vocab).__name__}")
        if dev is not None:
            dev = _validate_impressions(dev, name="dev")
        cfg = self._experiment_config()
        self.config_ = cfg
        self.vocab_ = vocab
        self.news_ = news
        self.model_ = cfg.build_model(len(vocab))
        self.result_ = train(
            self.model_,
            news,
            X,
            cfg.train_config(),
            dev_impressions=dev,
            vocab_hash=vocab.content_hash(),
        )
        return self

    # ------------------------------------------------------------------

    def predict(self, X, news: NewsTable | None = None) -> list[np.ndarray]:
        """Candidate scores per impression, in candidate input order."""
        check_is_fitted(self, "model_")
        X = _validate_impressions(X)
        news = self.news_ if news is None else news
        needed: list[str] = []
        for imp in X:
            needed.extend(recent_history(imp.history, self.history_max))
            needed.extend(nid for nid, _ in imp.candidates)
        cache = self.model_.encode_table(news, needed)
        d = self.model_.config.d
        zero = np.zeros((0, d))
        out = []
        for imp in X:
            history = recent_history(imp.history, self.history_max)
            hist_t = np.stack([cache[i][0] for i in history]) if history else zero
            hist_p = np.stack([cache[i][1] for i in history]) if history else zero
            cand_t = np.stack([cache[nid][0] for nid, _ in imp.candidates])
            cand_p = np.stack([cache[nid][1] for nid, _ in imp.candidates])
            out.append(self.model_.score_impression_np(hist_t, hist_p, cand_t, cand_p))
        return out

    def rank(self, X, news: NewsTable | None = None) -> list[list[int]]:
        """Candidate index permutations, best first (ties keep input order)."""
        rankings = []
        for imp, scores in zip(X, self.predict(X, news=news)):
            order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
            rankings.append(order)
        return rankings

    def score(self, X, y=None, news: NewsTable | None = None) -> float:
        """Mean per-impression AUC (impressions lacking both classes skipped)."""
        check_is_fitted(self, "model_")
        X = _validate_impressions(X)
        news = self.news_ if news is None else news
        result = evaluate_model(self.model_, news, X, history_max=self.history_max)
        value = result["auc"]
        if math.isnan(value):
            raise ValueError("no impression had both a positive and a negative label")
        return float(value)
