"""Estimator-contract tests: parameter handling per the scikit-learn
conventions, NotFittedError gating, prediction/ranking outputs, and scoring."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mmrec.data import ImpressionSample
from mmrec.estimator import MMRecRanker
from mmrec.synthetic import SyntheticConfig, generate_synthetic

PARAMS = dict(
    d=16, d_img=8, d_a=8, heads=2, n_text_layers=1, n_co_layers=1,
    m_max=12, k_max=3, ffn_mult=2, lr=3e-3, batch_size=16, epochs=2, k_neg=3,
)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    cfg = SyntheticConfig(
        num_topics=4, num_news=60, num_users=16, num_impressions=200,
        candidates_per_impression=6, d_img=8, max_rois=3, seed=11,
    )
    return generate_synthetic(cfg, tmp_path_factory.mktemp("est"))


@pytest.fixture(scope="module")
def fitted(corpus):
    est = MMRecRanker(**PARAMS, seed=0)
    est.fit(corpus.splits["train"], news=corpus.news, vocab=corpus.vocab,
            dev=corpus.splits["dev"])
    return est


class TestEstimatorContract:
    def test_get_params_round_trip(self):
        est = MMRecRanker(**PARAMS, variant="text-only", seed=9)
        params = est.get_params()
        assert params["variant"] == "text-only"
        assert params["d"] == 16 and params["seed"] == 9
        rebuilt = MMRecRanker(**params)
        assert rebuilt.get_params() == params

    def test_set_params_and_clone(self):
        est = MMRecRanker(**PARAMS)
        est.set_params(lr=1e-4, variant="no-coattn")
        assert est.lr == 1e-4 and est.variant == "no-coattn"
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        assert not hasattr(twin, "model_")

    def test_not_fitted_errors(self, corpus):
        est = MMRecRanker(**PARAMS)
        X = corpus.splits["dev"]
        with pytest.raises(NotFittedError):
            est.predict(X)
        with pytest.raises(NotFittedError):
            est.score(X)
        with pytest.raises(NotFittedError):
            est.rank(X)

    def test_fit_returns_self_and_sets_state(self, fitted):
        assert isinstance(fitted, MMRecRanker)
        assert fitted.model_.variant == "full"
        assert len(fitted.result_.epochs) == 2
        assert fitted.config_.d == 16

    def test_input_validation(self, corpus):
        est = MMRecRanker(**PARAMS)
        with pytest.raises(ValueError, match="non-empty list"):
            est.fit([], news=corpus.news, vocab=corpus.vocab)
        with pytest.raises(TypeError, match="ImpressionSample"):
            est.fit([1, 2], news=corpus.news, vocab=corpus.vocab)
        with pytest.raises(TypeError, match="NewsTable"):
            est.fit(corpus.splits["train"], news="nope", vocab=corpus.vocab)
        with pytest.raises(TypeError, match="Vocabulary"):
            est.fit(corpus.splits["train"], news=corpus.news, vocab="nope")

    def test_bad_hyperparameters_fail_at_fit(self, corpus):
        est = MMRecRanker(**{**PARAMS, "d": 15})  # not divisible by heads
        with pytest.raises(ValueError, match="not divisible"):
            est.fit(corpus.splits["train"], news=corpus.news, vocab=corpus.vocab)


class TestPredictions:
    def test_predict_shapes_and_determinism(self, fitted, corpus):
        X = corpus.splits["dev"]
        scores = fitted.predict(X)
        assert len(scores) == len(X)
        for imp, s in zip(X, scores):
            assert s.shape == (len(imp.candidates),)
            assert np.all(np.isfinite(s))
        again = fitted.predict(X)
        for a, b in zip(scores, again):
            np.testing.assert_array_equal(a, b)

    def test_rank_is_score_ordering(self, fitted, corpus):
        X = corpus.splits["dev"][:5]
        scores = fitted.predict(X)
        for order, s in zip(fitted.rank(X), scores):
            assert sorted(order) == list(range(len(s)))
            ranked = s[order]
            assert all(ranked[i] >= ranked[i + 1] for i in range(len(ranked) - 1))

    def test_score_is_mean_auc_above_chance(self, fitted, corpus):
        value = fitted.score(corpus.splits["dev"])
        assert 0.0 <= value <= 1.0
        assert value > 0.55  # planted signal learned

    def test_variant_parameter_respected(self, corpus):
        est = MMRecRanker(**{**PARAMS, "epochs": 1}, variant="text-only", seed=0)
        est.fit(corpus.splits["train"], news=corpus.news, vocab=corpus.vocab)
        assert est.model_.variant == "text-only"
        assert est.model_.config.n_co_layers == 0
