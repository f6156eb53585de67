"""Ranking-metric tests: hand-computed fixtures, exhaustive small-case
enumeration against independent pair/rank oracles, invariances, and the
aggregation/report layer."""

import itertools
import json
import math

import numpy as np
import pytest

from mmrec.data import ImpressionSample
from mmrec.metrics import (
    METRIC_NAMES,
    MetricReport,
    aggregate_runs,
    auc,
    evaluate,
    evaluate_model,
    format_table,
    mrr,
    ndcg_at_k,
)

from oracles import auc_by_pairs, mrr_by_ranks, ndcg_by_ranks


# ---------------------------------------------------------------------------
# fixtures with values computed by hand
# ---------------------------------------------------------------------------


class TestAucFixtures:
    def test_interleaved_is_three_quarters(self):
        # pairs: (0.9,0.8)+, (0.9,0.6)+, (0.7,0.8)-, (0.7,0.6)+ -> 3/4
        assert auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(0.75, abs=1e-12)

    def test_perfect_and_inverted(self):
        assert auc([3.0, 2.0, 1.0], [1, 1, 0]) == 1.0
        assert auc([1.0, 2.0, 3.0], [1, 1, 0]) == 0.0

    def test_all_tied_scores_give_half(self):
        assert auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == pytest.approx(0.5, abs=1e-12)

    def test_single_tie_counts_half(self):
        assert auc([1.0, 1.0], [1, 0]) == pytest.approx(0.5, abs=1e-12)

    def test_reversing_scores_complements(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(2, 9))
            labels = np.zeros(n, dtype=int)
            labels[: int(rng.integers(1, n))] = 1
            rng.shuffle(labels)
            if labels.sum() in (0, n):
                continue
            scores = rng.standard_normal(n)  # continuous, ties impossible
            assert auc(-scores, labels) == pytest.approx(1.0 - auc(scores, labels), abs=1e-12)

    def test_requires_both_classes(self):
        with pytest.raises(ValueError, match="positive and one negative"):
            auc([1.0, 2.0], [1, 1])
        with pytest.raises(ValueError, match="positive and one negative"):
            auc([1.0, 2.0], [0, 0])

    def test_input_validation(self):
        with pytest.raises(ValueError, match="equal-length"):
            auc([1.0, 2.0], [1, 0, 1])
        with pytest.raises(ValueError, match="labels must be 0 or 1"):
            auc([1.0, 2.0], [1, 2])
        with pytest.raises(ValueError, match="equal-length"):
            auc([], [])


class TestMrrFixtures:
    def test_positives_at_ranks_one_and_four(self):
        # positives score 4.0 and 1.0 -> ranks 1 and 4 -> (1 + 1/4) / 2
        scores = [4.0, 3.0, 2.0, 1.0]
        labels = [1, 0, 0, 1]
        assert mrr(scores, labels) == pytest.approx((1.0 + 0.25) / 2.0, abs=1e-12)

    def test_tie_break_is_input_order(self):
        # equal scores: earlier index ranks first, so the positive at index 1
        # sits at rank 2 even though it ties the rank-1 negative
        assert mrr([7.0, 7.0], [0, 1]) == pytest.approx(0.5, abs=1e-12)
        assert mrr([7.0, 7.0], [1, 0]) == pytest.approx(1.0, abs=1e-12)

    def test_requires_a_positive(self):
        with pytest.raises(ValueError, match="at least one positive"):
            mrr([1.0, 2.0], [0, 0])


class TestNdcgFixtures:
    def test_single_positive_at_rank_two(self):
        # DCG = 1/log2(3), ideal = 1/log2(2) = 1
        value = ndcg_at_k([2.0, 1.0, 0.5], [0, 1, 0], k=5)
        assert value == pytest.approx(1.0 / math.log2(3.0), abs=1e-12)

    def test_positive_below_cutoff_scores_zero(self):
        scores = [6.0, 5.0, 4.0, 3.0, 2.0, 1.0]
        labels = [0, 0, 0, 0, 0, 1]
        assert ndcg_at_k(scores, labels, k=5) == 0.0

    def test_front_loaded_positives_are_ideal(self):
        assert ndcg_at_k([3.0, 2.0, 1.0], [1, 1, 0], k=5) == pytest.approx(1.0, abs=1e-15)
        assert ndcg_at_k([3.0, 2.0, 1.0], [1, 1, 1], k=2) == pytest.approx(1.0, abs=1e-15)

    def test_ideal_truncates_at_k(self):
        # 3 positives but k=2: ideal uses only the first two discount slots
        scores = [4.0, 3.0, 2.0, 1.0]
        labels = [1, 0, 1, 1]
        discounts = 1.0 / np.log2([2.0, 3.0])
        expected = discounts[0] / discounts.sum()
        assert ndcg_at_k(scores, labels, k=2) == pytest.approx(expected, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError, match="at least one positive"):
            ndcg_at_k([1.0], [0], k=5)
        with pytest.raises(ValueError, match="k must be"):
            ndcg_at_k([1.0], [1], k=0)


# ---------------------------------------------------------------------------
# exhaustive small cases against independent oracles
# ---------------------------------------------------------------------------


def _all_label_vectors(n):
    for bits in itertools.product((0, 1), repeat=n):
        yield np.array(bits)


class TestAgainstOracles:
    def test_auc_matches_pair_counting_exhaustively(self):
        rng = np.random.default_rng(42)
        checked = 0
        for n in range(2, 7):
            for labels in _all_label_vectors(n):
                if labels.sum() in (0, n):
                    continue
                for _ in range(3):
                    # quantized scores force frequent ties
                    scores = rng.integers(0, 4, size=n).astype(float)
                    assert auc(scores, labels) == pytest.approx(
                        auc_by_pairs(scores, labels), abs=1e-12
                    )
                    checked += 1
        assert checked >= 300

    def test_rank_metrics_match_rank_oracles_exhaustively(self):
        rng = np.random.default_rng(43)
        checked = 0
        for n in range(1, 7):
            for labels in _all_label_vectors(n):
                if labels.sum() == 0:
                    continue
                for _ in range(5):
                    scores = rng.integers(0, 4, size=n).astype(float)
                    assert mrr(scores, labels) == pytest.approx(
                        mrr_by_ranks(scores, labels), abs=1e-12
                    )
                    for k in (1, 5, 10):
                        assert ndcg_at_k(scores, labels, k) == pytest.approx(
                            ndcg_by_ranks(scores, labels, k), abs=1e-12
                        )
                    checked += 1
        assert checked >= 500


class TestInvariances:
    def test_strictly_increasing_transforms_change_nothing(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n = int(rng.integers(3, 10))
            labels = (rng.random(n) < 0.4).astype(int)
            if labels.sum() in (0, n):
                continue
            scores = rng.standard_normal(n)
            for transform in (lambda s: 2.0 * s + 1.0, np.exp, lambda s: s**3):
                t = transform(scores)
                assert auc(t, labels) == pytest.approx(auc(scores, labels), abs=1e-12)
                assert mrr(t, labels) == pytest.approx(mrr(scores, labels), abs=1e-12)
                for k in (5, 10):
                    assert ndcg_at_k(t, labels, k) == pytest.approx(
                        ndcg_at_k(scores, labels, k), abs=1e-12
                    )

    def test_random_scores_average_half_auc(self):
        rng = np.random.default_rng(11)
        values = []
        for _ in range(2000):
            labels = np.zeros(10, dtype=int)
            labels[0] = 1
            rng.shuffle(labels)
            values.append(auc(rng.standard_normal(10), labels))
        assert np.mean(values) == pytest.approx(0.5, abs=0.02)


# ---------------------------------------------------------------------------
# evaluation driver: per-impression loop, skip counting, caching
# ---------------------------------------------------------------------------


class _StubConfig:
    d = 4


class _StubModel:
    """Scores each candidate by the first coordinate of its text vector."""

    config = _StubConfig()

    def __init__(self, values: dict[str, float]):
        self.values = values
        self.encode_table_calls = 0

    def encode_table(self, news, ids):
        self.encode_table_calls += 1
        return {
            nid: (np.full(4, self.values[nid]), np.zeros(4)) for nid in set(ids)
        }

    def score_impression_np(self, hist_t, hist_p, cand_t, cand_p):
        return cand_t[:, 0].astype(float)


def _impression(iid, candidates, history=()):
    return ImpressionSample(
        impression_id=iid,
        user_id="u1",
        history=list(history),
        candidates=candidates,
    )


class TestEvaluateModel:
    def test_hand_worked_two_impressions(self):
        values = {"n1": 0.9, "n2": 0.8, "n3": 0.7, "n4": 0.6}
        model = _StubModel(values)
        imps = [
            _impression("i1", [("n1", 1), ("n2", 0), ("n3", 1), ("n4", 0)]),
            _impression("i2", [("n1", 1), ("n4", 0)]),
        ]
        result = evaluate_model(model, news=None, impressions=imps)
        # i1: AUC 0.75, MRR (1 + 1/3)/2, nDCG@5 with positives at ranks 1,3
        # i2: single positive outranks the negative -> all metrics 1
        d = 1.0 / np.log2([2.0, 3.0, 4.0])
        i1_ndcg = (d[0] + d[2]) / (d[0] + d[1])
        assert result["auc"] == pytest.approx((0.75 + 1.0) / 2.0, abs=1e-12)
        assert result["mrr"] == pytest.approx(((1.0 + 1 / 3) / 2 + 1.0) / 2.0, abs=1e-12)
        assert result["ndcg@5"] == pytest.approx((i1_ndcg + 1.0) / 2.0, abs=1e-12)
        assert result["counts"] == {
            "impressions": 2,
            "scored_auc": 2,
            "scored_rank": 2,
            "skipped_single_class": 0,
            "skipped_no_positive": 0,
        }

    def test_skip_counting_per_metric(self):
        values = {"n1": 0.5, "n2": 0.4}
        model = _StubModel(values)
        imps = [
            _impression("all-neg", [("n1", 0), ("n2", 0)]),  # skipped everywhere
            _impression("all-pos", [("n1", 1), ("n2", 1)]),  # AUC skipped, ranks fine
            _impression("mixed", [("n1", 1), ("n2", 0)]),
        ]
        result = evaluate_model(model, news=None, impressions=imps)
        counts = result["counts"]
        assert counts["scored_auc"] == 1
        assert counts["scored_rank"] == 2
        assert counts["skipped_single_class"] == 2
        assert counts["skipped_no_positive"] == 1
        assert result["auc"] == pytest.approx(1.0)  # only the mixed impression
        # all-pos: reciprocal ranks (1, 1/2) -> 0.75; mixed: 1.0
        assert result["mrr"] == pytest.approx((0.75 + 1.0) / 2.0)

    def test_nothing_scoreable_is_nan_not_crash(self):
        model = _StubModel({"n1": 0.5})
        result = evaluate_model(model, news=None, impressions=[_impression("x", [("n1", 0)])])
        assert math.isnan(result["auc"]) and math.isnan(result["mrr"])
        assert result["counts"]["skipped_no_positive"] == 1

    def test_supplied_cache_bypasses_encoding(self):
        model = _StubModel({})  # empty: encode_table would KeyError if called
        cache = {
            "n1": (np.full(4, 2.0), np.zeros(4)),
            "n2": (np.full(4, 1.0), np.zeros(4)),
        }
        imps = [_impression("i", [("n1", 1), ("n2", 0)], history=["n2"])]
        result = evaluate_model(model, news=None, impressions=imps, cache=cache)
        assert result["auc"] == 1.0
        assert model.encode_table_calls == 0

    def test_history_truncation_respects_history_max(self):
        class HistoryLengthModel(_StubModel):
            def score_impression_np(self, hist_t, hist_p, cand_t, cand_p):
                # score by history length so the truncation is observable
                return np.full(cand_t.shape[0], float(hist_t.shape[0]))

        values = {f"n{i}": 0.0 for i in range(10)}
        model = HistoryLengthModel(values)
        history = [f"n{i}" for i in range(10)]
        imps = [_impression("i", [("n1", 1), ("n2", 0)], history=history)]
        seen = {}

        class Recorder(HistoryLengthModel):
            def score_impression_np(self, hist_t, hist_p, cand_t, cand_p):
                seen["hist_len"] = hist_t.shape[0]
                return np.array([1.0, 0.0])

        evaluate_model(Recorder(values), news=None, impressions=imps, history_max=3)
        assert seen["hist_len"] == 3


# ---------------------------------------------------------------------------
# aggregation across runs
# ---------------------------------------------------------------------------


class TestReports:
    def test_mean_and_sample_std(self):
        runs = [
            {"auc": 0.6, "mrr": 0.3, "ndcg@5": 0.4, "ndcg@10": 0.5},
            {"auc": 0.8, "mrr": 0.5, "ndcg@5": 0.6, "ndcg@10": 0.7},
        ]
        report = aggregate_runs(runs, seeds=[1, 2], n_impressions=10)
        assert report.mean["auc"] == pytest.approx(0.7, abs=1e-12)
        # ddof=1: sqrt(((0.1)^2 + (0.1)^2) / 1)
        assert report.std["auc"] == pytest.approx(math.sqrt(0.02), abs=1e-12)
        assert report.mean["mrr"] == pytest.approx(0.4, abs=1e-12)

    def test_single_run_has_zero_std(self):
        report = aggregate_runs(
            [{n: 0.5 for n in METRIC_NAMES}], seeds=[3], n_impressions=1
        )
        assert all(report.std[n] == 0.0 for n in METRIC_NAMES)

    def test_validation(self):
        with pytest.raises(ValueError, match="at least one run"):
            aggregate_runs([], seeds=[], n_impressions=0)
        with pytest.raises(ValueError, match="runs but"):
            aggregate_runs([{n: 0.5 for n in METRIC_NAMES}], seeds=[1, 2], n_impressions=1)

    def test_json_round_trip(self):
        report = aggregate_runs(
            [{n: 0.25 for n in METRIC_NAMES}], seeds=[9], n_impressions=4
        )
        loaded = json.loads(report.to_json())
        assert loaded["run_seeds"] == [9]
        assert loaded["mean"]["ndcg@10"] == 0.25
        assert loaded["n_impressions"] == 4

    def test_table_formatting(self):
        runs = [
            {"auc": 0.61234, "mrr": 0.3, "ndcg@5": 0.4, "ndcg@10": 0.5},
            {"auc": 0.81234, "mrr": 0.5, "ndcg@5": 0.6, "ndcg@10": 0.7},
        ]
        report = aggregate_runs(runs, seeds=[1, 2], n_impressions=10)
        text = format_table({"full": report})
        lines = text.splitlines()
        assert lines[0].split() == ["model", "AUC", "MRR", "NDCG@5", "NDCG@10"]
        assert lines[1].startswith("full")
        assert "0.7123±0.1414" in lines[1]
        # columns align: header and row place AUC at the same offset
        assert lines[0].index("AUC") == lines[1].index("0.7123")

    def test_evaluate_fixed_model_yields_zero_std(self):
        model = _StubModel({"n1": 1.0, "n2": 0.0})
        imps = [_impression("i", [("n1", 1), ("n2", 0)])]
        report = evaluate(model, news=None, impressions=imps, seeds=[1, 2, 3])
        assert report.mean["auc"] == 1.0
        assert report.std["auc"] == 0.0
        assert report.run_seeds == [1, 2, 3]
        with pytest.raises(ValueError, match="non-empty"):
            evaluate(model, news=None, impressions=imps, seeds=[])
