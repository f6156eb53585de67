"""Per-impression ranking metrics and multi-run aggregation.

Each impression (one candidate list with 0/1 click labels) yields one value
per metric; a run's value is the unweighted mean over its scoreable
impressions. AUC needs both classes present; MRR and nDCG need at least one
positive; impressions failing a metric's requirement are skipped for that
metric and counted. Across repeated runs (different training seeds) the
report carries mean and sample standard deviation (ddof=1).

Conventions (pinned for determinism): AUC counts ties as one half
(rank-average); rank-based metrics sort by score descending with input
index as the tie-break; all metrics are invariant under strictly increasing
transforms of the scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import ImpressionSample, NewsTable, recent_history

__all__ = [
    "auc",
    "mrr",
    "ndcg_at_k",
    "METRIC_NAMES",
    "evaluate_model",
    "evaluate",
    "MetricReport",
    "aggregate_runs",
]

METRIC_NAMES = ("auc", "mrr", "ndcg@5", "ndcg@10")


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ValueError(f"scores and labels must be equal-length 1-D, got {scores.shape}/{labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative; ties count ½."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC requires at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:  # average ranks across tied groups
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _desc_order(scores: np.ndarray) -> np.ndarray:
    return np.lexsort((np.arange(scores.size), -scores))


def mrr(scores, labels) -> float:
    """Mean reciprocal rank over all positives (score-desc, index tie-break)."""
    scores, labels = _check(scores, labels)
    if labels.sum() == 0:
        raise ValueError("MRR requires at least one positive")
    order = _desc_order(scores)
    recips = [1.0 / (rank + 1) for rank, idx in enumerate(order) if labels[idx] == 1]
    return float(np.mean(recips))


def ndcg_at_k(scores, labels, k: int) -> float:
    """DCG@k of the score-desc ordering over ideal DCG@k."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("nDCG requires at least one positive")
    if k < 1:
        raise ValueError("k must be >= 1")
    order = _desc_order(scores)
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = sum(discounts[rank] for rank, idx in enumerate(order[:k]) if labels[idx] == 1)
    ideal = discounts[: min(k, n_pos)].sum()
    return float(dcg / ideal)


@dataclass
class EvalCounts:
    scored_auc: int = 0
    scored_rank: int = 0
    skipped_single_class: int = 0
    skipped_no_positive: int = 0


def evaluate_model(
    model,
    news: NewsTable,
    impressions: list[ImpressionSample],
    history_max: int = 50,
    cache: dict | None = None,
) -> dict:
    """Mean metrics of ``model`` over ``impressions``.

    News encodings are computed once for all unique ids involved (or taken
    from ``cache``). Impressions are processed in input order with plain
    summation, so results are deterministic. Returns metric means plus skip
    counts under ``"counts"``.
    """
    if cache is None:
        needed = []
        for imp in impressions:
            needed.extend(recent_history(imp.history, history_max))
            needed.extend(nid for nid, _ in imp.candidates)
        cache = model.encode_table(news, needed)
    d = model.config.d
    zero_hist = np.zeros((0, d))
    sums = dict.fromkeys(METRIC_NAMES, 0.0)
    counts = EvalCounts()
    for imp in impressions:
        labels = np.array([label for _, label in imp.candidates])
        history = recent_history(imp.history, history_max)
        hist_t = np.stack([cache[i][0] for i in history]) if history else zero_hist
        hist_p = np.stack([cache[i][1] for i in history]) if history else zero_hist
        cand_t = np.stack([cache[nid][0] for nid, _ in imp.candidates])
        cand_p = np.stack([cache[nid][1] for nid, _ in imp.candidates])
        scores = model.score_impression_np(hist_t, hist_p, cand_t, cand_p)
        n_pos = int(labels.sum())
        if 0 < n_pos < labels.size:
            sums["auc"] += auc(scores, labels)
            counts.scored_auc += 1
        else:
            counts.skipped_single_class += 1
        if n_pos > 0:
            sums["mrr"] += mrr(scores, labels)
            sums["ndcg@5"] += ndcg_at_k(scores, labels, 5)
            sums["ndcg@10"] += ndcg_at_k(scores, labels, 10)
            counts.scored_rank += 1
        else:
            counts.skipped_no_positive += 1
    result = {
        "auc": sums["auc"] / counts.scored_auc if counts.scored_auc else float("nan"),
        "mrr": sums["mrr"] / counts.scored_rank if counts.scored_rank else float("nan"),
        "ndcg@5": sums["ndcg@5"] / counts.scored_rank if counts.scored_rank else float("nan"),
        "ndcg@10": sums["ndcg@10"] / counts.scored_rank if counts.scored_rank else float("nan"),
    }
    result["counts"] = {
        "impressions": len(impressions),
        "scored_auc": counts.scored_auc,
        "scored_rank": counts.scored_rank,
        "skipped_single_class": counts.skipped_single_class,
        "skipped_no_positive": counts.skipped_no_positive,
    }
    return result


@dataclass
class MetricReport:
    """Mean ± std of each metric across runs, plus the per-run values."""

    run_seeds: list[int]
    per_run: list[dict]  # one {metric: value} dict per run
    n_impressions: int
    mean: dict = field(init=False)
    std: dict = field(init=False)

    def __post_init__(self):
        self.mean = {}
        self.std = {}
        for name in METRIC_NAMES:
            values = np.array([run[name] for run in self.per_run], dtype=np.float64)
            self.mean[name] = float(values.mean())
            self.std[name] = float(values.std(ddof=1)) if values.size > 1 else 0.0

    def to_dict(self) -> dict:
        return {
            "run_seeds": list(self.run_seeds),
            "n_impressions": self.n_impressions,
            "per_run": self.per_run,
            "mean": self.mean,
            "std": self.std,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), indent=2, **kwargs)

    def table(self, label: str = "model") -> str:
        return format_table({label: self})


def aggregate_runs(per_run_metrics: list[dict], seeds: list[int], n_impressions: int) -> MetricReport:
    """Collect repeated-run metric dicts into one report."""
    if not per_run_metrics:
        raise ValueError("aggregate_runs needs at least one run")
    if len(per_run_metrics) != len(seeds):
        raise ValueError(f"{len(per_run_metrics)} runs but {len(seeds)} seeds")
    cleaned = [{name: run[name] for name in METRIC_NAMES} for run in per_run_metrics]
    return MetricReport(run_seeds=list(seeds), per_run=cleaned, n_impressions=n_impressions)


def format_table(reports: dict[str, MetricReport]) -> str:
    """Aligned text table, one row per labeled report: AUC, MRR, NDCG@5, NDCG@10."""
    headers = ["model", "AUC", "MRR", "NDCG@5", "NDCG@10"]
    rows = [headers]
    for label, report in reports.items():
        cells = [label]
        for name in METRIC_NAMES:
            cells.append(f"{report.mean[name]:.4f}±{report.std[name]:.4f}")
        rows.append(cells)
    widths = [max(len(row[c]) for row in rows) for c in range(len(headers))]
    lines = ["  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)).rstrip() for row in rows]
    return "\n".join(lines)


def evaluate(model, news: NewsTable, impressions: list[ImpressionSample], seeds: list[int], history_max: int = 50) -> MetricReport:
    """Repeat evaluation once per seed and aggregate.

    Scoring is deterministic, so with a single fixed model the std is zero;
    the seeds exist because repeated *training* runs (handled by the ablation
    driver) are what vary. Kept for protocol symmetry.
    """
    if not seeds:
        raise ValueError("seeds must be non-empty")
    runs = [evaluate_model(model, news, impressions, history_max=history_max) for _ in seeds]
    return aggregate_runs(runs, seeds, n_impressions=len(impressions))
