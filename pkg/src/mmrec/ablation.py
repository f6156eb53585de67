"""Variant comparison runs.

Trains each requested model variant with the same data, seeds, and
non-variant hyperparameters, evaluates every trained model on the dev split,
and reports per-variant means/stds plus pairwise mean deltas. Output is dual:
a JSON document for machine diffing and a markdown table for human review.

Each (variant, seed) run is fully independent — fresh model, fresh optimizer
— so runs could execute in separate processes; this driver keeps them
sequential for determinism and simplicity. Thread caps (``MMREC_THREADS``)
are applied by the CLI before work starts.
"""

from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .data import ImpressionSample, NewsTable, Vocabulary
from .metrics import METRIC_NAMES, MetricReport, aggregate_runs, evaluate_model, format_table
from .training import train

__all__ = ["AblationReport", "ablate"]

logger = logging.getLogger(__name__)


@dataclass
class AblationReport:
    """Per-variant metric reports over shared seeds, plus pairwise deltas."""

    labels: list[str]  # run labels in input order; duplicates suffixed
    variants: dict[str, str]  # label -> variant name
    seeds: list[int]
    reports: dict[str, MetricReport]  # label -> aggregated metrics
    split: str = "dev"
    elapsed_s: float = 0.0
    deltas: dict[str, dict[str, float]] = field(init=False)

    def __post_init__(self):
        self.deltas = {}
        for a, b in itertools.combinations(self.labels, 2):
            self.deltas[f"{a} - {b}"] = {
                name: self.reports[a].mean[name] - self.reports[b].mean[name]
                for name in METRIC_NAMES
            }

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "variants": self.variants,
            "seeds": list(self.seeds),
            "split": self.split,
            "elapsed_s": self.elapsed_s,
            "reports": {label: r.to_dict() for label, r in self.reports.items()},
            "deltas": self.deltas,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_markdown(self) -> str:
        lines = [
            f"# Variant comparison ({self.split} split)",
            "",
            f"Seeds: {', '.join(str(s) for s in self.seeds)}",
            "",
            "| model | AUC | MRR | NDCG@5 | NDCG@10 |",
            "| --- | --- | --- | --- | --- |",
        ]
        for label in self.labels:
            r = self.reports[label]
            cells = " | ".join(
                f"{r.mean[name]:.4f}±{r.std[name]:.4f}" for name in METRIC_NAMES
            )
            lines.append(f"| {label} | {cells} |")
        lines += ["", "## Pairwise deltas (mean)", "", "| pair | AUC | MRR | NDCG@5 | NDCG@10 |", "| --- | --- | --- | --- | --- |"]
        for pair, values in self.deltas.items():
            cells = " | ".join(f"{values[name]:+.4f}" for name in METRIC_NAMES)
            lines.append(f"| {pair} | {cells} |")
        lines.append("")
        return "\n".join(lines)

    def table(self) -> str:
        return format_table({label: self.reports[label] for label in self.labels})


def _labels_for(variants: list[str]) -> list[str]:
    seen: dict[str, int] = {}
    labels = []
    for v in variants:
        seen[v] = seen.get(v, 0) + 1
        labels.append(v if seen[v] == 1 else f"{v}#{seen[v]}")
    return labels


def ablate(
    config,
    variants: list[str],
    seeds: list[int],
    news: NewsTable,
    splits: dict[str, list[ImpressionSample]],
    vocab: Vocabulary,
    out_dir: str | Path | None = None,
) -> AblationReport:
    """Train/evaluate every (variant, seed) pair on identical data.

    ``config`` supplies all non-variant hyperparameters (see
    :class:`~mmrec.config.ExperimentConfig`); only the variant field changes
    between runs, and the run seed drives both model initialization and
    training-time randomness. The final model of each run is evaluated on
    ``splits["dev"]``.
    """
    if len(variants) < 2:
        raise ValueError(f"ablation needs at least 2 variants, got {variants}")
    if not seeds:
        raise ValueError("ablation needs at least one seed")
    if "train" not in splits or "dev" not in splits:
        raise ValueError("ablation needs 'train' and 'dev' splits")
    labels = _labels_for(variants)
    t0 = time.perf_counter()
    out_path = Path(out_dir) if out_dir is not None else None
    reports: dict[str, MetricReport] = {}
    for label, variant in zip(labels, variants):
        per_run = []
        for seed in seeds:
            run_cfg = config.replace(variant=variant, seed=seed)
            model = run_cfg.build_model(len(vocab))
            run_dir = out_path / label / f"seed{seed}" if out_path else None
            result = train(
                model,
                news,
                splits["train"],
                run_cfg.train_config(),
                dev_impressions=None,  # evaluated once below, on the final model
                out_dir=run_dir,
                vocab_hash=vocab.content_hash(),
            )
            metrics = evaluate_model(
                model, news, splits["dev"], history_max=run_cfg.history_max
            )
            per_run.append(metrics)
            logger.info(
                "%s seed %d: final loss %.4f, dev auc %.4f",
                label, seed, result.losses[-1], metrics["auc"],
            )
        reports[label] = aggregate_runs(per_run, list(seeds), len(splits["dev"]))
    return AblationReport(
        labels=labels,
        variants=dict(zip(labels, variants)),
        seeds=list(seeds),
        reports=reports,
        elapsed_s=time.perf_counter() - t0,
    )
