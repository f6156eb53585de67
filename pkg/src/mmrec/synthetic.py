"""Synthetic click-log generator with a planted topical signal.

Each topic owns a fixed random unit centroid in feature space and a private
word list. A news item draws one topic: its ROI rows are noisy copies of the
centroid, and its title mixes topic words with common words. With probability
``image_only_fraction`` the title uses only common words, so the topic is
visible in the image alone (the crossmodal-only case). Users prefer two
topics; candidates are clicked at ``pos_rate_on_topic`` when their topic
matches a user preference and ``pos_rate_off_topic`` otherwise, so learnable
signal exists while the overall click-through rate stays realistically low.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import json
import numpy as np

from .data import (
    ImpressionSample,
    NewsRecord,
    NewsTable,
    Vocabulary,
    build_vocab,
    save_behaviors,
    write_roi_features,
)


@dataclass
class SyntheticConfig:
    num_topics: int = 10
    topic_words_per_topic: int = 12
    common_words: int = 80
    num_news: int = 400
    num_users: int = 200
    num_impressions: int = 3000
    candidates_per_impression: int = 10
    d_img: int = 64
    max_rois: int = 8
    roi_noise_sigma: float = 0.1
    image_only_fraction: float = 0.5  # chance a title carries no topic words
    no_image_fraction: float = 0.1
    pos_rate_on_topic: float = 0.18
    pos_rate_off_topic: float = 0.005
    history_len_min: int = 3
    history_len_max: int = 12
    title_len_min: int = 4
    title_len_max: int = 10
    dev_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.pos_rate_on_topic <= self.pos_rate_off_topic:
            raise ValueError("pos_rate_on_topic must exceed pos_rate_off_topic")
        for name in ("image_only_fraction", "no_image_fraction", "dev_fraction", "test_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.dev_fraction + self.test_fraction >= 1.0:
            raise ValueError("dev_fraction + test_fraction must leave room for training data")
        for name in (
            "num_topics",
            "topic_words_per_topic",
            "common_words",
            "num_news",
            "num_users",
            "num_impressions",
            "candidates_per_impression",
            "d_img",
            "max_rois",
            "history_len_min",
            "history_len_max",
            "title_len_min",
            "title_len_max",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.history_len_max < self.history_len_min:
            raise ValueError("history_len_max must be >= history_len_min")
        if self.title_len_max < self.title_len_min:
            raise ValueError("title_len_max must be >= title_len_min")
        if self.num_topics < 2:
            raise ValueError("need at least 2 topics for distinct user preferences")

    def expected_ctr(self) -> float:
        """Closed-form click rate implied by the label model."""
        on = 2.0 / self.num_topics
        return on * self.pos_rate_on_topic + (1.0 - on) * self.pos_rate_off_topic


@dataclass
class SyntheticData:
    """In-memory result of one generation run, plus where it was written."""

    news: NewsTable
    vocab: Vocabulary
    splits: dict[str, list[ImpressionSample]]
    news_topics: dict[str, int] = field(repr=False, default_factory=dict)
    paths: dict[str, Path] = field(default_factory=dict)


def generate_synthetic(cfg: SyntheticConfig, out_dir) -> SyntheticData:
    """Generate and write one dataset; byte-identical for a fixed seed."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    centroids = rng.normal(size=(cfg.num_topics, cfg.d_img))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)

    topic_words = [
        [f"topic{t}word{j}" for j in range(cfg.topic_words_per_topic)]
        for t in range(cfg.num_topics)
    ]
    common_words = [f"common{j}" for j in range(cfg.common_words)]

    records: list[NewsRecord] = []
    news_topics: dict[str, int] = {}
    feature_rows: list[np.ndarray] = []
    jsonl_lines: list[str] = []
    row_cursor = 0
    for i in range(cfg.num_news):
        news_id = f"news{i:05d}"
        topic = int(rng.integers(cfg.num_topics))
        news_topics[news_id] = topic

        length = int(rng.integers(cfg.title_len_min, cfg.title_len_max + 1))
        crossmodal_only = rng.random() < cfg.image_only_fraction
        words = []
        for pos in range(length):
            topical = not crossmodal_only and (pos == 0 or rng.random() < 0.5)
            if topical:
                words.append(topic_words[topic][int(rng.integers(cfg.topic_words_per_topic))])
            else:
                words.append(common_words[int(rng.integers(cfg.common_words))])
        title = " ".join(words)

        has_image = rng.random() >= cfg.no_image_fraction
        if has_image:
            k = int(rng.integers(1, cfg.max_rois + 1))
            feats = centroids[topic] + rng.normal(scale=cfg.roi_noise_sigma, size=(k, cfg.d_img))
            feats = feats.astype(np.float32)
            x1 = rng.uniform(0.0, 0.45, size=k)
            x2 = rng.uniform(0.55, 1.0, size=k)
            y1 = rng.uniform(0.0, 0.45, size=k)
            y2 = rng.uniform(0.55, 1.0, size=k)
            boxes = np.stack([x1, y1, x2, y2], axis=1)
        else:
            k = 0
            feats = np.zeros((0, cfg.d_img), dtype=np.float32)
            boxes = np.zeros((0, 4))

        records.append(
            NewsRecord(
                news_id=news_id,
                title_tokens=words,
                roi_features=feats,
                roi_boxes=boxes,
                has_image=has_image,
            )
        )
        feature_rows.append(feats)
        jsonl_lines.append(
            json.dumps(
                {
                    "id": news_id,
                    "title": title,
                    "roi_row_offset": row_cursor,
                    "roi_count": k,
                    "roi_boxes": boxes.tolist(),
                }
            )
        )
        row_cursor += k

    news = NewsTable(records)
    vocab = build_vocab(news, min_count=1)
    news.apply_vocab(vocab)

    by_topic: dict[int, list[str]] = {t: [] for t in range(cfg.num_topics)}
    for rec in records:
        by_topic[news_topics[rec.news_id]].append(rec.news_id)

    user_topics = []
    for _ in range(cfg.num_users):
        user_topics.append(tuple(rng.choice(cfg.num_topics, size=2, replace=False)))

    impressions: list[ImpressionSample] = []
    for j in range(cfg.num_impressions):
        uid = int(rng.integers(cfg.num_users))
        preferred = user_topics[uid]
        pool = by_topic[preferred[0]] + by_topic[preferred[1]]
        length = int(rng.integers(cfg.history_len_min, cfg.history_len_max + 1))
        replace = length > len(pool)
        history = [pool[k] for k in rng.choice(len(pool), size=length, replace=replace)] if pool else []

        cand_idx = rng.choice(cfg.num_news, size=cfg.candidates_per_impression, replace=False)
        candidates = []
        for ci in cand_idx:
            nid = f"news{int(ci):05d}"
            rate = cfg.pos_rate_on_topic if news_topics[nid] in preferred else cfg.pos_rate_off_topic
            candidates.append((nid, int(rng.random() < rate)))
        impressions.append(
            ImpressionSample(
                impression_id=f"imp{j:06d}",
                user_id=f"user{uid:04d}",
                history=history,
                candidates=candidates,
            )
        )

    n_dev = int(round(cfg.num_impressions * cfg.dev_fraction))
    n_test = int(round(cfg.num_impressions * cfg.test_fraction))
    n_train = cfg.num_impressions - n_dev - n_test
    splits = {
        "train": impressions[:n_train],
        "dev": impressions[n_train : n_train + n_dev],
        "test": impressions[n_train + n_dev :],
    }

    paths = {
        "news": out / "news.jsonl",
        "features": out / "roi.mmrf",
        "vocab": out / "vocab.txt",
    }
    paths["news"].write_text("".join(line + "\n" for line in jsonl_lines), encoding="utf-8")
    all_rows = (
        np.concatenate(feature_rows, axis=0)
        if row_cursor
        else np.zeros((0, cfg.d_img), dtype=np.float32)
    )
    write_roi_features(paths["features"], all_rows)
    vocab.save(paths["vocab"])
    for split, samples in splits.items():
        paths[split] = out / f"behaviors_{split}.tsv"
        save_behaviors(paths[split], samples)

    return SyntheticData(news=news, vocab=vocab, splits=splits, news_topics=news_topics, paths=paths)


def config_to_dict(cfg: SyntheticConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
