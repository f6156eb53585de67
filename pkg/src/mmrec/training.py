"""Negative-sampling training: sample construction, loss, Adam, loop, checkpoints.

Each clicked candidate becomes one training sample holding the user's click
history, the clicked (positive) news id, and ``k_neg`` non-clicked ids drawn
uniformly from the same impression (with replacement only when that
impression has fewer than ``k_neg`` negatives). A batch stacks ``1 + k_neg``
scores per sample with the positive in column 0 and minimizes softmax
cross-entropy against that column.

Checkpoints are a directory holding ``manifest.json`` (model construction
record, vocabulary hash, parameter names/shapes/offsets, training step,
metric snapshot) and ``params.mmrf`` (all parameters concatenated into one
float32 column, reusing the region-feature container). Loading validates
names, shapes, and the vocabulary hash, and reports the offending parameter
by name.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .data import (
    ImpressionSample,
    NewsBatch,
    NewsTable,
    read_roi_features,
    recent_history,
    write_roi_features,
)
from .encoder import EncoderConfig
from .metrics import evaluate_model
from .model import MMRecModel

__all__ = [
    "TrainConfig",
    "TrainingSample",
    "SampleBuild",
    "TrainingError",
    "CheckpointError",
    "build_samples",
    "nce_loss",
    "Adam",
    "train",
    "TrainResult",
    "save_checkpoint",
    "load_checkpoint",
]

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Unrecoverable optimization failure (e.g. non-finite gradients)."""


class CheckpointError(ValueError):
    """Checkpoint directory malformed or inconsistent with the model."""


@dataclass
class TrainConfig:
    """Optimization hyperparameters.

    The default learning rate targets training from random initialization at
    desk scale; the much smaller published-preset rate (1e-5 with batch 32,
    selectable via :meth:`paper_preset`) assumes finetuning a large
    pretrained encoder.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 3
    k_neg: int = 4
    seed: int = 0
    freeze_below: int = 0
    grad_clip_norm: float = 5.0  # 0 disables clipping
    history_max: int = 50

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.k_neg < 1:
            raise ValueError(f"k_neg must be >= 1, got {self.k_neg}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.grad_clip_norm < 0:
            raise ValueError(f"grad_clip_norm must be >= 0, got {self.grad_clip_norm}")
        if self.history_max < 1:
            raise ValueError(f"history_max must be >= 1, got {self.history_max}")

    @classmethod
    def paper_preset(cls, **overrides) -> "TrainConfig":
        base = dict(lr=1e-5, batch_size=32)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TrainingSample:
    history: list[str]
    positive: str
    negatives: list[str]


@dataclass
class SampleBuild:
    """Samples plus counts of impressions/positives that could not be used."""

    samples: list[TrainingSample]
    skipped_no_negatives: int = 0
    skipped_empty_history: int = 0


def build_samples(impressions: list[ImpressionSample], k_neg: int, seed: int) -> SampleBuild:
    """One sample per clicked candidate, negatives from the same impression.

    Deterministic given ``seed``. Positives whose impression offers zero
    negatives are skipped and counted, as are positives of users with an
    empty click history (their score is a constant under the cold-start
    policy, so they carry no gradient).
    """
    if k_neg < 1:
        raise ValueError(f"k_neg must be >= 1, got {k_neg}")
    rng = np.random.default_rng(seed)
    build = SampleBuild(samples=[])
    for imp in impressions:
        positives = [nid for nid, label in imp.candidates if label == 1]
        negatives = [nid for nid, label in imp.candidates if label == 0]
        if not positives:
            continue
        if not imp.history:
            build.skipped_empty_history += len(positives)
            continue
        if not negatives:
            build.skipped_no_negatives += len(positives)
            continue
        for pos in positives:
            replace = len(negatives) < k_neg
            chosen = rng.choice(len(negatives), size=k_neg, replace=replace)
            build.samples.append(
                TrainingSample(
                    history=list(imp.history),
                    positive=pos,
                    negatives=[negatives[j] for j in chosen],
                )
            )
    if build.skipped_no_negatives or build.skipped_empty_history:
        logger.warning(
            "build_samples skipped %d positives without negatives and %d with empty history",
            build.skipped_no_negatives,
            build.skipped_empty_history,
        )
    return build


def nce_loss(scores) -> Tensor:
    """Softmax cross-entropy with column 0 (the positive) as the target.

    Accepts one score row ``(1+K,)`` or a batch ``(B, 1+K)``; returns the
    mean over rows as a scalar tensor.
    """
    if not isinstance(scores, Tensor):
        scores = Tensor(np.asarray(scores, dtype=np.float64))
    if scores.ndim == 1:
        scores = ad.reshape(scores, (1,) + scores.shape)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError(f"scores must be (B, 1+K) with K >= 1, got {scores.shape}")
    b, c = scores.shape
    target = np.zeros(c)
    target[0] = 1.0
    log_probs = ad.log_softmax(scores)
    return ad.scale(ad.reduce_sum(ad.mul(log_probs, target)), -1.0 / b)


class Adam:
    """Adam with bias correction and optional global-norm gradient clipping.

    Frozen parameters are excluded entirely. A parameter with no gradient
    this step contributes zero (its moments decay); non-finite gradients
    abort with the parameter's name.
    """

    def __init__(
        self,
        params,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        grad_clip_norm: float = 0.0,
    ):
        self.params = [p for p in params if not p.frozen]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip_norm = grad_clip_norm
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "Adam":
        return cls(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                   eps=cfg.adam_eps, grad_clip_norm=cfg.grad_clip_norm)

    def step(self) -> None:
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter '{p.name}'")
            grads.append(g)
        if self.grad_clip_norm > 0:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if total > self.grad_clip_norm:
                scale = self.grad_clip_norm / total
                grads = [g * scale for g in grads]
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# Batch assembly and the training loop


def _assemble_batch(model: MMRecModel, news: NewsTable, samples: list[TrainingSample], history_max: int):
    """Encode each unique news once and gather per-sample index matrices."""
    cfg = model.config
    histories = [recent_history(s.history, history_max) for s in samples]
    cand_lists = [[s.positive] + s.negatives for s in samples]
    unique: dict[str, int] = {}
    for ids in histories + cand_lists:
        for nid in ids:
            unique.setdefault(nid, len(unique))
    batch = NewsBatch.from_records(
        [news[nid] for nid in unique], m_max=cfg.m_max, k_max=cfg.k_max, d_img=cfg.d_img, tight=True
    )
    b = len(samples)
    p = max(len(h) for h in histories)
    c = len(cand_lists[0])
    hist_idx = np.zeros((b, p), dtype=np.int64)
    hist_mask = np.zeros((b, p))
    cand_idx = np.zeros((b, c), dtype=np.int64)
    for i, (h, cands) in enumerate(zip(histories, cand_lists)):
        hist_idx[i, : len(h)] = [unique[nid] for nid in h]
        hist_mask[i, : len(h)] = 1.0
        cand_idx[i] = [unique[nid] for nid in cands]
    return batch, hist_idx, hist_mask, cand_idx


def train_step(model: MMRecModel, news: NewsTable, samples: list[TrainingSample],
               optimizer: Adam, history_max: int) -> float:
    """One forward/backward/update over ``samples``; returns the batch loss."""
    batch, hist_idx, hist_mask, cand_idx = _assemble_batch(model, news, samples, history_max)
    with Tape():
        r_t, r_p = model.encode_batch(batch)
        hist_t = ad.embedding_lookup(r_t, hist_idx) if r_t is not None else None
        hist_p = ad.embedding_lookup(r_p, hist_idx) if r_p is not None else None
        cand_t = ad.embedding_lookup(r_t, cand_idx) if r_t is not None else None
        cand_p = ad.embedding_lookup(r_p, cand_idx) if r_p is not None else None
        scores = model.score_batch(hist_t, hist_p, hist_mask, cand_t, cand_p)
        loss = nce_loss(scores)
        backward(loss)
    optimizer.step()
    model.zero_grads()
    return float(loss.data)


@dataclass
class TrainResult:
    epochs: list[dict]
    best_dev_auc: float
    best_epoch: int
    sample_build: SampleBuild
    checkpoint_dir: str | None = None

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]


def train(
    model: MMRecModel,
    news: NewsTable,
    train_impressions: list[ImpressionSample],
    cfg: TrainConfig,
    dev_impressions: list[ImpressionSample] | None = None,
    out_dir: str | Path | None = None,
    vocab_hash: str = "",
) -> TrainResult:
    """Seeded mini-batch training with per-epoch logging and best-dev checkpointing.

    Per epoch: shuffle samples (generator keyed on ``cfg.seed`` and the epoch
    index), run :func:`train_step` per batch, log mean sample loss plus dev
    metrics. When ``out_dir`` is given, epoch records append to
    ``training_log.jsonl`` and the best dev-AUC weights are kept under
    ``checkpoint-best/``. Deterministic: same seed, same data → identical
    loss curves and weights.
    """
    cfg.validate()
    build = build_samples(train_impressions, cfg.k_neg, cfg.seed)
    if not build.samples:
        raise TrainingError("no usable training samples (every positive was skipped)")
    optimizer = Adam.from_config(model.parameters(), cfg)
    out_path = Path(out_dir) if out_dir is not None else None
    log_file = None
    ckpt_dir = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = out_path / "training_log.jsonl"
        log_file.write_text("")
        ckpt_dir = out_path / "checkpoint-best"

    n = len(build.samples)
    epochs: list[dict] = []
    best_auc = -math.inf
    best_epoch = -1
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 7919, epoch]).permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            chunk = [build.samples[i] for i in order[start : start + cfg.batch_size]]
            loss = train_step(model, news, chunk, optimizer, cfg.history_max)
            loss_sum += loss * len(chunk)
            step += 1
        record = {"epoch": epoch, "loss": loss_sum / n, "step": step}
        if dev_impressions:
            dev = evaluate_model(model, news, dev_impressions, history_max=cfg.history_max)
            record["dev_auc"] = dev["auc"]
            record["dev_mrr"] = dev["mrr"]
            record["dev_ndcg@5"] = dev["ndcg@5"]
            record["dev_ndcg@10"] = dev["ndcg@10"]
            if dev["auc"] > best_auc:
                best_auc = dev["auc"]
                best_epoch = epoch
                if ckpt_dir is not None:
                    save_checkpoint(model, ckpt_dir, vocab_hash=vocab_hash, step=step,
                                    metrics={k: v for k, v in record.items() if k != "epoch"})
        epochs.append(record)
        logger.info("epoch %d: %s", epoch, record)
        if log_file is not None:
            with log_file.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
    if ckpt_dir is not None and best_epoch < 0:
        # No dev set: keep final weights so training always yields an artifact.
        save_checkpoint(model, ckpt_dir, vocab_hash=vocab_hash, step=step, metrics={})
    return TrainResult(
        epochs=epochs,
        best_dev_auc=best_auc if best_epoch >= 0 else float("nan"),
        best_epoch=best_epoch,
        sample_build=build,
        checkpoint_dir=str(ckpt_dir) if ckpt_dir is not None else None,
    )


# ---------------------------------------------------------------------------
# Checkpoint I/O

_MANIFEST = "manifest.json"
_PARAMS = "params.mmrf"


def save_checkpoint(model: MMRecModel, path: str | Path, vocab_hash: str = "",
                    step: int = 0, metrics: dict | None = None) -> Path:
    """Write ``manifest.json`` + ``params.mmrf`` (float32) under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    entries = []
    offset = 0
    chunks = []
    for p in params:
        size = int(p.data.size)
        entries.append({"name": p.name, "shape": list(p.data.shape), "offset": offset, "size": size})
        chunks.append(p.data.reshape(-1, 1))
        offset += size
    blob = np.concatenate(chunks, axis=0).astype(np.float32)
    write_roi_features(path / _PARAMS, blob)
    manifest = {
        "format": "mmrec-checkpoint",
        "version": 1,
        "model": model.describe(),
        "vocab_hash": vocab_hash,
        "step": int(step),
        "metrics": metrics or {},
        "params": entries,
    }
    (path / _MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_checkpoint(path: str | Path, expected_vocab_hash: str | None = None) -> tuple[MMRecModel, dict]:
    """Rebuild the model from a checkpoint directory; returns (model, manifest).

    Errors name the offending parameter: missing tensor, extra tensor, shape
    mismatch, or a vocabulary hash that differs from ``expected_vocab_hash``.
    """
    path = Path(path)
    manifest_path = path / _MANIFEST
    if not manifest_path.exists():
        raise CheckpointError(f"no {_MANIFEST} in {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != "mmrec-checkpoint":
        raise CheckpointError(f"{manifest_path} is not a checkpoint manifest")
    if expected_vocab_hash is not None and manifest.get("vocab_hash") != expected_vocab_hash:
        raise CheckpointError(
            f"vocabulary hash mismatch: checkpoint {manifest.get('vocab_hash')!r} vs data {expected_vocab_hash!r}"
        )
    spec = manifest["model"]
    model = MMRecModel(
        EncoderConfig(**spec["encoder"]),
        vocab_size=spec["vocab_size"],
        variant=spec["variant"],
        seed=spec.get("seed", 0),
        scaled_attention=spec.get("scaled_attention", False),
    )
    blob = read_roi_features(path / _PARAMS).astype(np.float64).reshape(-1)
    by_name = {e["name"]: e for e in manifest["params"]}
    model_names = [p.name for p in model.parameters()]
    extra = set(by_name) - set(model_names)
    if extra:
        raise CheckpointError(f"checkpoint contains unknown parameter '{sorted(extra)[0]}'")
    for p in model.parameters():
        entry = by_name.get(p.name)
        if entry is None:
            raise CheckpointError(f"checkpoint missing parameter '{p.name}'")
        if tuple(entry["shape"]) != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for parameter '{p.name}': checkpoint {tuple(entry['shape'])}, model {p.data.shape}"
            )
        start, size = entry["offset"], entry["size"]
        if start + size > blob.size:
            raise CheckpointError(f"tensor blob too short for parameter '{p.name}'")
        p.data[...] = blob[start : start + size].reshape(p.data.shape)
    return model, manifest
