"""News/behavior data model, file formats, and fixed-shape padding.

File formats (all little-endian / UTF-8):

* ``roi.mmrf``     binary region features: magic ``MMRF``, u32 version=1,
                   u32 num_rows, u32 feat_dim, then num_rows*feat_dim float32.
* ``news.jsonl``   one JSON object per line: id, title, roi_row_offset,
                   roi_count, roi_boxes.
* ``behaviors_*.tsv``  impression_id, user_id, space-separated history ids,
                   space-separated ``newsid-label`` candidate entries.
* ``vocab.txt``    one token per line; line i (0-based) holds the token with
                   id i+2 (ids 0 and 1 are reserved for PAD and UNK).
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID = 0
UNK_ID = 1

MMRF_MAGIC = b"MMRF"
MMRF_VERSION = 1
_MMRF_HEADER = struct.Struct("<4sIII")


class DataFormatError(ValueError):
    """A data file violates its format contract."""


# ---------------------------------------------------------------------------
# Region-feature binary format


def write_roi_features(path, rows: np.ndarray) -> None:
    """Write an R x d float32 matrix in the MMRF layout."""
    rows = np.ascontiguousarray(rows, dtype=np.float32)
    if rows.ndim != 2:
        raise DataFormatError(f"feature rows must be 2-D, got shape {rows.shape}")
    if rows.size and not np.all(np.isfinite(rows)):
        raise DataFormatError("feature rows must be finite")
    with open(path, "wb") as fh:
        fh.write(_MMRF_HEADER.pack(MMRF_MAGIC, MMRF_VERSION, rows.shape[0], rows.shape[1]))
        fh.write(rows.astype("<f4").tobytes())


def read_roi_features(path) -> np.ndarray:
    """Read an MMRF file back; bit-exact inverse of ``write_roi_features``."""
    blob = Path(path).read_bytes()
    if len(blob) < _MMRF_HEADER.size:
        raise DataFormatError(
            f"truncated header: file ends at byte {len(blob)}, header needs {_MMRF_HEADER.size}"
        )
    magic, version, num_rows, feat_dim = _MMRF_HEADER.unpack_from(blob, 0)
    if magic != MMRF_MAGIC:
        raise DataFormatError(f"bad magic {magic!r} at byte 0, expected {MMRF_MAGIC!r}")
    if version != MMRF_VERSION:
        raise DataFormatError(f"unsupported version {version} at byte 4")
    expected = _MMRF_HEADER.size + 4 * num_rows * feat_dim
    if len(blob) < expected:
        raise DataFormatError(f"truncated body: file ends at byte {len(blob)}, expected {expected}")
    if len(blob) > expected:
        raise DataFormatError(f"trailing data at byte {expected}")
    flat = np.frombuffer(blob, dtype="<f4", offset=_MMRF_HEADER.size)
    return flat.reshape(num_rows, feat_dim).copy()


# ---------------------------------------------------------------------------
# Domain types


@dataclass
class NewsRecord:
    news_id: str
    title_tokens: list[str]
    roi_features: np.ndarray  # K x d_img float32
    roi_boxes: np.ndarray  # K x 4 normalized [x1, y1, x2, y2]
    has_image: bool
    title_ids: np.ndarray | None = None  # filled once a vocabulary is applied

    def __post_init__(self):
        k = self.roi_features.shape[0]
        if self.roi_boxes.shape != (k, 4):
            raise DataFormatError(
                f"news {self.news_id}: {k} feature rows but boxes shaped {self.roi_boxes.shape}"
            )
        if not self.has_image and k != 0:
            raise DataFormatError(f"news {self.news_id}: imageless news must have 0 ROIs")
        if k:
            b = self.roi_boxes
            if not (np.all(b[:, 0] < b[:, 2]) and np.all(b[:, 1] < b[:, 3])):
                raise DataFormatError(f"news {self.news_id}: box corners must satisfy x1<x2, y1<y2")


@dataclass
class ImpressionSample:
    impression_id: str
    user_id: str
    history: list[str]
    candidates: list[tuple[str, int]]

    def __post_init__(self):
        if not self.candidates:
            raise DataFormatError(f"impression {self.impression_id} has no candidates")
        for news_id, label in self.candidates:
            if label not in (0, 1):
                raise DataFormatError(
                    f"impression {self.impression_id}: label {label!r} for {news_id} not in {{0,1}}"
                )


class NewsTable:
    """Ordered collection of news records, addressable by id."""

    def __init__(self, records: list[NewsRecord]):
        self._by_id: dict[str, NewsRecord] = {}
        for rec in records:
            if rec.news_id in self._by_id:
                raise DataFormatError(f"duplicate news id {rec.news_id}")
            self._by_id[rec.news_id] = rec

    def __getitem__(self, news_id: str) -> NewsRecord:
        return self._by_id[news_id]

    def __contains__(self, news_id: str) -> bool:
        return news_id in self._by_id

    def __iter__(self):
        return iter(self._by_id.values())

    def __len__(self) -> int:
        return len(self._by_id)

    @property
    def ids(self) -> list[str]:
        return list(self._by_id.keys())

    def apply_vocab(self, vocab: "Vocabulary") -> None:
        for rec in self._by_id.values():
            rec.title_ids = np.array([vocab.id_for(t) for t in rec.title_tokens], dtype=np.int64)


@dataclass
class Vocabulary:
    """Token to id map with reserved ids 0=PAD and 1=UNK."""

    tokens: list[str]
    _ids: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._ids = {tok: i + 2 for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise DataFormatError("vocabulary contains duplicate tokens")

    def id_for(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def __len__(self) -> int:
        return len(self.tokens) + 2

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.splitlines() if line])


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(title: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumerics."""
    return _TOKEN_RE.findall(title.lower())


def build_vocab(news: NewsTable, min_count: int = 1) -> Vocabulary:
    """Count-thresholded vocabulary, ordered by (count desc, token asc)."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for rec in news:
        counts.update(rec.title_tokens)
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(kept)


# ---------------------------------------------------------------------------
# Loaders


def load_news(
    jsonl_path,
    feature_path,
    vocab: Vocabulary | None = None,
    max_title_tokens: int = 30,
) -> NewsTable:
    """Load the news table; titles are tokenized and truncated here.

    A title that tokenizes to nothing is mapped to a single UNK token so that
    every loaded news has at least one valid text position.
    """
    features = read_roi_features(feature_path)
    records = []
    with open(jsonl_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{jsonl_path}: malformed JSON on line {lineno}: {exc}") from exc
            try:
                news_id = obj["id"]
                title = obj["title"]
                offset = int(obj["roi_row_offset"])
                count = int(obj["roi_count"])
                boxes = np.asarray(obj["roi_boxes"], dtype=np.float64).reshape(count, 4)
            except (KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{jsonl_path}: bad record on line {lineno}: {exc}") from exc
            if offset < 0 or offset + count > features.shape[0]:
                raise DataFormatError(
                    f"{jsonl_path}: line {lineno}: ROI rows [{offset}, {offset + count}) exceed "
                    f"feature file with {features.shape[0]} rows"
                )
            tokens = tokenize(title)[:max_title_tokens]
            records.append(
                NewsRecord(
                    news_id=news_id,
                    title_tokens=tokens,
                    roi_features=features[offset : offset + count],
                    roi_boxes=boxes,
                    has_image=count > 0,
                )
            )
    table = NewsTable(records)
    if vocab is not None:
        table.apply_vocab(vocab)
        for rec in table:
            if rec.title_ids.size == 0:
                rec.title_ids = np.array([UNK_ID], dtype=np.int64)
    return table


def load_behaviors(tsv_path) -> list[ImpressionSample]:
    samples = []
    with open(tsv_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise DataFormatError(f"{tsv_path}: line {lineno}: expected 4 fields, got {len(fields)}")
            imp_id, user_id, history_field, cand_field = fields
            history = history_field.split() if history_field else []
            candidates = []
            for entry in cand_field.split():
                news_id, sep, label_str = entry.rpartition("-")
                if not sep or label_str not in ("0", "1"):
                    raise DataFormatError(
                        f"{tsv_path}: line {lineno}: candidate entry {entry!r} must be 'newsid-0' or 'newsid-1'"
                    )
                candidates.append((news_id, int(label_str)))
            samples.append(ImpressionSample(imp_id, user_id, history, candidates))
    return samples


def save_behaviors(path, samples: list[ImpressionSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            cands = " ".join(f"{nid}-{label}" for nid, label in s.candidates)
            fh.write(f"{s.impression_id}\t{s.user_id}\t{' '.join(s.history)}\t{cands}\n")


# ---------------------------------------------------------------------------
# Fixed-shape padding


def recent_history(history: list[str], max_len: int) -> list[str]:
    """Keep the most recent ``max_len`` clicks, original order preserved."""
    return history[-max_len:] if max_len else []


def _box_vector(boxes: np.ndarray) -> np.ndarray:
    """[x1, y1, x2, y2, area] spatial encoding rows."""
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return np.concatenate([boxes, area[:, None]], axis=1)


@dataclass
class NewsBatch:
    """Stacked fixed-shape arrays for a list of news records.

    Imageless news get one synthetic ROI slot (slot 0) marked in
    ``roi_placeholder``; the encoder substitutes its learned placeholder
    embedding there, so masks always select at least one image position.
    """

    title_ids: np.ndarray  # B x M int64
    title_mask: np.ndarray  # B x M float (1.0 = real token)
    roi_features: np.ndarray  # B x K x d_img
    roi_boxvec: np.ndarray  # B x K x 5
    roi_mask: np.ndarray  # B x K float
    roi_placeholder: np.ndarray  # B x K float (1.0 = placeholder slot)

    @classmethod
    def from_records(
        cls, records: list[NewsRecord], m_max: int, k_max: int, d_img: int, tight: bool = False
    ) -> "NewsBatch":
        """Stack records, truncating titles at ``m_max`` and regions at ``k_max``.

        ``tight=True`` pads only to the longest row actually present in the
        batch (still capped by the maxima) instead of to the caps; padded
        slots are fully masked either way, so outputs are unaffected — this
        is purely a compute saving for training loops.
        """
        b = len(records)
        if tight and b:
            lens = [len(r.title_ids) for r in records if r.title_ids is not None]
            if lens:
                m_max = max(1, min(m_max, max(lens)))
            k_max = max(1, min(k_max, max(r.roi_features.shape[0] for r in records)))
        title_ids = np.full((b, m_max), PAD_ID, dtype=np.int64)
        title_mask = np.zeros((b, m_max))
        feats = np.zeros((b, k_max, d_img))
        boxvec = np.zeros((b, k_max, 5))
        roi_mask = np.zeros((b, k_max))
        placeholder = np.zeros((b, k_max))
        for i, rec in enumerate(records):
            if rec.title_ids is None:
                raise ValueError(f"news {rec.news_id} has no title ids; apply a vocabulary first")
            ids = rec.title_ids[:m_max]
            title_ids[i, : len(ids)] = ids
            title_mask[i, : len(ids)] = 1.0
            if rec.has_image:
                k = min(rec.roi_features.shape[0], k_max)
                feats[i, :k] = rec.roi_features[:k].astype(np.float64)
                boxvec[i, :k] = _box_vector(rec.roi_boxes[:k])
                roi_mask[i, :k] = 1.0
            else:
                roi_mask[i, 0] = 1.0
                placeholder[i, 0] = 1.0
        return cls(title_ids, title_mask, feats, boxvec, roi_mask, placeholder)

    def __len__(self) -> int:
        return self.title_ids.shape[0]
