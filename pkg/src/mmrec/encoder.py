"""Multimodal news encoder.

A news article enters as a token-id title plus a set of image-region feature
vectors. The title is embedded (word + learned position embeddings), refined
by pre-norm self-attention layers, then both streams pass through
co-attention layers in which each modality queries the other. Finally an
additive attention pool collapses each stream into a single vector, yielding
the pair ``(r_t, r_p)`` that downstream scoring consumes.

All forward math runs through :mod:`mmrec.autodiff` tensors so the encoder
is differentiable end to end. Batched inputs use shape ``(B, n, d)``; the
per-news convenience entry points accept unbatched arrays as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .data import NewsBatch, NewsRecord

__all__ = ["EncoderConfig", "NewsEncoding", "NewsEncoder"]

# Geometry of one region: corner coordinates plus area.
BOX_VECTOR_DIM = 5


@dataclass
class EncoderConfig:
    """Hyperparameters of the news encoder.

    ``freeze_below=f`` freezes the input embeddings/projections and the
    first ``f`` transformer layers (text layers first, then co-attention
    layers); the attention-pool parameters always stay trainable. This
    mirrors finetuning only the top of a pretrained stack.
    """

    d: int = 64
    d_img: int = 64
    d_a: int = 32
    heads: int = 4
    n_text_layers: int = 2
    n_co_layers: int = 1
    m_max: int = 30
    k_max: int = 8
    ffn_mult: int = 4
    freeze_below: int = 0

    def validate(self) -> None:
        for f in fields(self):
            if f.name == "freeze_below":
                continue
            value = getattr(self, f.name)
            if not isinstance(value, int) or value <= 0:
                if f.name == "n_co_layers" and value == 0:
                    continue  # fusion can be ablated away entirely
                raise ValueError(f"EncoderConfig.{f.name} must be a positive integer, got {value!r}")
        if self.d % self.heads != 0:
            raise ValueError(f"hidden dim {self.d} is not divisible by {self.heads} heads")
        n_layers = self.n_text_layers + self.n_co_layers
        if not (0 <= self.freeze_below <= n_layers):
            raise ValueError(
                f"freeze_below={self.freeze_below} outside [0, {n_layers}] "
                f"(= n_text_layers + n_co_layers)"
            )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class NewsEncoding:
    """Pooled representation of one news item: text vector and image vector."""

    r_t: np.ndarray
    r_p: np.ndarray


def _frozen_prefixes(cfg: EncoderConfig) -> tuple[str, ...]:
    if cfg.freeze_below <= 0:
        return ()
    prefixes = ["embed."]
    prefixes += [f"text_{i}." for i in range(min(cfg.freeze_below, cfg.n_text_layers))]
    prefixes += [f"co_{j}." for j in range(max(0, cfg.freeze_below - cfg.n_text_layers))]
    return tuple(prefixes)


class NewsEncoder:
    """Differentiable two-stream news encoder.

    Parameters are float64 and initialized uniformly in ``±1/sqrt(d)``
    (layer-norm gains start at 1, all biases at 0) from a seeded generator,
    so construction is deterministic. ``parameters()`` exposes them in a
    fixed order for optimizers and checkpoints.
    """

    def __init__(self, config: EncoderConfig, vocab_size: int, seed: int = 0):
        config.validate()
        if vocab_size < 2:
            raise ValueError(f"vocab_size must cover PAD and UNK ids, got {vocab_size}")
        self.config = config
        self.vocab_size = vocab_size
        self._params: dict[str, Parameter] = {}
        self._frozen = _frozen_prefixes(config)
        self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------------
    # Parameter registry

    def _add(self, name: str, data: np.ndarray) -> Parameter:
        frozen = name.startswith(self._frozen)
        p = Parameter(data, name=name, frozen=frozen)
        self._params[name] = p
        return p

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        bound = 1.0 / math.sqrt(cfg.d)

        def w(name, *shape):
            return self._add(name, rng.uniform(-bound, bound, size=shape))

        def zeros(name, *shape):
            return self._add(name, np.zeros(shape))

        def ones(name, *shape):
            return self._add(name, np.ones(shape))

        w("embed.word", self.vocab_size, cfg.d)
        w("embed.pos", cfg.m_max, cfg.d)
        w("embed.roi_w", cfg.d_img, cfg.d)
        zeros("embed.roi_b", cfg.d)
        w("embed.box_w", BOX_VECTOR_DIM, cfg.d)
        zeros("embed.box_b", cfg.d)
        w("embed.placeholder", cfg.d)

        def attention_block(prefix):
            # No key bias: shifting every key equally adds a per-query constant
            # to all scores, which the softmax cancels, so such a bias could
            # never receive gradient. The output projection starts at zero so
            # each residual branch is initially inert and the stream begins as
            # the plain embeddings — this keeps scores (hence the initial
            # ranking loss) near the uniform value.
            for proj in ("wq", "wk", "wv"):
                w(f"{prefix}{proj}", cfg.d, cfg.d)
            zeros(f"{prefix}wo", cfg.d, cfg.d)
            for b in ("bq", "bv", "bo"):
                zeros(f"{prefix}{b}", cfg.d)

        def ffn_block(prefix):
            hidden = cfg.ffn_mult * cfg.d
            w(f"{prefix}w1", cfg.d, hidden)
            zeros(f"{prefix}b1", hidden)
            zeros(f"{prefix}w2", hidden, cfg.d)  # zero-init residual output, as above
            zeros(f"{prefix}b2", cfg.d)

        for i in range(cfg.n_text_layers):
            p = f"text_{i}."
            ones(f"{p}ln1_g", cfg.d)
            zeros(f"{p}ln1_b", cfg.d)
            attention_block(p)
            ones(f"{p}ln2_g", cfg.d)
            zeros(f"{p}ln2_b", cfg.d)
            ffn_block(p)

        for j in range(cfg.n_co_layers):
            for stream in ("txt", "img"):  # "txt" = text queries image, "img" = image queries text
                p = f"co_{j}.{stream}."
                ones(f"{p}lnq_g", cfg.d)
                zeros(f"{p}lnq_b", cfg.d)
                ones(f"{p}lnkv_g", cfg.d)
                zeros(f"{p}lnkv_b", cfg.d)
                attention_block(p)
                ones(f"{p}lnf_g", cfg.d)
                zeros(f"{p}lnf_b", cfg.d)
                ffn_block(p)

        w("pool.w_t", cfg.d_a, cfg.d)
        w("pool.q_t", cfg.d_a)
        w("pool.w_p", cfg.d_a, cfg.d)
        w("pool.q_p", cfg.d_a)

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def param(self, name: str) -> Parameter:
        return self._params[name]

    def randomize_params(self, seed: int) -> None:
        """Overwrite every parameter with generic nonzero draws.

        Gradient checking needs a point in parameter space with no dead
        directions; the training initialization deliberately zeroes the
        residual output projections, which would make many finite
        differences vanish identically. Norm gains are kept near 1.
        """
        rng = np.random.default_rng([seed, 2])
        bound = 1.0 / math.sqrt(self.config.d)
        for p in self._params.values():
            p.data[...] = rng.uniform(-bound, bound, size=p.data.shape)
            if p.name.endswith("_g"):
                p.data += 1.0

    # ------------------------------------------------------------------
    # Building blocks

    def _linear(self, x: Tensor, w: Parameter, b: Parameter | None) -> Tensor:
        lead = x.shape[:-1]
        flat = ad.reshape(x, (-1, x.shape[-1]))
        out = ad.matmul(flat, w)
        if b is not None:
            out = out + b
        return ad.reshape(out, lead + (w.shape[1],))

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.config.heads
        return ad.transpose(ad.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, h, n, dh = x.shape
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))

    def _mha(self, prefix: str, q_src: Tensor, kv_src: Tensor, kv_mask: np.ndarray) -> Tensor:
        P = self._params
        q = self._split_heads(self._linear(q_src, P[prefix + "wq"], P[prefix + "bq"]))
        k = self._split_heads(self._linear(kv_src, P[prefix + "wk"], None))
        v = self._split_heads(self._linear(kv_src, P[prefix + "wv"], P[prefix + "bv"]))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(q.shape[-1]))
        attn = ad.softmax_masked(scores, kv_mask[:, None, None, :])
        ctx = self._merge_heads(ad.matmul(attn, v))
        return self._linear(ctx, P[prefix + "wo"], P[prefix + "bo"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        P = self._params
        hidden = ad.gelu(self._linear(x, P[prefix + "w1"], P[prefix + "b1"]))
        return self._linear(hidden, P[prefix + "w2"], P[prefix + "b2"])

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self._params[prefix + "_g"], self._params[prefix + "_b"])

    # ------------------------------------------------------------------
    # Encoder stages

    def embed_title(self, title_ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Word + position embeddings with PAD rows forced to zero. (B, M, d)."""
        title_ids = np.atleast_2d(np.asarray(title_ids, dtype=np.int64))
        mask = np.atleast_2d(np.asarray(mask, dtype=np.float64))
        m = title_ids.shape[1]
        if m > self.config.m_max:
            raise ShapeError(f"title length {m} exceeds the configured maximum {self.config.m_max}")
        words = ad.embedding_lookup(self._params["embed.word"], title_ids)
        pos = ad.slice_rows(self._params["embed.pos"], 0, m)
        return ad.mul(words + pos, mask[:, :, None])

    def project_rois(
        self,
        roi_features: np.ndarray,
        roi_boxvec: np.ndarray,
        mask: np.ndarray,
        placeholder_mask: np.ndarray,
    ) -> Tensor:
        """Map region features + box geometry into the hidden space. (B, K, d).

        Slots flagged in ``placeholder_mask`` (the single active slot of an
        imageless item) are replaced by a learned placeholder vector so every
        item exposes at least one valid image-stream row.
        """
        feats = np.asarray(roi_features, dtype=np.float64)
        boxes = np.asarray(roi_boxvec, dtype=np.float64)
        if feats.ndim == 2:
            feats = feats[None]
        if boxes.ndim == 2:
            boxes = boxes[None]
        ph = np.atleast_2d(np.asarray(placeholder_mask, dtype=np.float64))[:, :, None]
        if boxes.shape[-1] != BOX_VECTOR_DIM:
            raise ShapeError(f"box vectors must have {BOX_VECTOR_DIM} entries, got {boxes.shape[-1]}")
        P = self._params
        proj = self._linear(Tensor(feats), P["embed.roi_w"], P["embed.roi_b"]) + self._linear(
            Tensor(boxes), P["embed.box_w"], P["embed.box_b"]
        )
        return ad.mul(proj, 1.0 - ph) + ad.mul(P["embed.placeholder"], ph)

    def text_trm_layer(self, index: int, h: Tensor, mask: np.ndarray) -> Tensor:
        """Pre-norm self-attention + feed-forward block over title positions."""
        p = f"text_{index}."
        mask = np.atleast_2d(np.asarray(mask, dtype=np.float64))
        hn = self._norm(p + "ln1", h)
        a = h + self._mha(p, hn, hn, mask)
        return a + self._ffn(p, self._norm(p + "ln2", a))

    def co_trm_layer(
        self,
        index: int,
        h_text: Tensor,
        v_image: Tensor,
        text_mask: np.ndarray,
        image_mask: np.ndarray,
    ) -> tuple[Tensor, Tensor]:
        """One co-attention layer: each stream queries the other.

        Both directions read the layer's *inputs*, so the update is symmetric
        and carries no ordering artifact.
        """
        text_mask = np.atleast_2d(np.asarray(text_mask, dtype=np.float64))
        image_mask = np.atleast_2d(np.asarray(image_mask, dtype=np.float64))
        new_text = self._co_direction(f"co_{index}.txt.", h_text, v_image, image_mask)
        new_image = self._co_direction(f"co_{index}.img.", v_image, h_text, text_mask)
        return new_text, new_image

    def _co_direction(self, p: str, q_stream: Tensor, kv_stream: Tensor, kv_mask: np.ndarray) -> Tensor:
        qn = self._norm(p + "lnq", q_stream)
        kvn = self._norm(p + "lnkv", kv_stream)
        a = q_stream + self._mha(p, qn, kvn, kv_mask)
        return a + self._ffn(p, self._norm(p + "lnf", a))

    def attention_pool(
        self, h: Tensor | np.ndarray, mask: np.ndarray, w: Parameter, q: Parameter
    ) -> tuple[Tensor, Tensor]:
        """Additive attention pool: a = softmax(H wᵀ q) over valid rows, r = Σ aᵢhᵢ.

        Accepts ``(n, d)`` or batched ``(B, n, d)`` hidden states; returns
        ``(r, a)`` with the batch axis mirrored from the input.
        """
        if not isinstance(h, Tensor):
            h = Tensor(np.asarray(h, dtype=np.float64))
        squeeze = h.ndim == 2
        if squeeze:
            h = ad.reshape(h, (1,) + h.shape)
        mask = np.atleast_2d(np.asarray(mask, dtype=np.float64))
        b, n, d = h.shape
        flat = ad.reshape(h, (b * n, d))
        scores = ad.matmul(ad.matmul(flat, ad.transpose(w)), ad.reshape(q, (q.shape[0], 1)))
        a = ad.softmax_masked(ad.reshape(scores, (b, n)), mask)
        r = ad.reduce_sum(ad.mul(ad.reshape(a, (b, n, 1)), h), axis=1)
        if squeeze:
            r = ad.reshape(r, (d,))
            a = ad.reshape(a, (n,))
        return r, a

    # ------------------------------------------------------------------
    # Whole-pipeline entry points

    def encode_batch(self, batch: NewsBatch) -> tuple[Tensor, Tensor]:
        """Encode a padded batch into pooled vectors ``(r_t, r_p)``, each (B, d)."""
        cfg = self.config
        h = self.embed_title(batch.title_ids, batch.title_mask)
        v = self.project_rois(batch.roi_features, batch.roi_boxvec, batch.roi_mask, batch.roi_placeholder)
        for i in range(cfg.n_text_layers):
            h = self.text_trm_layer(i, h, batch.title_mask)
        for j in range(cfg.n_co_layers):
            h, v = self.co_trm_layer(j, h, v, batch.title_mask, batch.roi_mask)
        P = self._params
        r_t, _ = self.attention_pool(h, batch.title_mask, P["pool.w_t"], P["pool.q_t"])
        r_p, _ = self.attention_pool(v, batch.roi_mask, P["pool.w_p"], P["pool.q_p"])
        return r_t, r_p

    def encode_news(self, record: NewsRecord) -> NewsEncoding:
        """Encode one news record (inference convenience; no gradients)."""
        cfg = self.config
        batch = NewsBatch.from_records([record], m_max=cfg.m_max, k_max=cfg.k_max, d_img=cfg.d_img)
        with ad.no_grad():
            r_t, r_p = self.encode_batch(batch)
        return NewsEncoding(r_t=r_t.data[0].copy(), r_p=r_p.data[0].copy())
