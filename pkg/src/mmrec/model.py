"""Full click-prediction model: news encoder + candidate-aware user scoring.

The model owns one :class:`~mmrec.encoder.NewsEncoder` and wires its pooled
news vectors into a scoring head. Five behavioral variants are supported:

- ``full``          — two-stream encoder with co-attention; crossmodal
                      candidate-aware user attention over both modalities.
- ``text-only``     — titles only: co-attention layers removed, the user
                      embedding uses text-text attention (u = R_tᵀ a_tt) and
                      the score is r_t_c · u.
- ``image-only``    — the mirror image of ``text-only`` on the region stream.
- ``no-coattn``     — co-attention layers removed; the scoring head is
                      unchanged (both modalities, candidate-aware).
- ``vanilla-attn``  — encoder unchanged, but the user embedding becomes
                      candidate-independent additive attention per modality:
                      a_m = softmax(q_u · tanh(W_u R_m)), u = R_tᵀa_t + R_pᵀa_p.

Variants are mutually exclusive and differ from ``full`` only in the ways
listed; every other hyperparameter stays identical.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import scoring
from .autodiff import Parameter, Tensor
from .data import NewsBatch, NewsRecord, NewsTable, recent_history
from .encoder import EncoderConfig, NewsEncoder

__all__ = ["VARIANTS", "MMRecModel"]

VARIANTS = ("full", "text-only", "image-only", "no-coattn", "vanilla-attn")

# Variants whose encoder drops the co-attention layers entirely.
_NO_CO_VARIANTS = ("text-only", "image-only", "no-coattn")


class MMRecModel:
    """News click scorer with selectable ablation variant.

    Construction is deterministic given ``seed``. All trainable state lives
    in named :class:`Parameter` objects reachable via :meth:`parameters`.
    """

    def __init__(
        self,
        encoder_config: EncoderConfig,
        vocab_size: int,
        variant: str = "full",
        seed: int = 0,
        scaled_attention: bool = False,
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.scaled_attention = bool(scaled_attention)
        self.seed = seed
        if variant in _NO_CO_VARIANTS and encoder_config.n_co_layers != 0:
            encoder_config = EncoderConfig(**{**encoder_config.to_dict(), "n_co_layers": 0})
        self.encoder = NewsEncoder(encoder_config, vocab_size, seed=seed)
        self._extra: dict[str, Parameter] = {}
        if variant == "vanilla-attn":
            cfg = encoder_config
            rng = np.random.default_rng([seed, 1])
            bound = 1.0 / math.sqrt(cfg.d)
            self._extra["user_pool.w_u"] = Parameter(
                rng.uniform(-bound, bound, size=(cfg.d_a, cfg.d)), name="user_pool.w_u"
            )
            self._extra["user_pool.q_u"] = Parameter(
                rng.uniform(-bound, bound, size=cfg.d_a), name="user_pool.q_u"
            )

    # ------------------------------------------------------------------
    # Parameter plumbing

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + list(self._extra.values())

    def param(self, name: str) -> Parameter:
        if name in self._extra:
            return self._extra[name]
        return self.encoder.param(name)

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def randomize_params(self, seed: int) -> None:
        """Move every parameter to a generic nonzero point (for gradient checks)."""
        self.encoder.randomize_params(seed)
        rng = np.random.default_rng([seed, 3])
        bound = 1.0 / math.sqrt(self.config.d)
        for p in self._extra.values():
            p.data[...] = rng.uniform(-bound, bound, size=p.data.shape)

    def describe(self) -> dict:
        """Construction record sufficient to rebuild the model (checkpoint manifest)."""
        return {
            "encoder": self.config.to_dict(),
            "vocab_size": self.encoder.vocab_size,
            "variant": self.variant,
            "seed": self.seed,
            "scaled_attention": self.scaled_attention,
        }

    # ------------------------------------------------------------------
    # Encoding

    def encode_batch(self, batch: NewsBatch) -> tuple[Tensor | None, Tensor | None]:
        """Variant-aware batch encoding; unused streams are skipped (returned as None).

        Skipping is sound because without co-attention layers the two streams
        are computationally disjoint.
        """
        enc = self.encoder
        cfg = enc.config
        if self.variant == "text-only":
            h = enc.embed_title(batch.title_ids, batch.title_mask)
            for i in range(cfg.n_text_layers):
                h = enc.text_trm_layer(i, h, batch.title_mask)
            r_t, _ = enc.attention_pool(h, batch.title_mask, enc.param("pool.w_t"), enc.param("pool.q_t"))
            return r_t, None
        if self.variant == "image-only":
            v = enc.project_rois(batch.roi_features, batch.roi_boxvec, batch.roi_mask, batch.roi_placeholder)
            r_p, _ = enc.attention_pool(v, batch.roi_mask, enc.param("pool.w_p"), enc.param("pool.q_p"))
            return None, r_p
        return enc.encode_batch(batch)

    def encode_table(self, news: NewsTable, ids: list[str] | None = None, chunk: int = 256) -> dict:
        """Encode news records without gradients; returns id → (r_t, r_p) numpy pairs.

        Skipped streams are filled with zero vectors so downstream stacking
        stays shape-uniform.
        """
        cfg = self.config
        wanted = list(dict.fromkeys(ids)) if ids is not None else news.ids
        out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        with ad.no_grad():
            for start in range(0, len(wanted), chunk):
                group = wanted[start : start + chunk]
                batch = NewsBatch.from_records(
                    [news[i] for i in group], m_max=cfg.m_max, k_max=cfg.k_max, d_img=cfg.d_img, tight=True
                )
                r_t, r_p = self.encode_batch(batch)
                zt = np.zeros((len(group), cfg.d))
                t_data = r_t.data if r_t is not None else zt
                p_data = r_p.data if r_p is not None else zt
                for row, news_id in enumerate(group):
                    out[news_id] = (t_data[row].copy(), p_data[row].copy())
        return out

    # ------------------------------------------------------------------
    # Scoring (differentiable batched path)

    def score_batch(
        self,
        hist_t: Tensor | None,
        hist_p: Tensor | None,
        hist_mask: np.ndarray,
        cand_t: Tensor | None,
        cand_p: Tensor | None,
    ) -> Tensor:
        """Scores (B, C) for per-sample history stacks and candidate stacks."""
        v = self.variant
        if v in ("full", "no-coattn"):
            return scoring.score_candidates_batch(
                hist_t, hist_p, hist_mask, cand_t, cand_p, scaled=self.scaled_attention
            )
        if v == "text-only":
            return self._single_modality_scores(hist_t, hist_mask, cand_t)
        if v == "image-only":
            return self._single_modality_scores(hist_p, hist_mask, cand_p)
        return self._vanilla_scores(hist_t, hist_p, hist_mask, cand_t, cand_p)

    def _single_modality_scores(self, hist: Tensor, hist_mask: np.ndarray, cand: Tensor) -> Tensor:
        mask = np.asarray(hist_mask, dtype=np.float64)[:, None, :]
        scores = ad.matmul(cand, ad.transpose(hist, (0, 2, 1)))  # (B,C,P)
        if self.scaled_attention:
            scores = ad.scale(scores, 1.0 / math.sqrt(hist.shape[-1]))
        a = ad.softmax_masked(scores, mask)
        u = ad.matmul(a, hist)  # (B,C,d)
        return ad.reduce_sum(ad.mul(cand, u), axis=2)

    def _vanilla_scores(
        self, hist_t: Tensor, hist_p: Tensor, hist_mask: np.ndarray, cand_t: Tensor, cand_p: Tensor
    ) -> Tensor:
        mask = np.asarray(hist_mask, dtype=np.float64)
        u = self._vanilla_user(hist_t, mask) + self._vanilla_user(hist_p, mask)  # (B,1,d)
        return ad.reduce_sum(ad.mul(cand_t + cand_p, u), axis=2)

    def _vanilla_user(self, hist: Tensor, mask: np.ndarray) -> Tensor:
        w_u, q_u = self._extra["user_pool.w_u"], self._extra["user_pool.q_u"]
        b, p, d = hist.shape
        flat = ad.reshape(hist, (b * p, d))
        act = ad.tanh(ad.matmul(flat, ad.transpose(w_u)))
        scores = ad.reshape(ad.matmul(act, ad.reshape(q_u, (q_u.shape[0], 1))), (b, p))
        a = ad.softmax_masked(scores, mask)
        return ad.matmul(ad.reshape(a, (b, 1, p)), hist)  # (B,1,d)

    # ------------------------------------------------------------------
    # Scoring (numpy serving path; must agree with the batched path)

    def score_impression_np(
        self, hist_t: np.ndarray, hist_p: np.ndarray, cand_t: np.ndarray, cand_p: np.ndarray
    ) -> np.ndarray:
        """Scores (C,) for one impression from cached encodings; empty history → zeros."""
        v = self.variant
        cand_t = np.asarray(cand_t, dtype=np.float64)
        cand_p = np.asarray(cand_p, dtype=np.float64)
        n_cand = cand_t.shape[0] if v != "image-only" else cand_p.shape[0]
        if np.asarray(hist_t).shape[0] == 0:
            return np.zeros(n_cand)
        if v in ("full", "no-coattn"):
            return scoring.score_impression(hist_t, hist_p, cand_t, cand_p, scaled=self.scaled_attention)
        if v in ("text-only", "image-only"):
            hist = np.asarray(hist_t if v == "text-only" else hist_p, dtype=np.float64)
            cand = cand_t if v == "text-only" else cand_p
            s = cand @ hist.T
            if self.scaled_attention:
                s = s / math.sqrt(hist.shape[1])
            a = scoring._masked_softmax_rows(s, np.ones(hist.shape[0], dtype=bool))
            return ((a @ hist) * cand).sum(axis=1)
        u = self.user_vector_np(hist_t, hist_p)
        return (cand_t + cand_p) @ u

    def user_vector_np(self, hist_t: np.ndarray, hist_p: np.ndarray) -> np.ndarray:
        """Candidate-independent user vector of the vanilla-attn variant."""
        if self.variant != "vanilla-attn":
            raise ValueError("user_vector_np is defined only for the vanilla-attn variant")
        w_u = self._extra["user_pool.w_u"].data
        q_u = self._extra["user_pool.q_u"].data
        u = np.zeros(w_u.shape[1])
        for hist in (np.asarray(hist_t, dtype=np.float64), np.asarray(hist_p, dtype=np.float64)):
            scores = np.tanh(hist @ w_u.T) @ q_u
            a = scoring._masked_softmax_rows(scores, np.ones(hist.shape[0], dtype=bool))
            u = u + hist.T @ a
        return u

    # ------------------------------------------------------------------
    # Convenience serving entry point

    def rank_impression(
        self,
        news: NewsTable,
        history_ids: list[str],
        candidate_ids: list[str],
        history_max: int = 50,
        cache: dict | None = None,
    ) -> list[tuple[int, float]]:
        """Rank candidate ids for one user; returns (input index, score) best-first."""
        history_ids = recent_history(history_ids, history_max)
        needed = list(dict.fromkeys(history_ids + candidate_ids))
        enc = cache if cache is not None else self.encode_table(news, needed)
        d = self.config.d
        hist_t = np.stack([enc[i][0] for i in history_ids]) if history_ids else np.zeros((0, d))
        hist_p = np.stack([enc[i][1] for i in history_ids]) if history_ids else np.zeros((0, d))
        cand_t = np.stack([enc[i][0] for i in candidate_ids])
        cand_p = np.stack([enc[i][1] for i in candidate_ids])
        scores = self.score_impression_np(hist_t, hist_p, cand_t, cand_p)
        order = sorted(range(len(candidate_ids)), key=lambda j: (-scores[j], j))
        return [(j, float(scores[j])) for j in order]
