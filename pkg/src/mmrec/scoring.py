"""Candidate-aware user scoring.

Given the encoded vectors of a user's clicked news (text vectors stacked as
``R_t``, image vectors as ``R_p``) and one candidate's encoding
``(r_t_c, r_p_c)``, four attention distributions over the clicked news are
formed from raw inner products (no scaling by default):

    a_tt = softmax(R_t · r_t_c)    a_tp = softmax(R_p · r_t_c)
    a_pt = softmax(R_t · r_p_c)    a_pp = softmax(R_p · r_p_c)

The unified user embedding mixes both modalities of the history,

    u = R_pᵀ (a_tp + a_pp) + R_tᵀ (a_tt + a_pt)

and the click score is ŷ = (r_t_c + r_p_c) · u. Because the attention is
conditioned on the candidate, ``u`` must be recomputed per candidate; news
encodings themselves are reusable and should be cached by callers.

Three equivalent implementations are provided: a per-user reference path
(:func:`crossmodal_weights` / :func:`user_embedding` / :func:`click_score`),
a vectorized numpy path over one impression (:func:`score_impression`), and
a differentiable batched path (:func:`score_candidates_batch`) used in
training. Tests pin them to a scalar-loop oracle.

An empty click history is a cold start: the user embedding is the zero
vector and every candidate scores exactly 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .encoder import NewsEncoding

__all__ = [
    "UserState",
    "CrossmodalWeights",
    "crossmodal_weights",
    "user_embedding",
    "click_score",
    "rank_candidates",
    "score_impression",
    "score_candidates_batch",
]


@dataclass
class UserState:
    """Stacked encodings of a user's clicked news plus a validity mask."""

    r_text: np.ndarray   # P × d
    r_image: np.ndarray  # P × d
    mask: np.ndarray     # P (1 = real history row, 0 = padding)

    def __post_init__(self):
        self.r_text = np.asarray(self.r_text, dtype=np.float64)
        self.r_image = np.asarray(self.r_image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.r_text.shape != self.r_image.shape or self.r_text.ndim != 2:
            raise ShapeError(
                f"history stacks must both be P×d, got {self.r_text.shape} and {self.r_image.shape}"
            )
        if self.mask.shape != (self.r_text.shape[0],):
            raise ShapeError(f"mask must have shape ({self.r_text.shape[0]},), got {self.mask.shape}")

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def from_encodings(cls, encodings: list[NewsEncoding], d: int) -> "UserState":
        if not encodings:
            return cls(np.zeros((0, d)), np.zeros((0, d)), np.zeros(0))
        return cls(
            np.stack([e.r_t for e in encodings]),
            np.stack([e.r_p for e in encodings]),
            np.ones(len(encodings)),
        )


@dataclass
class CrossmodalWeights:
    """The four candidate-conditioned attention distributions over history."""

    a_tt: np.ndarray
    a_tp: np.ndarray
    a_pt: np.ndarray
    a_pp: np.ndarray


def _masked_softmax_rows(scores: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis restricted to valid slots (exact 0 elsewhere)."""
    neg = np.where(valid, scores, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    e = np.exp(neg - m)
    return e / e.sum(axis=-1, keepdims=True)


def crossmodal_weights(state: UserState, cand: NewsEncoding, scaled: bool = False) -> CrossmodalWeights:
    """Four masked softmaxes of raw history·candidate inner products.

    ``scaled=True`` divides the products by √d before the softmax; it is off
    by default and exists only as an explicitly documented knob.

    An empty history returns four all-zero vectors (the cold-start signal
    that makes :func:`user_embedding` produce the zero vector).
    """
    p = state.r_text.shape[0]
    valid = state.mask > 0
    if not valid.any():
        zero = np.zeros(p)
        return CrossmodalWeights(zero, zero.copy(), zero.copy(), zero.copy())
    denom = math.sqrt(state.r_text.shape[1]) if scaled else 1.0
    scores = {
        "a_tt": state.r_text @ cand.r_t,
        "a_tp": state.r_image @ cand.r_t,
        "a_pt": state.r_text @ cand.r_p,
        "a_pp": state.r_image @ cand.r_p,
    }
    return CrossmodalWeights(**{k: _masked_softmax_rows(v / denom, valid) for k, v in scores.items()})


def user_embedding(state: UserState, weights: CrossmodalWeights) -> np.ndarray:
    """Mix history rows by the four weight vectors into one user vector."""
    image_side = weights.a_tp + weights.a_pp
    text_side = weights.a_tt + weights.a_pt
    return state.r_image.T @ image_side + state.r_text.T @ text_side


def click_score(cand: NewsEncoding, u: np.ndarray) -> float:
    """ŷ = (r_t_c + r_p_c) · u."""
    return float((cand.r_t + cand.r_p) @ u)


def rank_candidates(
    state: UserState, candidates: list[NewsEncoding], scaled: bool = False
) -> list[tuple[int, float]]:
    """Score every candidate (recomputing u per candidate) and sort.

    Returns ``(input_index, score)`` pairs, highest score first; ties keep
    input order so ranking is deterministic.
    """
    scored = []
    for i, cand in enumerate(candidates):
        u = user_embedding(state, crossmodal_weights(state, cand, scaled=scaled))
        scored.append((i, click_score(cand, u)))
    return sorted(scored, key=lambda pair: (-pair[1], pair[0]))


def score_impression(
    hist_t: np.ndarray,
    hist_p: np.ndarray,
    cand_t: np.ndarray,
    cand_p: np.ndarray,
    scaled: bool = False,
) -> np.ndarray:
    """Vectorized scores for one impression: (P,d)+(P,d) history, (C,d)+(C,d) candidates → (C,).

    History rows are all treated as valid; pass only real rows. An empty
    history returns all-zero scores (cold start).
    """
    hist_t = np.asarray(hist_t, dtype=np.float64)
    hist_p = np.asarray(hist_p, dtype=np.float64)
    cand_t = np.asarray(cand_t, dtype=np.float64)
    cand_p = np.asarray(cand_p, dtype=np.float64)
    if hist_t.shape[0] == 0:
        return np.zeros(cand_t.shape[0])
    denom = math.sqrt(hist_t.shape[1]) if scaled else 1.0
    ones = np.ones(hist_t.shape[0], dtype=bool)
    a_tt = _masked_softmax_rows(cand_t @ hist_t.T / denom, ones)  # (C, P)
    a_tp = _masked_softmax_rows(cand_t @ hist_p.T / denom, ones)
    a_pt = _masked_softmax_rows(cand_p @ hist_t.T / denom, ones)
    a_pp = _masked_softmax_rows(cand_p @ hist_p.T / denom, ones)
    u = (a_tp + a_pp) @ hist_p + (a_tt + a_pt) @ hist_t  # (C, d)
    return ((cand_t + cand_p) * u).sum(axis=1)


def score_candidates_batch(
    hist_t: Tensor,
    hist_p: Tensor,
    hist_mask: np.ndarray,
    cand_t: Tensor,
    cand_p: Tensor,
    scaled: bool = False,
) -> Tensor:
    """Differentiable batched scoring: (B,P,d) history and (B,C,d) candidates → (B,C).

    Every batch row must have at least one valid history slot; training code
    filters cold-start samples before calling (their gradient would be zero).
    Padded history rows are masked out of all four softmaxes, so their
    contents cannot influence scores.
    """
    mask = np.asarray(hist_mask, dtype=np.float64)[:, None, :]  # (B,1,P) over candidates
    hist_t_T = ad.transpose(hist_t, (0, 2, 1))
    hist_p_T = ad.transpose(hist_p, (0, 2, 1))
    denom = 1.0 / math.sqrt(hist_t.shape[-1]) if scaled else 1.0

    def attend(c, h_T):
        scores = ad.matmul(c, h_T)
        if scaled:
            scores = ad.scale(scores, denom)
        return ad.softmax_masked(scores, mask)

    a_tt = attend(cand_t, hist_t_T)  # (B,C,P)
    a_tp = attend(cand_t, hist_p_T)
    a_pt = attend(cand_p, hist_t_T)
    a_pp = attend(cand_p, hist_p_T)
    u = ad.matmul(a_tp + a_pp, hist_p) + ad.matmul(a_tt + a_pt, hist_t)  # (B,C,d)
    return ad.reduce_sum(ad.mul(cand_t + cand_p, u), axis=2)
