"""Image-text matching with word-grounded region attention.

Regions are projected into a joint space, words are encoded by a bi-GRU,
and each word attends over regions through a clipped, renormalized cosine
similarity. The global score averages word-level relevance; the POS-restricted
variant averages over noun tokens only. Training uses a max-margin triplet
loss with in-batch hardest negatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .common import EPS, as_double_tensor, uniform_init

__all__ = [
    "MatcherConfig",
    "Matcher",
    "AttentionMatrix",
    "NoNounError",
    "BatchTooSmallError",
    "similarity_matrix",
    "normalize_similarities",
    "attend_regions",
    "global_score",
    "pos_score",
    "triplet_loss_hard",
]


class NoNounError(ValueError):
    """Raised when a POS-restricted score is requested for a caption with no nouns."""


class BatchTooSmallError(ValueError):
    """Raised when a hard-negative loss is requested for a batch without negatives."""


@dataclass
class MatcherConfig:
    joint_dim: int = 1024
    word_embed_dim: int = 300
    temperature: float = 9.0
    margin: float = 0.2
    # Normalize the clipped similarities over words for each region (the adopted
    # form). The toggle switches to normalizing over regions for each word.
    normalize_over_regions: bool = False
    # Restrict the training/matching score to noun tokens.
    pos_restricted: bool = False

    def validate(self) -> None:
        if self.joint_dim < 1 or self.word_embed_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")


@dataclass
class AttentionMatrix:
    """Row-stochastic attention weights: one row per token, one column per region."""

    weights: np.ndarray  # float64 [n, k]
    role: str  # "matcher-alpha" or "captioner-beta"
    noun_mask: list[bool] | None = None

    def __post_init__(self) -> None:
        if self.weights.ndim != 2:
            raise ValueError("attention weights must be a 2-D matrix")
        if np.any(self.weights < 0):
            raise ValueError("attention weights must be nonnegative")
        sums = self.weights.sum(axis=1)
        if self.weights.shape[0] and not np.allclose(sums, 1.0, atol=1e-6):
            raise ValueError(f"attention rows must sum to 1, got {sums}")
        if self.role not in ("matcher-alpha", "captioner-beta"):
            raise ValueError(f"unknown attention role {self.role!r}")
        if self.noun_mask is not None and len(self.noun_mask) != self.weights.shape[0]:
            raise ValueError("noun_mask length must match the number of rows")


def _cosine(a: Tensor, b: Tensor, dim: int = -1) -> Tensor:
    na = a.norm(dim=dim, keepdim=True).clamp_min(EPS)
    nb = b.norm(dim=dim, keepdim=True).clamp_min(EPS)
    return ((a / na) * (b / nb)).sum(dim=dim).clamp(-1.0, 1.0)


def similarity_matrix(region_codes: Tensor, word_codes: Tensor) -> Tensor:
    """Cosine similarity s[i, t] between region code i and word code t."""
    v = region_codes / region_codes.norm(dim=1, keepdim=True).clamp_min(EPS)
    e = word_codes / word_codes.norm(dim=1, keepdim=True).clamp_min(EPS)
    return (v @ e.T).clamp(-1.0, 1.0)


def normalize_similarities(sim: Tensor, over_regions: bool = False) -> Tensor:
    """Clip similarities at zero and L2-normalize the surviving mass.

    The default normalizes each region's row across words; rows whose entries
    were all clipped stay exactly zero. With over_regions=True the columns
    (per word, across regions) are normalized instead.
    """
    clipped = sim.clamp_min(0.0)
    dim = 0 if over_regions else 1
    norm = clipped.norm(dim=dim, keepdim=True).clamp_min(EPS)
    return clipped / norm


def attend_regions(
    sim_norm: Tensor, region_codes: Tensor, temperature: float
) -> tuple[Tensor, Tensor]:
    """Word-over-region attention from normalized similarities.

    Returns (alpha, attended): alpha[t] is a distribution over the k regions
    for word t, and attended[t] is the alpha-weighted sum of region codes.
    """
    alpha = torch.softmax(temperature * sim_norm.T, dim=1)  # [n, k]
    return alpha, alpha @ region_codes


def _local_scores(word_codes: Tensor, attended: Tensor) -> Tensor:
    return _cosine(word_codes, attended)


def global_score(word_codes: Tensor, attended: Tensor) -> Tensor:
    """Mean word-level relevance over all tokens."""
    return _local_scores(word_codes, attended).mean()


def pos_score(word_codes: Tensor, attended: Tensor, noun_mask: Sequence[bool]) -> Tensor:
    """Mean word-level relevance restricted to noun tokens."""
    if len(noun_mask) != word_codes.shape[0]:
        raise ValueError("noun_mask length must match the number of words")
    idx = [i for i, m in enumerate(noun_mask) if m]
    if not idx:
        raise NoNounError("caption has no noun tokens to score")
    local = _local_scores(word_codes, attended)
    return local[idx].mean()


def triplet_loss_hard(
    scores: Tensor, margin: float, matching: Tensor | None = None
) -> Tensor:
    """Max-margin triplet loss with in-batch hardest negatives.

    scores is a [B, B] matrix with matched pairs on the diagonal. For each
    pair the hardest non-matching caption (row-wise) and image (column-wise)
    are selected; ties resolve to the lowest index. Returns the mean per-pair
    hinge loss.

    matching optionally marks additional matched entries ([B, B] bool). When
    a batch carries several captions of one image, those pairs score exactly
    like the positive and must not be mined as negatives, or every hinge is
    pinned at the margin. Pairs whose row has no eligible negative are
    skipped; BatchTooSmallError if no pair has one.
    """
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError("scores must be a square matrix")
    B = scores.shape[0]
    if B < 2:
        raise BatchTooSmallError("hard negatives need a batch of at least 2")
    detached = scores.detach().cpu().numpy().copy()
    np.fill_diagonal(detached, -np.inf)
    if matching is not None:
        if tuple(matching.shape) != tuple(scores.shape):
            raise ValueError("matching mask must have the same shape as scores")
        detached[matching.cpu().numpy()] = -np.inf
    ok = np.isfinite(detached).any(axis=1) & np.isfinite(detached).any(axis=0)
    if not ok.any():
        raise BatchTooSmallError("no pair has an eligible negative")
    hard_caption = detached.argmax(axis=1)  # per image row
    hard_image = detached.argmax(axis=0)  # per caption column
    idx_np = ok.nonzero()[0]
    idx = torch.from_numpy(idx_np)
    pos = scores[idx, idx]
    neg_c = scores[idx, torch.from_numpy(hard_caption[idx_np])]
    neg_i = scores[torch.from_numpy(hard_image[idx_np]), idx]
    loss = torch.relu(margin - pos + neg_c) + torch.relu(margin - pos + neg_i)
    return loss.mean()


class Matcher(nn.Module):
    """SCAN-style matcher; all math in float64 for oracle-grade gradients."""

    def __init__(self, vocab_size: int, feature_dim: int, cfg: MatcherConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        self.region_proj = nn.Linear(feature_dim, cfg.joint_dim)
        self.embed = nn.Embedding(vocab_size, cfg.word_embed_dim)
        self.gru_fwd = nn.GRUCell(cfg.word_embed_dim, cfg.joint_dim)
        self.gru_bwd = nn.GRUCell(cfg.word_embed_dim, cfg.joint_dim)
        g = torch.Generator().manual_seed(seed)
        uniform_init(self, g)
        self.double()

    def encode_regions(self, features: Tensor) -> Tensor:
        """Project region features [k, d] into the joint space [k, joint_dim]."""
        return self.region_proj(features)

    def encode_words(self, token_ids: Sequence[int]) -> Tensor:
        """Bi-GRU word codes [n, joint_dim]: mean of forward and backward states."""
        return self.encode_words_batch([list(token_ids)])[0]

    def encode_words_batch(self, id_lists: list[list[int]]) -> list[Tensor]:
        """Encode several captions, batching the recurrences by length."""
        if any(len(ids) == 0 for ids in id_lists):
            raise ValueError("cannot encode an empty token sequence")
        by_len: dict[int, list[int]] = {}
        for j, ids in enumerate(id_lists):
            by_len.setdefault(len(ids), []).append(j)
        out: list[Tensor | None] = [None] * len(id_lists)
        for n, group in by_len.items():
            tokens = torch.tensor([id_lists[j] for j in group], dtype=torch.long)
            emb = self.embed(tokens)  # [g, n, we]
            g = emb.shape[0]
            H = self.cfg.joint_dim
            h_f = emb.new_zeros(g, H)
            h_b = emb.new_zeros(g, H)
            fwd, bwd = [], []
            for t in range(n):
                h_f = self.gru_fwd(emb[:, t], h_f)
                fwd.append(h_f)
                h_b = self.gru_bwd(emb[:, n - 1 - t], h_b)
                bwd.append(h_b)
            codes = (torch.stack(fwd, dim=1) + torch.stack(bwd[::-1], dim=1)) / 2
            for row, j in enumerate(group):
                out[j] = codes[row]
        return out  # type: ignore[return-value]

    def _as_features(self, features: np.ndarray | Tensor) -> Tensor:
        return as_double_tensor(features)

    def pair_score(
        self,
        features: np.ndarray | Tensor,
        token_ids: Sequence[int],
        noun_mask: Sequence[bool] | None = None,
    ) -> Tensor:
        """Match score for one scene/caption pair (POS-restricted when configured)."""
        v = self.encode_regions(self._as_features(features))
        e = self.encode_words(token_ids)
        sim = similarity_matrix(v, e)
        sim_norm = normalize_similarities(sim, self.cfg.normalize_over_regions)
        _, attended = attend_regions(sim_norm, v, self.cfg.temperature)
        if self.cfg.pos_restricted:
            if noun_mask is None:
                raise ValueError("POS-restricted scoring needs a noun mask")
            return pos_score(e, attended, noun_mask)
        return global_score(e, attended)

    def score_matrix(
        self,
        features_batch: Tensor,
        id_lists: list[list[int]],
        noun_masks: list[list[bool]] | None = None,
    ) -> Tensor:
        """All pairwise scores for a batch: rows are scenes, columns captions.

        features_batch is [B, k, d] (uniform k). The diagonal holds matched pairs.
        """
        B = features_batch.shape[0]
        if len(id_lists) != B:
            raise ValueError("need as many captions as scenes")
        if self.cfg.pos_restricted and noun_masks is None:
            raise ValueError("POS-restricted scoring needs noun masks")
        v = self.encode_regions(features_batch.to(torch.float64))  # [B, k, d1]
        v_hat = v / v.norm(dim=2, keepdim=True).clamp_min(EPS)
        codes = self.encode_words_batch(id_lists)
        cols = []
        for c in range(B):
            e = codes[c]  # [n, d1]
            e_hat = e / e.norm(dim=1, keepdim=True).clamp_min(EPS)
            sim = torch.einsum("bkd,nd->bkn", v_hat, e_hat).clamp(-1.0, 1.0)
            clipped = sim.clamp_min(0.0)
            dim = 1 if self.cfg.normalize_over_regions else 2
            sim_norm = clipped / clipped.norm(dim=dim, keepdim=True).clamp_min(EPS)
            alpha = torch.softmax(self.cfg.temperature * sim_norm, dim=1)  # over k
            attended = torch.einsum("bkn,bkd->bnd", alpha, v)
            local = _cosine(attended, e.unsqueeze(0))  # [B, n]
            if self.cfg.pos_restricted:
                idx = [i for i, m in enumerate(noun_masks[c]) if m]
                if not idx:
                    raise NoNounError(f"caption {c} has no noun tokens")
                cols.append(local[:, idx].mean(dim=1))
            else:
                cols.append(local.mean(dim=1))
        return torch.stack(cols, dim=1)  # [B scenes, B captions]

    def attention(
        self,
        features: np.ndarray | Tensor,
        token_ids: Sequence[int],
        noun_mask: Sequence[bool] | None = None,
        mask_to_nouns: bool = False,
    ) -> AttentionMatrix:
        """Word-over-region attention for one pair, as a checked stochastic matrix."""
        if mask_to_nouns and noun_mask is None:
            raise ValueError("mask_to_nouns needs a noun mask")
        with torch.no_grad():
            v = self.encode_regions(self._as_features(features))
            e = self.encode_words(token_ids)
            sim = similarity_matrix(v, e)
            sim_norm = normalize_similarities(sim, self.cfg.normalize_over_regions)
            alpha, _ = attend_regions(sim_norm, v, self.cfg.temperature)
        return AttentionMatrix(
            weights=alpha.numpy(),
            role="matcher-alpha",
            noun_mask=list(noun_mask) if mask_to_nouns else None,
        )
