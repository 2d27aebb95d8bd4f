"""Training objectives: attention transfer, sequence rewards, policy gradients.

Two supervision routes sharpen the decoder's region attention at noun tokens:
distilling a frozen matcher's word-over-region attention through a KL term, or
ground-truth region indicators built from IoU overlap. Self-critical training
uses a sampled-minus-greedy advantage on a reward combining a consensus-based
caption score with the matcher's global match score.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .captioner import UpDownCaptioner
from .data import CaptionRecord, SceneRecord
from .evaluation import iou, strip_wrap
from .matcher import Matcher

__all__ = [
    "Stage1Config",
    "RewardConfig",
    "RewardFn",
    "kl_attention_term",
    "kl_rows",
    "stage1_loss",
    "stage1_loss_batch",
    "build_gamma",
    "build_cider_context",
    "cider_score",
    "CiderContext",
    "scst_gradient",
]

LOG_FLOOR = 1e-12
IOU_THRESHOLD = 0.5

# One indicator row per annotated noun token index.
PositiveRegionIndicators = dict[int, np.ndarray]


def kl_rows(student: Tensor, teacher: Tensor, eps: float = LOG_FLOOR) -> Tensor:
    """KL(student || teacher) over the last axis, batched.

    Zero student entries contribute exactly zero; logs are floored at eps so
    vanishing teacher mass yields a large, finite penalty.
    """
    log_s = student.clamp_min(eps).log()
    log_t = teacher.clamp_min(eps).log()
    return (student * (log_s - log_t)).sum(dim=-1)


def kl_attention_term(
    student_row: Sequence[float] | np.ndarray,
    teacher_row: Sequence[float] | np.ndarray,
    eps: float = LOG_FLOOR,
) -> float:
    """Scalar KL between two attention rows (plain-python surface)."""
    s = np.asarray(student_row, dtype=np.float64)
    t = np.asarray(teacher_row, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 1:
        raise ValueError(f"rows must be 1-D and equal length, got {s.shape} vs {t.shape}")
    return float(kl_rows(torch.from_numpy(s), torch.from_numpy(t), eps=eps))


@dataclass
class Stage1Config:
    """Cross-entropy stage with an optional noun-gated attention term."""

    lambda1: float = 0.1
    supervision: str = "none"  # none | distill | ground-truth
    teacher: str = "pos-scan"  # matcher flavor used for distillation
    gt_form: str = "nll"  # ground-truth term form: nll | kl
    teacher_ckpt: str | None = None  # resolved by the trainer/CLI

    def validate(self) -> None:
        if self.supervision not in ("none", "distill", "ground-truth"):
            raise ValueError(f"unknown supervision {self.supervision!r}")
        if self.teacher not in ("scan", "pos-scan"):
            raise ValueError(f"unknown teacher flavor {self.teacher!r}")
        if self.gt_form not in ("nll", "kl"):
            raise ValueError(f"unknown ground-truth form {self.gt_form!r}")
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be >= 0")


def build_gamma(
    scene: SceneRecord, caption: CaptionRecord, threshold: float = IOU_THRESHOLD
) -> dict[int, np.ndarray]:
    """Positive-region indicators per annotated noun token.

    gamma[i][r] is 1 when region r's box overlaps one of token i's annotated
    boxes with IoU above the threshold; rows can be all-zero when no region
    clears it.
    """
    out: dict[int, np.ndarray] = {}
    for idx, gt_boxes in caption.grounding.items():
        vec = np.zeros(scene.num_regions, dtype=np.float64)
        for r, box in enumerate(scene.boxes):
            if any(iou(box, gt) > threshold for gt in gt_boxes):
                vec[r] = 1.0
        out[idx] = vec
    return out


def _supervised_indices(caption: CaptionRecord) -> list[int]:
    # Noun token positions; BOS/EOS never carry supervision.
    return [i for i, m in enumerate(caption.noun_mask) if m]


def stage1_loss(
    model: UpDownCaptioner,
    features: np.ndarray | Tensor,
    caption: CaptionRecord,
    cfg: Stage1Config,
    teacher_alpha: np.ndarray | None = None,
    gamma: dict[int, np.ndarray] | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Per-caption stage-1 loss: token NLL plus the configured attention term.

    teacher_alpha must hold one matcher attention row per token of the wrapped
    sequence. With lambda1 == 0 or supervision "none" the attention machinery
    is skipped entirely, so the loss is bit-identical to plain cross-entropy.
    """
    cfg.validate()
    logprobs, betas = model.teacher_forced(features, caption.tokens)
    xe = -logprobs.sum()
    if cfg.supervision == "none" or cfg.lambda1 == 0.0:
        return xe, {"xe": float(xe.detach()), "transfer": 0.0}

    terms = []
    if cfg.supervision == "distill":
        if teacher_alpha is None:
            raise ValueError("distillation needs teacher attention rows")
        if teacher_alpha.shape[0] != len(caption.tokens):
            raise ValueError("teacher attention must cover every token")
        alpha = torch.from_numpy(np.asarray(teacher_alpha, dtype=np.float64))
        for i in _supervised_indices(caption):
            terms.append(kl_rows(betas[i - 1], alpha[i]))
    else:  # ground-truth
        if gamma is None:
            raise ValueError("ground-truth supervision needs gamma indicators")
        for i in _supervised_indices(caption):
            vec = gamma.get(i)
            if vec is None:
                continue
            total = float(vec.sum())
            if total == 0.0:
                continue  # no region clears the overlap threshold
            g = torch.from_numpy(np.asarray(vec, dtype=np.float64))
            if cfg.gt_form == "nll":
                terms.append(-(g * betas[i - 1].clamp_min(LOG_FLOOR).log()).sum())
            else:
                terms.append(kl_rows(betas[i - 1], g / total))

    transfer = torch.stack(terms).sum() if terms else xe.new_zeros(())
    loss = xe + cfg.lambda1 * transfer
    return loss, {"xe": float(xe.detach()), "transfer": float(transfer.detach())}


def stage1_loss_batch(
    model: UpDownCaptioner,
    features: Tensor,
    tokens: Tensor,
    lengths: Tensor,
    cfg: Stage1Config,
    supervision_rows: Tensor | None = None,
    supervision_valid: Tensor | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Mean per-caption stage-1 loss over a padded batch.

    supervision_rows is [B, L, k], aligned by token index: teacher attention
    for distillation, raw indicator rows for "nll", normalized ones for "kl".
    supervision_valid marks the noun positions that actually carry a term.
    """
    cfg.validate()
    logprobs, betas, mask = model.teacher_forced_batch(features, tokens, lengths)
    xe_per = -(logprobs * mask).sum(dim=1)
    supervised = cfg.supervision != "none" and cfg.lambda1 != 0.0
    if not supervised:
        loss = xe_per.mean()
        return loss, {"xe": float(xe_per.detach().sum()), "transfer": 0.0, "captions": tokens.shape[0]}

    if supervision_rows is None or supervision_valid is None:
        raise ValueError("supervised batches need rows plus a validity mask")
    B, L, k = supervision_rows.shape
    # Student row for token index i is the decoder's step i-1.
    student = torch.cat([betas.new_zeros(B, 1, k), betas], dim=1)  # [B, L, k]
    valid = supervision_valid.to(torch.float64)
    if cfg.supervision == "distill" or cfg.gt_form == "kl":
        per_token = kl_rows(student, supervision_rows)
    else:
        per_token = -(supervision_rows * student.clamp_min(LOG_FLOOR).log()).sum(dim=-1)
    transfer_per = (per_token * valid).sum(dim=1)
    loss = (xe_per + cfg.lambda1 * transfer_per).mean()
    return loss, {
        "xe": float(xe_per.detach().sum()),
        "transfer": float(transfer_per.detach().sum()),
        "captions": tokens.shape[0],
    }


# -- consensus caption score (tf-idf n-gram similarity) ----------------------


def _ngrams(tokens: Sequence[int], max_n: int) -> Counter:
    counts: Counter = Counter()
    for n in range(1, max_n + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i : i + n])] += 1
    return counts


@dataclass
class CiderContext:
    """Frozen document frequencies plus per-scene references."""

    doc_freq: dict[tuple, int]
    num_docs: int
    refs_by_scene: dict[str, list[tuple[int, ...]]]
    n: int = 4
    sigma: float = 6.0

    def score(self, scene_id: str, candidate: Sequence[int]) -> float:
        refs = self.refs_by_scene[scene_id]
        return cider_score(candidate, refs, self.doc_freq, self.num_docs, self.n, self.sigma)

    def score_with_refs(
        self, candidate: Sequence[int], references: list[Sequence[int]]
    ) -> float:
        return cider_score(
            candidate, references, self.doc_freq, self.num_docs, self.n, self.sigma
        )


def build_cider_context(
    refs_by_scene: dict[str, list[Sequence[int]]], n: int = 4, sigma: float = 6.0
) -> CiderContext:
    """Document frequencies over a reference corpus, one document per scene.

    An n-gram's frequency counts the scenes in which any reference contains
    it, so the table is invariant to scene ordering and per-scene reference
    ordering.
    """
    if not refs_by_scene:
        raise ValueError("empty reference corpus")
    doc_freq: Counter = Counter()
    frozen: dict[str, list[tuple[int, ...]]] = {}
    for scene_id, refs in refs_by_scene.items():
        if not refs:
            raise ValueError(f"scene {scene_id} has no references")
        seen: set = set()
        for ref in refs:
            seen.update(_ngrams(ref, n))
        for g in seen:
            doc_freq[g] += 1
        frozen[scene_id] = [tuple(r) for r in refs]
    return CiderContext(
        doc_freq=dict(doc_freq),
        num_docs=len(refs_by_scene),
        refs_by_scene=frozen,
        n=n,
        sigma=sigma,
    )


def _tfidf_vectors(
    tokens: Sequence[int], doc_freq: dict, num_docs: int, max_n: int
) -> tuple[list[dict], list[float]]:
    log_docs = math.log(float(num_docs))
    vecs: list[dict] = [{} for _ in range(max_n)]
    norms = [0.0] * max_n
    for g, count in _ngrams(tokens, max_n).items():
        idf = log_docs - math.log(max(1.0, float(doc_freq.get(g, 0))))
        val = float(count) * idf
        vecs[len(g) - 1][g] = val
        norms[len(g) - 1] += val * val
    return vecs, [math.sqrt(x) for x in norms]


def cider_score(
    candidate: Sequence[int],
    references: list[Sequence[int]],
    doc_freq: dict,
    num_docs: int,
    n: int = 4,
    sigma: float = 6.0,
) -> float:
    """Consensus score: clipped tf-idf n-gram cosine with a length penalty.

    Mean over n-gram orders of the clipped similarity, averaged over the
    references and scaled by 10. The Gaussian length penalty compares word
    counts. An empty candidate scores 0.
    """
    if not references:
        raise ValueError("need at least one reference")
    if num_docs < 1:
        raise ValueError("document count must be positive")
    cand_vecs, cand_norms = _tfidf_vectors(candidate, doc_freq, num_docs, n)
    total = 0.0
    for ref in references:
        ref_vecs, ref_norms = _tfidf_vectors(ref, doc_freq, num_docs, n)
        delta = float(len(candidate) - len(ref))
        penalty = math.exp(-(delta**2) / (2.0 * sigma**2))
        sim_sum = 0.0
        for order in range(n):
            val = 0.0
            for g, cv in cand_vecs[order].items():
                rv = ref_vecs[order].get(g, 0.0)
                val += min(cv, rv) * rv
            if cand_norms[order] > 0 and ref_norms[order] > 0:
                val /= cand_norms[order] * ref_norms[order]
            else:
                val = 0.0
            sim_sum += val * penalty
        total += sim_sum / n
    return 10.0 * total / len(references)


# -- reward and its policy gradient ------------------------------------------


@dataclass
class RewardConfig:
    """Sequence-level reward: consensus caption score plus matcher score."""

    use_cider: bool = True
    lambda2: float = 1.0
    matcher: str = "none"  # none | scan | pos-scan
    matcher_ckpt: str | None = None  # resolved by the trainer/CLI

    def validate(self) -> None:
        if self.matcher not in ("none", "scan", "pos-scan"):
            raise ValueError(f"unknown matcher flavor {self.matcher!r}")
        if not self.use_cider and self.matcher == "none":
            raise ValueError("reward needs at least one active term")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be >= 0")


class RewardFn:
    """Scores wrapped token sequences for one dataset.

    POS-restricted matchers cannot score noun-free captions; those captions
    get a zero match term and are counted in no_noun_count.
    """

    def __init__(
        self,
        cfg: RewardConfig,
        cider_ctx: CiderContext | None = None,
        matcher: Matcher | None = None,
        noun_ids: frozenset[int] = frozenset(),
    ):
        cfg.validate()
        if cfg.use_cider and cider_ctx is None:
            raise ValueError("reward uses the consensus score but got no context")
        if cfg.matcher != "none" and matcher is None:
            raise ValueError("reward uses a matcher score but got no matcher")
        if matcher is not None and cfg.matcher != "none":
            want_pos = cfg.matcher == "pos-scan"
            if matcher.cfg.pos_restricted != want_pos:
                raise ValueError(
                    f"matcher variant mismatch: config wants {cfg.matcher}, model is "
                    f"{'pos-scan' if matcher.cfg.pos_restricted else 'scan'}"
                )
        self.cfg = cfg
        self.cider_ctx = cider_ctx
        self.matcher = matcher
        self.noun_ids = noun_ids
        self.no_noun_count = 0

    def parts(self, scene: SceneRecord, tokens: list[int]) -> tuple[float, float]:
        cider_part = 0.0
        if self.cfg.use_cider:
            cider_part = self.cider_ctx.score(scene.scene_id, strip_wrap(tokens))
        match_part = 0.0
        if self.cfg.matcher != "none":
            mask = [t in self.noun_ids for t in tokens]
            if self.matcher.cfg.pos_restricted and not any(mask):
                self.no_noun_count += 1
            else:
                with torch.no_grad():
                    match_part = float(
                        self.matcher.pair_score(scene.features, tokens, noun_mask=mask)
                    )
        return cider_part, match_part

    def __call__(self, scene: SceneRecord, tokens: list[int]) -> float:
        cider_part, match_part = self.parts(scene, tokens)
        return cider_part + self.cfg.lambda2 * match_part


def scst_gradient(
    model: UpDownCaptioner,
    features: np.ndarray | Tensor,
    reward_fn: Callable[[list[int]], float],
    generator: torch.Generator,
    max_len: int | None = None,
) -> tuple[dict[str, Tensor], dict]:
    """Single-sample self-critical gradient estimate for one scene.

    Samples one caption, scores it against the greedy baseline, and returns
    the gradient of -(r_sample - r_greedy) * log p(sample) for every named
    parameter (zeros where the sample path does not touch a parameter).
    """
    sample_tokens, logprobs, _ = model.sample_decode(features, generator, max_len)
    greedy_tokens, _ = model.greedy_decode(features, max_len)
    r_sample = float(reward_fn(sample_tokens))
    r_greedy = float(reward_fn(greedy_tokens))
    advantage = r_sample - r_greedy
    loss = -advantage * logprobs.sum()
    named = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(named.values()), allow_unused=True)
    out = {
        name: (torch.zeros_like(p) if g is None else g)
        for (name, p), g in zip(named.items(), grads)
    }
    info = {
        "sample_tokens": sample_tokens,
        "greedy_tokens": greedy_tokens,
        "sample_reward": r_sample,
        "baseline_reward": r_greedy,
        "advantage": advantage,
    }
    return out, info
