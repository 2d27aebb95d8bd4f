"""Grounding and caption-quality metrics.

Attention dumps are plain dicts (the JSON rows written by the export command):

    {"caption_id": ..., "scene_id": ..., "tokens": [ids],
     "rows": [{"token_index": i, "weights": [w per region]}, ...]}

The evaluator recomputes each row's argmax region from the weights, so any
transformation that preserves per-row argmax (e.g. squaring and renormalizing)
leaves the metrics unchanged.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, BoundingBox

__all__ = [
    "EvaluationError",
    "AttentionEvalResult",
    "F1Report",
    "iou",
    "attention_accuracy",
    "f1_grounding",
    "bleu",
    "full_report",
]

IOU_THRESHOLD = 0.5


class EvaluationError(Exception):
    """Missing or inconsistent evaluation inputs."""


@dataclass
class AttentionEvalResult:
    accuracy: float
    correct: int
    total: int


@dataclass
class F1Report:
    f1_all: float
    f1_loc: float
    per_class: dict[str, dict[str, float]]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two corner-format boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area() + b.area() - inter)


def _rows_by_index(dump: dict) -> dict[int, list[float]]:
    return {row["token_index"]: row["weights"] for row in dump["rows"]}


def attention_accuracy(dumps: list[dict], dataset: Dataset) -> AttentionEvalResult:
    """Fraction of annotated noun tokens whose argmax region hits a true box.

    A token counts as correct when the IoU between the argmax-weight region's
    box and any of the token's annotated boxes exceeds 0.5. Argmax ties go to
    the lowest region index.
    """
    caption_index = {
        cap.caption_id: cap for caps in dataset.captions.values() for cap in caps
    }
    correct = total = 0
    for dump in dumps:
        cap = caption_index.get(dump["caption_id"])
        if cap is None:
            raise EvaluationError(f"dump references unknown caption {dump['caption_id']}")
        scene = dataset.scene(dump["scene_id"])
        rows = _rows_by_index(dump)
        for idx, gt_boxes in cap.grounding.items():
            if idx not in rows:
                raise EvaluationError(
                    f"caption {cap.caption_id}: annotated token {idx} missing from dump"
                )
            weights = np.asarray(rows[idx], dtype=np.float64)
            if weights.shape[0] != scene.num_regions:
                raise EvaluationError(
                    f"caption {cap.caption_id}: row width {weights.shape[0]} "
                    f"!= {scene.num_regions} regions"
                )
            region = int(np.argmax(weights))
            total += 1
            if any(iou(scene.boxes[region], gt) > IOU_THRESHOLD for gt in gt_boxes):
                correct += 1
    if total == 0:
        raise EvaluationError("no annotated noun tokens in the dumps")
    return AttentionEvalResult(accuracy=correct / total, correct=correct, total=total)


def f1_grounding(dumps: list[dict], dataset: Dataset) -> F1Report:
    """Per-class grounding F1 over decoded captions.

    For each object class, a mention is a decoded token equal to the class
    name; it counts as a hit when its argmax region's box overlaps a true
    instance of that class (IoU > 0.5). f1_all is the macro mean over classes
    present in the ground truth of the harmonic precision/recall mean, with
    per-scene hits capped by the instance count. f1_loc is the macro mean of
    the localization rate among correctly named mentions.
    """
    name_by_class = dict(enumerate(dataset.class_names))
    word_to_class = {name: c for c, name in name_by_class.items()}

    pred: Counter[int] = Counter()  # mentions per class
    tp: Counter[int] = Counter()  # per-scene-capped localized hits
    gt: Counter[int] = Counter()  # ground-truth instances
    attempted: Counter[int] = Counter()  # mentions whose class is in the scene
    localized: Counter[int] = Counter()

    seen_scenes = set()
    for dump in dumps:
        scene = dataset.scene(dump["scene_id"])
        if scene.scene_id in seen_scenes:
            raise EvaluationError(f"duplicate decoded dump for scene {scene.scene_id}")
        seen_scenes.add(scene.scene_id)

        scene_instances: dict[int, list[int]] = {}
        for r, c in enumerate(scene.classes):
            if c >= 0:
                scene_instances.setdefault(c, []).append(r)
        for c, regions in scene_instances.items():
            gt[c] += len(regions)

        rows = _rows_by_index(dump)
        words = dataset.vocab.words(dump["tokens"])
        scene_hits: Counter[int] = Counter()
        for idx, word in enumerate(words):
            c = word_to_class.get(word)
            if c is None:
                continue
            pred[c] += 1
            if idx not in rows:
                raise EvaluationError(
                    f"scene {scene.scene_id}: no attention row for decoded token {idx}"
                )
            if c not in scene_instances:
                continue
            attempted[c] += 1
            weights = np.asarray(rows[idx], dtype=np.float64)
            region = int(np.argmax(weights))
            hit = any(
                iou(scene.boxes[region], scene.boxes[r]) > IOU_THRESHOLD
                for r in scene_instances[c]
            )
            if hit:
                localized[c] += 1
                scene_hits[c] += 1
        for c, hits in scene_hits.items():
            tp[c] += min(hits, len(scene_instances[c]))

    per_class: dict[str, dict[str, float]] = {}
    f1_values, loc_values = [], []
    for c in sorted(gt):
        p = tp[c] / pred[c] if pred[c] else 0.0
        r = tp[c] / gt[c]
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        loc = localized[c] / attempted[c] if attempted[c] else 0.0
        f1_values.append(f1)
        loc_values.append(loc)
        per_class[name_by_class[c]] = {
            "precision": p,
            "recall": r,
            "f1": f1,
            "loc": loc,
            "pred": float(pred[c]),
            "gt": float(gt[c]),
        }
    f1_all = float(np.mean(f1_values)) if f1_values else 0.0
    f1_loc = float(np.mean(loc_values)) if loc_values else 0.0
    return F1Report(f1_all=f1_all, f1_loc=f1_loc, per_class=per_class)


def _ngram_counts(tokens: list[int], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    candidates: list[list[int]],
    references: list[list[list[int]]],
    max_n: int = 4,
) -> list[float]:
    """Corpus-level cumulative BLEU-1..max_n with brevity penalty.

    candidates[i] is scored against references[i]; all sequences are content
    token lists (no BOS/EOS). Effective reference length is the closest to the
    candidate length, ties toward the shorter reference.
    """
    if len(candidates) != len(references):
        raise ValueError("need one reference set per candidate")
    if not candidates:
        raise ValueError("empty corpus")
    matched = [0] * max_n
    possible = [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngram_counts(cand, n)
            max_ref: Counter = Counter()
            for ref in refs:
                for g, c in _ngram_counts(ref, n).items():
                    max_ref[g] = max(max_ref[g], c)
            possible[n - 1] += max(0, len(cand) - n + 1)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(1, cand_len))
    scores = []
    for n in range(1, max_n + 1):
        precisions = []
        for k in range(n):
            precisions.append(matched[k] / possible[k] if possible[k] else 0.0)
        if min(precisions) <= 0:
            scores.append(0.0)
        else:
            log_mean = sum(math.log(p) for p in precisions) / n
            scores.append(bp * math.exp(log_mean))
    return scores


def strip_wrap(tokens: list[int]) -> list[int]:
    """Drop reserved ids, keeping content tokens only."""
    return [t for t in tokens if t > 3]


def full_report(
    run_dir: str | Path, dataset: Dataset, split: str, grounding: bool = True
) -> dict:
    """Aggregate caption and grounding metrics from a run's eval artifacts.

    Expects <run_dir>/eval-<split>/decoded.jsonl (decoded captions with
    attention rows) and teacher_forced.jsonl (ground-truth captions forced
    through the decoder). Raises EvaluationError naming every missing file.

    The record schema is fixed: B1, B4, M, C, S, F1_all, F1_loc plus
    attention fields. METEOR (M) and SPICE (S) are always null. With
    grounding=False (decodes from beam search carry no attention rows)
    F1_all and F1_loc are null as well.
    """
    eval_dir = Path(run_dir) / f"eval-{split}"
    decoded_path = eval_dir / "decoded.jsonl"
    forced_path = eval_dir / "teacher_forced.jsonl"
    missing = [str(p) for p in (decoded_path, forced_path) if not p.exists()]
    if missing:
        raise EvaluationError(f"missing evaluation artifacts: {', '.join(missing)}")

    decoded = [json.loads(line) for line in decoded_path.read_text().splitlines() if line]
    forced = [json.loads(line) for line in forced_path.read_text().splitlines() if line]
    if not decoded or not forced:
        raise EvaluationError("evaluation artifacts are empty")

    refs_by_scene = {
        scene_id: [strip_wrap(c.tokens) for c in caps]
        for scene_id, caps in dataset.captions_by_scene(split).items()
    }
    candidates, references = [], []
    for dump in decoded:
        scene_id = dump["scene_id"]
        if scene_id not in refs_by_scene:
            raise EvaluationError(f"decoded dump for {scene_id} outside split {split}")
        candidates.append(strip_wrap(dump["tokens"]))
        references.append(refs_by_scene[scene_id])

    from .objectives import build_cider_context  # local import; objectives uses iou

    ctx = build_cider_context(
        {scene_id: refs_by_scene[scene_id] for scene_id in refs_by_scene}
    )
    cider_scores = [
        ctx.score_with_refs(cand, refs) for cand, refs in zip(candidates, references)
    ]

    bleu_scores = bleu(candidates, references)
    att = attention_accuracy(forced, dataset)
    f1 = f1_grounding(decoded, dataset) if grounding else None

    return {
        "split": split,
        "num_scenes": len(decoded),
        "B1": bleu_scores[0],
        "B4": bleu_scores[3],
        "M": None,
        "C": float(np.mean(cider_scores)),
        "S": None,
        "F1_all": f1.f1_all if f1 else None,
        "F1_loc": f1.f1_loc if f1 else None,
        "attention_accuracy": att.accuracy,
        "attention_correct": att.correct,
        "attention_total": att.total,
    }
