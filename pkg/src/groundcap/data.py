"""Synthetic grounded-captioning datasets.

Scenes are sets of k region feature vectors drawn around class prototypes,
with axis-aligned boxes on a fixed canvas. Captions are generated from
function-word-heavy templates that mention every foreground object once,
so each noun token carries a known source region. The on-disk layout is a
flat directory: features.bin / features.json / boxes.json / captions.jsonl /
vocab.json / gen_config.json.
"""

from __future__ import annotations

import json
import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BoundingBox",
    "SceneRecord",
    "CaptionRecord",
    "Vocabulary",
    "SyntheticConfig",
    "Dataset",
    "DatasetError",
    "SidecarFormatError",
    "FeatureSizeError",
    "MissingSceneError",
    "generate_dataset",
    "desk_world",
    "build_vocabulary",
    "tokenize_and_truncate",
    "tag_nouns",
    "save_dataset",
    "load_dataset",
]

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

CANVAS_SIZE = 100.0
BACKGROUND_CLASS = -1

# Object-class lexicon. Single-token lowercase nouns, disjoint from every word
# used in the caption templates below.
NOUN_WORDS = [
    "dog", "cat", "car", "tree", "bird", "boat", "chair", "table", "horse",
    "sheep", "cow", "bike", "lamp", "sofa", "truck", "plane", "fish", "duck",
    "bear", "wolf", "fox", "deer", "frog", "crab", "mouse", "rabbit", "goat",
    "pig", "lion", "tiger", "bench", "kite", "drum", "bell", "clock", "vase",
    "bowl", "cup", "plate", "fork",
]

# Characteristic verb per class, aligned index-for-index with NOUN_WORDS.
# Verb templates place the verb right after its noun, so captions carry a
# second word that identifies the class but is NOT part of the noun lexicon:
# matching models that score all words can lean on it, while grounding
# metrics and the POS restriction ignore it.
VERB_WORDS = [
    "barking", "meowing", "idling", "swaying", "chirping", "drifting",
    "creaking", "wobbling", "trotting", "bleating", "grazing", "rolling",
    "glowing", "sagging", "rumbling", "gliding", "swimming", "paddling",
    "lumbering", "howling", "prowling", "leaping", "croaking", "scuttling",
    "scurrying", "hopping", "climbing", "snuffling", "roaring", "stalking",
    "weathering", "soaring", "booming", "ringing", "ticking", "gleaming",
    "shining", "steaming", "sparkling", "glinting",
]

# Templates keyed by object count. Placeholders {0}..{3} are filled with class
# names in a per-caption shuffled order; everything else is filler, keeping the
# noun ratio low so POS restriction has room to matter. Consecutive pairs of
# templates share a distinctive filler vocabulary, forming the pool for one
# caption style when num_styles > 0 (style s draws from templates 2s and 2s+1).
DEFAULT_TEMPLATES: dict[int, list[str]] = {
    2: [
        "you can see a {0} and also a {1}",
        "you can spot a {0} right by the {1}",
        "there is a {0} along with the {1}",
        "there is a {1} standing beside a {0}",
        "it looks like a {0} resting near the {1}",
        "it seems like a {0} sits near the {1}",
        "what waits here is a {0} next to the {1}",
        "what stands here is a {0} close to the {1}",
    ],
    3: [
        "you can see a {0} a {1} and also a {2}",
        "you can spot a {0} with a {1} out by the {2}",
        "there is a {0} along with a {1} and the {2}",
        "there is a {1} standing beside a {0} and a {2}",
        "it looks like a {0} and a {1} resting near the {2}",
        "it seems like a {0} with a {1} sits near the {2}",
        "what waits here is a {0} a {1} and next the {2}",
        "what stands here is a {0} a {1} close to the {2}",
    ],
    4: [
        "you can see a {0} a {1} a {2} and also a {3}",
        "you can spot a {0} and a {1} out by a {2} and the {3}",
        "there is a {0} a {1} a {2} along with the {3}",
        "there is a {1} standing beside a {0} a {2} and a {3}",
        "it looks like a {0} and a {1} resting near a {2} and the {3}",
        "it seems like a {0} a {1} and a {2} sit near the {3}",
        "what waits here is a {0} a {1} a {2} and next the {3}",
        "what stands here is a {0} a {1} close to a {2} and the {3}",
    ],
}

# Variant templates used when class_verbs is on: {vN} expands to the verb of
# the object in noun slot N. Same pairing convention for styles as above.
VERB_TEMPLATES: dict[int, list[str]] = {
    2: [
        "you can see a {0} {v0} and also a {1} {v1}",
        "you can spot a {0} {v0} right by the {1} {v1}",
        "there is a {0} {v0} along with the {1} {v1}",
        "there is a {1} {v1} beside a {0} {v0}",
        "it looks like a {0} {v0} near the {1} {v1}",
        "it seems like a {0} {v0} near a {1} {v1}",
        "what waits here is a {0} {v0} next to the {1} {v1}",
        "what stands here is a {0} {v0} close to the {1} {v1}",
    ],
    3: [
        "you can see a {0} {v0} a {1} {v1} and a {2} {v2}",
        "you can spot a {0} {v0} by a {1} {v1} and the {2} {v2}",
        "there is a {0} {v0} a {1} {v1} and the {2} {v2}",
        "there is a {1} {v1} beside a {0} {v0} and a {2} {v2}",
        "it looks like a {0} {v0} a {1} {v1} and the {2} {v2}",
        "it seems like a {0} {v0} a {1} {v1} near the {2} {v2}",
        "what waits here is a {0} {v0} a {1} {v1} and the {2} {v2}",
        "what stands here is a {0} {v0} a {1} {v1} by the {2} {v2}",
    ],
    4: [
        "you can see a {0} {v0} a {1} {v1} a {2} {v2} a {3} {v3}",
        "you can spot a {0} {v0} a {1} {v1} a {2} {v2} a {3} {v3}",
        "there is a {0} {v0} a {1} {v1} a {2} {v2} and a {3} {v3}",
        "there is a {1} {v1} a {0} {v0} a {2} {v2} beside a {3} {v3}",
        "it looks like a {0} {v0} a {1} {v1} a {2} {v2} a {3} {v3}",
        "it seems like a {0} {v0} a {1} {v1} a {2} {v2} a {3} {v3}",
        "what waits is a {0} {v0} a {1} {v1} a {2} {v2} and a {3} {v3}",
        "what stands is a {0} {v0} a {1} {v1} a {2} {v2} and a {3} {v3}",
    ],
}

_PLACEHOLDER_RE = re.compile(r"^\{(v?)(\d+)\}$")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, corner format, x2 > x1 and y2 > y1."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {self.as_list()}")

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @staticmethod
    def from_list(coords: Sequence[float]) -> "BoundingBox":
        if len(coords) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(coords)}")
        return BoundingBox(*(float(c) for c in coords))

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass
class SceneRecord:
    """One image surrogate: k region features with aligned boxes and classes."""

    scene_id: str
    features: np.ndarray  # float32 [k, d]
    boxes: list[BoundingBox]
    classes: list[int]  # per region; BACKGROUND_CLASS for filler regions

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.scene_id}: features must be [k, d] with k >= 1")
        k = self.features.shape[0]
        if len(self.boxes) != k or len(self.classes) != k:
            raise ValueError(
                f"{self.scene_id}: boxes/classes length must match k={k}"
            )

    @property
    def num_regions(self) -> int:
        return self.features.shape[0]


@dataclass
class CaptionRecord:
    """One caption, tokenized with BOS/EOS wrap.

    noun_mask is aligned with tokens (reserved positions always false).
    grounding maps noun token indices to the boxes of their source regions.
    """

    caption_id: str
    scene_id: str
    raw: str
    tokens: list[int]
    noun_mask: list[bool]
    grounding: dict[int, list[BoundingBox]]

    def __post_init__(self) -> None:
        if len(self.tokens) < 2 or self.tokens[0] != BOS or self.tokens[-1] != EOS:
            raise ValueError(f"{self.caption_id}: tokens must be BOS ... EOS")
        if len(self.noun_mask) != len(self.tokens):
            raise ValueError(f"{self.caption_id}: noun_mask length mismatch")
        for idx in self.grounding:
            if not (0 <= idx < len(self.tokens)) or not self.noun_mask[idx]:
                raise ValueError(
                    f"{self.caption_id}: grounding key {idx} is not a noun position"
                )

    @property
    def length(self) -> int:
        """Content length, excluding BOS/EOS."""
        return len(self.tokens) - 2


class Vocabulary:
    """Word/id table with fixed reserved ids 0..3 (pad, bos, eos, unk)."""

    def __init__(self, words: Sequence[str]):
        if list(words[:4]) != list(RESERVED_TOKENS):
            raise ValueError("vocabulary must start with the reserved tokens")
        self.id_to_word: list[str] = list(words)
        self.word_to_id: dict[str, int] = {w: i for i, w in enumerate(words)}
        if len(self.word_to_id) != len(self.id_to_word):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_word)

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_id

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_word == other.id_to_word

    def encode_word(self, word: str) -> int:
        return self.word_to_id.get(word, UNK)

    def word(self, token_id: int) -> str:
        return self.id_to_word[token_id]

    def words(self, token_ids: Iterable[int]) -> list[str]:
        return [self.id_to_word[t] for t in token_ids]


@dataclass
class SyntheticConfig:
    """Knobs for the synthetic world generator."""

    num_classes: int = 30
    regions_per_scene: int = 8
    feature_dim: int = 64
    noise_sigma: float = 0.0
    min_objects: int = 2
    max_objects: int = 4
    captions_per_scene: int = 5
    scenes: dict[str, int] = field(
        default_factory=lambda: {"train": 500, "val": 100, "test": 100}
    )
    min_count: int = 5
    max_caption_len: int = 16
    # Confusable class pairs. When sibling_delta > 0, classes (2j, 2j+1) share
    # a common prototype direction plus a sibling_delta-scaled private one, so
    # telling them apart needs the fine component. sibling_prob then controls
    # how often a mentioned object's sibling is planted in the scene as an
    # unmentioned distractor region. Both zero: independent prototypes, no
    # distractors.
    sibling_delta: float = 0.0
    sibling_prob: float = 0.0
    # Caption styles. When num_styles > 0 each scene draws a style that (a)
    # adds a style_scale-scaled shared direction to every region feature and
    # (b) restricts its captions to the matching two-template pool, so filler
    # words carry scene-identifying signal that only whole-sentence matching
    # can exploit. Zero: templates are drawn uniformly and features carry no
    # style component.
    num_styles: int = 0
    style_scale: float = 0.0
    # Append each class's characteristic verb after its noun (VERB_TEMPLATES).
    # Verbs duplicate the class signal in a non-noun word, giving full-sentence
    # matching a channel the POS-restricted score cannot use.
    class_verbs: bool = False
    # Reserve one region per scene for a gist feature: the normalized sum of
    # the present classes' prototypes under a near-canvas-sized box. It mimics
    # a detector's global context proposal: aligning any word to it is great
    # for matching (it encodes the class set) but always fails the IoU > 0.5
    # grounding check against object boxes.
    context_region: bool = False
    # Blend this fraction of the scene's class-set signature into every region
    # feature, object and background alike. Mimics detector features whose
    # receptive field covers far more than the box: each region then carries
    # scene-level signal, so whole-sentence matching can discriminate scenes
    # without word-level alignment ever being right.
    context_leak: float = 0.0
    seed: int = 0

    def template_table(self) -> dict[int, list[str]]:
        return VERB_TEMPLATES if self.class_verbs else DEFAULT_TEMPLATES

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 object classes")
        if self.regions_per_scene < self.max_objects + int(self.context_region):
            raise ValueError(
                "regions_per_scene must fit every object's region"
                + (" plus the context region" if self.context_region else "")
            )
        if not (1 <= self.min_objects <= self.max_objects):
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.max_objects > self.num_classes:
            raise ValueError("max_objects cannot exceed num_classes (classes are distinct per scene)")
        table = self.template_table()
        if self.max_objects not in table or self.min_objects not in table:
            raise ValueError(
                f"no templates for object counts outside {sorted(table)}"
            )
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.captions_per_scene < 1:
            raise ValueError("captions_per_scene must be >= 1")
        if self.max_caption_len < 1:
            raise ValueError("max_caption_len must be >= 1")
        if any(n < 0 for n in self.scenes.values()):
            raise ValueError("scene counts must be >= 0")
        if self.scenes.get("train", 0) < 1:
            raise ValueError("need a nonempty train split (the vocabulary comes from it)")
        if self.sibling_delta < 0:
            raise ValueError("sibling_delta must be >= 0")
        if not 0.0 <= self.context_leak < 1.0:
            raise ValueError("context_leak must lie in [0, 1)")
        if not 0.0 <= self.sibling_prob <= 1.0:
            raise ValueError("sibling_prob must be in [0, 1]")
        if self.sibling_prob > 0 and self.sibling_delta == 0:
            raise ValueError("sibling_prob needs sibling_delta > 0 (no pairs otherwise)")
        if self.num_styles < 0:
            raise ValueError("num_styles must be >= 0")
        if self.style_scale < 0:
            raise ValueError("style_scale must be >= 0")
        if self.style_scale > 0 and self.num_styles == 0:
            raise ValueError("style_scale needs num_styles > 0")
        if self.num_styles > 0:
            for count in range(self.min_objects, self.max_objects + 1):
                if len(table[count]) < 2 * self.num_styles:
                    raise ValueError(
                        f"num_styles={self.num_styles} needs "
                        f">= {2 * self.num_styles} templates for {count} objects"
                    )

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "SyntheticConfig":
        return SyntheticConfig(**d)


@dataclass
class Dataset:
    """In-memory dataset: scenes and captions per split plus shared tables."""

    config: SyntheticConfig
    class_names: list[str]
    prototypes: np.ndarray  # float32 [num_classes + 1, d]; last row is background
    vocab: Vocabulary
    scenes: dict[str, list[SceneRecord]]
    captions: dict[str, list[CaptionRecord]]

    def __post_init__(self) -> None:
        self._scene_index: dict[str, SceneRecord] = {}
        for split_scenes in self.scenes.values():
            for scene in split_scenes:
                if scene.scene_id in self._scene_index:
                    raise ValueError(f"duplicate scene_id {scene.scene_id}")
                self._scene_index[scene.scene_id] = scene

    @property
    def noun_lexicon(self) -> frozenset[str]:
        return frozenset(self.class_names)

    def scene(self, scene_id: str) -> SceneRecord:
        return self._scene_index[scene_id]

    def captions_by_scene(self, split: str) -> dict[str, list[CaptionRecord]]:
        grouped: dict[str, list[CaptionRecord]] = {}
        for cap in self.captions[split]:
            grouped.setdefault(cap.scene_id, []).append(cap)
        return grouped


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class SidecarFormatError(DatasetError):
    """A sidecar JSON file is malformed or missing required fields."""


class FeatureSizeError(DatasetError):
    """A binary payload does not match the byte length its sidecar declares."""


class MissingSceneError(DatasetError):
    """A record references a scene_id that does not exist."""


def _split_words(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


def build_vocabulary(texts: Iterable[str], min_count: int = 5) -> Vocabulary:
    """Frequency-ordered vocabulary over a text corpus.

    Words occurring fewer than min_count times are dropped (they map to unk).
    Ties in frequency are broken lexicographically so ids are reproducible.
    """
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in texts:
        n_texts += 1
        counts.update(_split_words(text))
    if n_texts == 0 or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (w for w, c in counts.items() if c >= min_count),
        key=lambda w: (-counts[w], w),
    )
    return Vocabulary(list(RESERVED_TOKENS) + kept)


def tokenize_and_truncate(text: str, vocab: Vocabulary, max_len: int = 16) -> list[int]:
    """Encode text as [BOS, ids..., EOS], keeping at most max_len content ids."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    words = _split_words(text)[:max_len]
    return [BOS] + [vocab.encode_word(w) for w in words] + [EOS]


def tag_nouns(words: Sequence[str], lexicon: frozenset[str] | set[str]) -> list[bool]:
    """Mark positions whose word is in the noun lexicon.

    Operates on word strings; reserved-token strings are never in the lexicon,
    so wrapped sequences get false at BOS/EOS/pad/unk positions.
    """
    return [w in lexicon for w in words]


def _place_boxes(k: int, rng: np.random.Generator) -> list[BoundingBox]:
    """k disjoint boxes, one per distinct cell of a jittered grid."""
    grid = math.ceil(math.sqrt(k))
    cell = CANVAS_SIZE / grid
    cells = rng.permutation(grid * grid)[:k]
    boxes = []
    for c in cells:
        row, col = divmod(int(c), grid)
        u = rng.uniform(size=4)
        x1 = col * cell + cell * (0.05 + 0.25 * u[0])
        x2 = col * cell + cell * (0.60 + 0.35 * u[1])
        y1 = row * cell + cell * (0.05 + 0.25 * u[2])
        y2 = row * cell + cell * (0.60 + 0.35 * u[3])
        boxes.append(BoundingBox(x1, y1, x2, y2))
    return boxes


def _parse_template(template: str) -> list[tuple[str, int | None, bool]]:
    """Split a template into (word, slot_index_or_None, is_verb_slot) triples."""
    out: list[tuple[str, int | None, bool]] = []
    for tok in template.split():
        m = _PLACEHOLDER_RE.match(tok)
        if m:
            out.append((tok, int(m.group(2)), m.group(1) == "v"))
        else:
            out.append((tok, None, False))
    return out


def generate_dataset(cfg: SyntheticConfig) -> Dataset:
    """Build the full synthetic dataset for one seed.

    Determinism contract: a given (cfg, seed) always produces the same dataset,
    byte for byte once saved. All randomness flows through one numpy Generator.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    class_names = list(NOUN_WORDS[: cfg.num_classes])
    while len(class_names) < cfg.num_classes:
        class_names.append(f"thing{len(class_names)}")
    verb_names = list(VERB_WORDS[: cfg.num_classes])
    while len(verb_names) < cfg.num_classes:
        verb_names.append(f"moving{len(verb_names)}")

    if cfg.sibling_delta > 0:
        n_pairs = (cfg.num_classes + 1) // 2
        shared = rng.standard_normal((n_pairs, cfg.feature_dim))
        private = rng.standard_normal((cfg.num_classes, cfg.feature_dim))
        protos = shared[np.arange(cfg.num_classes) // 2] + cfg.sibling_delta * private
        protos = np.concatenate(
            [protos, rng.standard_normal((1, cfg.feature_dim))], axis=0
        )
    else:
        protos = rng.standard_normal((cfg.num_classes + 1, cfg.feature_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    prototypes = protos.astype(np.float32)

    style_vecs = None
    if cfg.num_styles > 0:
        style_vecs = rng.standard_normal((cfg.num_styles, cfg.feature_dim))
        style_vecs /= np.linalg.norm(style_vecs, axis=1, keepdims=True)

    templates = {
        n: [_parse_template(t) for t in ts] for n, ts in cfg.template_table().items()
    }

    # First pass: scenes plus raw caption text and structural noun positions.
    scenes: dict[str, list[SceneRecord]] = {split: [] for split in cfg.scenes}
    raw_captions: dict[str, list[tuple[str, str, list[tuple[int, int]]]]] = {
        split: [] for split in cfg.scenes
    }

    for split, count in cfg.scenes.items():
        for i in range(count):
            scene_id = f"{split}-{i:05d}"
            n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
            obj_classes = rng.choice(cfg.num_classes, size=n_obj, replace=False)
            slots = rng.choice(cfg.regions_per_scene, size=n_obj, replace=False)
            region_classes = [BACKGROUND_CLASS] * cfg.regions_per_scene
            for slot, cls in zip(slots, obj_classes):
                region_classes[int(slot)] = int(cls)

            gist_slot = None
            if cfg.context_region:
                gist_slot = next(
                    s
                    for s in range(cfg.regions_per_scene)
                    if region_classes[s] == BACKGROUND_CLASS
                )

            if cfg.sibling_prob > 0:
                free = [
                    s
                    for s in range(cfg.regions_per_scene)
                    if region_classes[s] == BACKGROUND_CLASS and s != gist_slot
                ]
                present = {int(c) for c in obj_classes}
                for cls in (int(c) for c in obj_classes):
                    sib = cls ^ 1  # pair partner: (0,1), (2,3), ...
                    if sib >= cfg.num_classes or sib in present or not free:
                        continue
                    if rng.uniform() < cfg.sibling_prob:
                        pick = int(rng.integers(len(free)))
                        region_classes[free.pop(pick)] = sib
                        present.add(sib)

            style = int(rng.integers(cfg.num_styles)) if cfg.num_styles > 0 else None

            boxes = _place_boxes(cfg.regions_per_scene, rng)
            rows = prototypes[
                [cls if cls != BACKGROUND_CLASS else cfg.num_classes for cls in region_classes]
            ]
            if gist_slot is not None or cfg.context_leak > 0:
                combo = prototypes[obj_classes].sum(axis=0)
                gist_dir = combo / np.linalg.norm(combo)
            if cfg.context_leak > 0:
                # rows was built by fancy indexing, so it is already a copy
                blended = (1.0 - cfg.context_leak) * rows + cfg.context_leak * gist_dir
                rows = blended / np.linalg.norm(blended, axis=1, keepdims=True)
            if gist_slot is not None:
                rows[gist_slot] = gist_dir
                boxes[gist_slot] = BoundingBox(2.0, 2.0, 98.0, 98.0)
            offset = (
                cfg.style_scale * style_vecs[style]
                if style is not None and cfg.style_scale > 0
                else 0.0
            )
            if cfg.noise_sigma > 0:
                feats = rows.astype(np.float64) + offset
                feats += cfg.noise_sigma * rng.standard_normal(rows.shape)
                feats = feats.astype(np.float32)
            elif style is not None and cfg.style_scale > 0:
                feats = (rows.astype(np.float64) + offset).astype(np.float32)
            else:
                feats = rows.copy()
            scenes[split].append(SceneRecord(scene_id, feats, boxes, region_classes))

            for _ in range(cfg.captions_per_scene):
                order = rng.permutation(n_obj)
                pool = templates[n_obj]
                if style is None:
                    tmpl = pool[int(rng.integers(len(pool)))]
                else:
                    tmpl = pool[2 * style + int(rng.integers(2))]
                words: list[str] = []
                noun_spans: list[tuple[int, int]] = []  # (word position, region slot)
                for word, ph, is_verb in tmpl:
                    if ph is None:
                        words.append(word)
                    elif is_verb:
                        words.append(verb_names[int(obj_classes[int(order[ph])])])
                    else:
                        obj = int(order[ph])
                        noun_spans.append((len(words), int(slots[obj])))
                        words.append(class_names[int(obj_classes[obj])])
                raw_captions[split].append((scene_id, " ".join(words), noun_spans))

    vocab = build_vocabulary(
        (raw for _, raw, _ in raw_captions["train"]), cfg.min_count
    )

    # Second pass: tokenize against the train vocabulary and attach grounding.
    captions: dict[str, list[CaptionRecord]] = {}
    for split in cfg.scenes:
        split_caps: list[CaptionRecord] = []
        scene_boxes = {s.scene_id: s.boxes for s in scenes[split]}
        for j, (scene_id, raw, noun_spans) in enumerate(raw_captions[split]):
            tokens = tokenize_and_truncate(raw, vocab, cfg.max_caption_len)
            noun_mask = [False] * len(tokens)
            grounding: dict[int, list[BoundingBox]] = {}
            for word_pos, slot in noun_spans:
                if word_pos >= cfg.max_caption_len:
                    continue  # truncated away
                token_index = word_pos + 1  # BOS occupies position 0
                noun_mask[token_index] = True
                grounding[token_index] = [scene_boxes[scene_id][slot]]
            split_caps.append(
                CaptionRecord(
                    caption_id=f"{scene_id}#c{j % cfg.captions_per_scene}",
                    scene_id=scene_id,
                    raw=raw,
                    tokens=tokens,
                    noun_mask=noun_mask,
                    grounding=grounding,
                )
            )
        captions[split] = split_caps

    return Dataset(
        config=cfg,
        class_names=class_names,
        prototypes=prototypes,
        vocab=vocab,
        scenes=scenes,
        captions=captions,
    )


def desk_world() -> SyntheticConfig:
    """Desk-scale world where matching quality and grounding quality pull apart.

    Twelve classes with exactly three objects per scene make most scene pairs
    near-twins, so in-batch hard negatives stay hard. The context region plus
    the feature leak give every region a scene-level signature, letting
    whole-sentence matching discriminate those twins without placing any
    individual word on the right box; the noun-restricted score has too few
    terms for that shortcut and can only close its margins through exact
    noun-to-object alignment.
    """
    return SyntheticConfig(
        num_classes=12,
        noise_sigma=0.15,
        min_objects=3,
        max_objects=3,
        captions_per_scene=3,
        scenes={"train": 500, "val": 100, "test": 20},
        min_count=1,
        context_region=True,
        context_leak=0.5,
        seed=0,
    )


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write the on-disk layout. Deterministic: same dataset, same bytes."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    splits = list(ds.config.scenes)
    scene_meta = []
    offset = 0
    feature_blocks = []
    for split in splits:
        for scene in ds.scenes[split]:
            feature_blocks.append(np.ascontiguousarray(scene.features, dtype="<f4"))
            scene_meta.append(
                {
                    "scene_id": scene.scene_id,
                    "split": split,
                    "offset": offset,
                    "k": scene.num_regions,
                }
            )
            offset += scene.num_regions
    payload = (
        np.concatenate(feature_blocks, axis=0)
        if feature_blocks
        else np.zeros((0, ds.config.feature_dim), dtype="<f4")
    )
    (root / "features.bin").write_bytes(payload.tobytes(order="C"))
    _dump_json(
        {
            "dtype": "<f4",
            "feature_dim": ds.config.feature_dim,
            "total_rows": offset,
            "scenes": scene_meta,
        },
        root / "features.json",
    )

    boxes_obj = {}
    for split in splits:
        for scene in ds.scenes[split]:
            boxes_obj[scene.scene_id] = {
                "boxes": [b.as_list() for b in scene.boxes],
                "classes": scene.classes,
            }
    _dump_json(boxes_obj, root / "boxes.json")

    with (root / "captions.jsonl").open("w") as fh:
        for split in splits:
            for cap in ds.captions[split]:
                fh.write(
                    json.dumps(
                        {
                            "caption_id": cap.caption_id,
                            "scene_id": cap.scene_id,
                            "split": split,
                            "raw": cap.raw,
                            "tokens": cap.tokens,
                            "noun_mask": [int(b) for b in cap.noun_mask],
                            "grounding": {
                                str(i): [b.as_list() for b in bs]
                                for i, bs in sorted(cap.grounding.items())
                            },
                        },
                        sort_keys=True,
                        separators=(",", ":"),
                    )
                    + "\n"
                )

    _dump_json({"words": ds.vocab.id_to_word}, root / "vocab.json")
    (root / "prototypes.bin").write_bytes(
        np.ascontiguousarray(ds.prototypes, dtype="<f4").tobytes(order="C")
    )
    _dump_json(
        {
            "config": ds.config.to_dict(),
            "class_names": ds.class_names,
            "prototype_rows": ds.prototypes.shape[0],
        },
        root / "gen_config.json",
    )


def _read_json(root: Path, name: str):
    path = root / name
    if not path.exists():
        raise SidecarFormatError(f"missing sidecar {name}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SidecarFormatError(f"{name} is not valid JSON: {exc}") from exc


def load_dataset(path: str | Path) -> Dataset:
    """Load a saved dataset, validating structure before trusting any of it.

    Raises SidecarFormatError for malformed sidecars, FeatureSizeError when a
    binary payload disagrees with its declared shape, and MissingSceneError
    for records that point at scenes that do not exist.
    """
    root = Path(path)

    gen_obj = _read_json(root, "gen_config.json")
    try:
        cfg = SyntheticConfig.from_dict(gen_obj["config"])
        class_names = list(gen_obj["class_names"])
        proto_rows = int(gen_obj["prototype_rows"])
    except (KeyError, TypeError) as exc:
        raise SidecarFormatError(f"gen_config.json: {exc!r}") from exc

    vocab_obj = _read_json(root, "vocab.json")
    try:
        vocab = Vocabulary(vocab_obj["words"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SidecarFormatError(f"vocab.json: {exc!r}") from exc

    feat_obj = _read_json(root, "features.json")
    try:
        dtype = np.dtype(feat_obj["dtype"])
        dim = int(feat_obj["feature_dim"])
        total_rows = int(feat_obj["total_rows"])
        scene_meta = list(feat_obj["scenes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SidecarFormatError(f"features.json: {exc!r}") from exc

    raw = (root / "features.bin").read_bytes() if (root / "features.bin").exists() else None
    if raw is None:
        raise SidecarFormatError("missing features.bin")
    expected = total_rows * dim * dtype.itemsize
    if len(raw) != expected:
        raise FeatureSizeError(
            f"features.bin holds {len(raw)} bytes, sidecar declares {expected}"
        )
    all_features = np.frombuffer(raw, dtype=dtype).reshape(total_rows, dim)

    proto_raw = (root / "prototypes.bin").read_bytes() if (root / "prototypes.bin").exists() else None
    if proto_raw is None:
        raise SidecarFormatError("missing prototypes.bin")
    if len(proto_raw) != proto_rows * dim * 4:
        raise FeatureSizeError(
            f"prototypes.bin holds {len(proto_raw)} bytes, expected {proto_rows * dim * 4}"
        )
    prototypes = np.frombuffer(proto_raw, dtype="<f4").reshape(proto_rows, dim).copy()

    boxes_obj = _read_json(root, "boxes.json")

    scenes: dict[str, list[SceneRecord]] = {split: [] for split in cfg.scenes}
    for meta in scene_meta:
        try:
            scene_id = meta["scene_id"]
            split = meta["split"]
            off = int(meta["offset"])
            k = int(meta["k"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SidecarFormatError(f"features.json scene entry: {exc!r}") from exc
        if split not in scenes:
            raise SidecarFormatError(f"{scene_id}: unknown split {split!r}")
        if off < 0 or off + k > total_rows:
            raise SidecarFormatError(f"{scene_id}: rows [{off}, {off + k}) out of range")
        if scene_id not in boxes_obj:
            raise MissingSceneError(f"{scene_id} has features but no boxes.json entry")
        entry = boxes_obj[scene_id]
        try:
            boxes = [BoundingBox.from_list(b) for b in entry["boxes"]]
            classes = [int(c) for c in entry["classes"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise SidecarFormatError(f"boxes.json[{scene_id}]: {exc!r}") from exc
        feats = all_features[off : off + k].copy()
        scenes[split].append(SceneRecord(scene_id, feats, boxes, classes))

    known_scenes = {s.scene_id for ss in scenes.values() for s in ss}

    captions: dict[str, list[CaptionRecord]] = {split: [] for split in cfg.scenes}
    cap_path = root / "captions.jsonl"
    if not cap_path.exists():
        raise SidecarFormatError("missing captions.jsonl")
    with cap_path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SidecarFormatError(f"captions.jsonl line {line_no}: {exc}") from exc
            try:
                scene_id = obj["scene_id"]
                split = obj["split"]
                cap = CaptionRecord(
                    caption_id=obj["caption_id"],
                    scene_id=scene_id,
                    raw=obj["raw"],
                    tokens=[int(t) for t in obj["tokens"]],
                    noun_mask=[bool(b) for b in obj["noun_mask"]],
                    grounding={
                        int(i): [BoundingBox.from_list(b) for b in bs]
                        for i, bs in obj["grounding"].items()
                    },
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise SidecarFormatError(f"captions.jsonl line {line_no}: {exc!r}") from exc
            if scene_id not in known_scenes:
                raise MissingSceneError(
                    f"caption {cap.caption_id} references unknown scene {scene_id}"
                )
            if split not in captions:
                raise SidecarFormatError(f"caption {cap.caption_id}: unknown split {split!r}")
            captions[split].append(cap)

    return Dataset(
        config=cfg,
        class_names=class_names,
        prototypes=prototypes,
        vocab=vocab,
        scenes=scenes,
        captions=captions,
    )


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Structural equality; used to state the save/load round-trip contract."""
    if a.config != b.config or a.class_names != b.class_names or a.vocab != b.vocab:
        return False
    if not np.array_equal(a.prototypes, b.prototypes):
        return False
    if set(a.scenes) != set(b.scenes) or set(a.captions) != set(b.captions):
        return False
    for split in a.scenes:
        if len(a.scenes[split]) != len(b.scenes[split]):
            return False
        for sa, sb in zip(a.scenes[split], b.scenes[split]):
            if (
                sa.scene_id != sb.scene_id
                or not np.array_equal(sa.features, sb.features)
                or sa.boxes != sb.boxes
                or sa.classes != sb.classes
            ):
                return False
    for split in a.captions:
        if a.captions[split] != b.captions[split]:
            return False
    return True
