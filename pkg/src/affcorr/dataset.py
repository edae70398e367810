"""Weak labelling of songs and images, segmentation, pair generation, splits."""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidInput, NoLabel

SEGMENT_SECONDS = 60.0
SPLIT_RATIOS = (0.7, 0.1, 0.2)


class EmotionClass(enum.IntEnum):
    """Broad emotion class. Integer order doubles as tie-break preference."""

    NEGATIVE = 0
    NEUTRAL = 1
    POSITIVE = 2

    @classmethod
    def parse(cls, name: str) -> "EmotionClass":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise InvalidInput(f"unknown emotion class {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


IMAGE_LABELS = (
    "amusement", "anger", "awe", "contentment", "disgust", "excitement", "fear", "sadness",
)

IMAGE_REGROUPING = {
    "awe": EmotionClass.POSITIVE,
    "amusement": EmotionClass.POSITIVE,
    "excitement": EmotionClass.POSITIVE,
    "contentment": EmotionClass.NEUTRAL,
    "fear": EmotionClass.NEGATIVE,
    "disgust": EmotionClass.NEGATIVE,
    "anger": EmotionClass.NEGATIVE,
    "sadness": EmotionClass.NEGATIVE,
}

TAG_STRINGS = {
    EmotionClass.POSITIVE: ("happy", "joyous", "energetic"),
    EmotionClass.NEUTRAL: ("soothing", "relax", "calm"),
    EmotionClass.NEGATIVE: ("sad", "pain"),
}


def regroup_image_label(original: str) -> EmotionClass:
    try:
        return IMAGE_REGROUPING[original.strip().lower()]
    except KeyError:
        raise InvalidInput(f"unknown image label {original!r}") from None


def classify_tag(tag: str, blocklist: Iterable[str] = ()) -> EmotionClass | None:
    """Map a user tag to a class by substring search.

    Tags on the blocklist, or matching strings of more than one class
    (e.g. 'happysad'), are treated as ambiguous and yield None.
    """
    tag = tag.lower()
    if tag in {b.lower() for b in blocklist}:
        return None
    hits = {cls for cls, needles in TAG_STRINGS.items() if any(n in tag for n in needles)}
    if len(hits) != 1:
        return None
    return hits.pop()


def count_tag_classes(tags: Iterable[str], blocklist: Iterable[str] = ()) -> Counter:
    blocklist = frozenset(b.lower() for b in blocklist)
    counts: Counter = Counter()
    for tag in tags:
        cls = classify_tag(tag, blocklist)
        if cls is not None:
            counts[cls] += 1
    return counts


def resolve_song_label(tag_class_counts: Mapping[EmotionClass, int]) -> EmotionClass:
    """Most frequent class wins; ties go to the more positive class."""
    counts = {cls: int(tag_class_counts.get(cls, 0)) for cls in EmotionClass}
    if not any(counts.values()):
        raise NoLabel("song has no classifiable tags")
    return max(EmotionClass, key=lambda cls: (counts[cls], cls))


def segment_song(duration: float) -> list[tuple[float, float]]:
    if duration < 0:
        raise InvalidInput(f"negative duration {duration}")
    n = int(math.floor(duration / SEGMENT_SECONDS))
    return [(k * SEGMENT_SECONDS, (k + 1) * SEGMENT_SECONDS) for k in range(n)]


def segment_id(song_id: str, k: int) -> str:
    return f"{song_id}#{k}"


def song_of(segment: str) -> str:
    return segment.rsplit("#", 1)[0]


@dataclass
class ImageRecord:
    id: str
    original_label: str
    embedding_ref: int
    cls: EmotionClass = field(init=False)

    def __post_init__(self):
        self.cls = regroup_image_label(self.original_label)


@dataclass
class SongRecord:
    id: str
    tags: list[str]
    duration_s: float = 0.0
    wav_path: str | None = None
    cls: EmotionClass | None = None
    segment_ids: list[str] = field(default_factory=list)

    def label(self, blocklist: Iterable[str] = ()) -> "SongRecord":
        """Fill class and segment ids in place; raises NoLabel if no tag classifies."""
        self.cls = resolve_song_label(count_tag_classes(self.tags, blocklist))
        self.segment_ids = [segment_id(self.id, k) for k in range(len(segment_song(self.duration_s)))]
        return self


@dataclass(frozen=True)
class LabeledSegment:
    id: str
    song_id: str
    cls: EmotionClass


@dataclass(frozen=True, order=True)
class CorrespondencePair:
    image_id: str
    segment_id: str
    label: bool


@dataclass
class DatasetSplit:
    train: list[CorrespondencePair]
    val: list[CorrespondencePair]
    test: list[CorrespondencePair]
    seed: int
    songs: dict[str, list[str]] = field(default_factory=dict)
    images: dict[str, list[str]] = field(default_factory=dict)

    def partitions(self) -> dict[str, list[CorrespondencePair]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def label_songs(songs: Sequence[SongRecord], blocklist: Iterable[str] = ()) -> list[SongRecord]:
    """Label every song that has at least one classifiable tag; drop the rest."""
    blocklist = frozenset(blocklist)
    kept = []
    for song in songs:
        try:
            kept.append(song.label(blocklist))
        except NoLabel:
            continue
    return kept


def labeled_segments(songs: Iterable[SongRecord]) -> list[LabeledSegment]:
    return [
        LabeledSegment(sid, song.id, song.cls)
        for song in songs if song.cls is not None
        for sid in song.segment_ids
    ]


def _sample_pairs(rng: np.random.Generator, candidates: list[tuple[int, int]], n: int):
    idx = rng.choice(len(candidates), size=n, replace=False)
    return [candidates[i] for i in np.sort(idx)]


def generate_pairs(images: Sequence[ImageRecord], segments: Sequence[LabeledSegment],
                   false_ratio: float = 1.0, seed: int = 0,
                   true_per_segment: int = 30) -> list[CorrespondencePair]:
    """Sample true and false image/segment pairs.

    Each segment is matched with up to ``true_per_segment`` images of its own
    class; ``round(false_ratio * n_true)`` false pairs are then drawn without
    replacement from the cross-class product.
    """
    if not images or not segments:
        raise InvalidInput("generate_pairs needs at least one image and one segment")
    if false_ratio < 0:
        raise InvalidInput("false_ratio must be non-negative")
    rng = np.random.default_rng(seed)
    images = sorted(images, key=lambda r: r.id)
    segments = sorted(segments, key=lambda s: s.id)
    by_class: dict[EmotionClass, list[int]] = {c: [] for c in EmotionClass}
    for i, img in enumerate(images):
        by_class[img.cls].append(i)

    true_idx = []
    for j, seg in enumerate(segments):
        pool = by_class[seg.cls]
        if not pool:
            continue
        take = min(true_per_segment, len(pool))
        for i in np.sort(rng.choice(len(pool), size=take, replace=False)):
            true_idx.append((pool[i], j))

    n_false = int(round(false_ratio * len(true_idx)))
    false_idx: list[tuple[int, int]] = []
    if n_false:
        cross = [(i, j) for j, seg in enumerate(segments)
                 for c, pool in by_class.items() if c != seg.cls for i in pool]
        if not cross:
            raise InvalidInput("every image and segment shares one class; no false pairs possible")
        if n_false > len(cross):
            raise InvalidInput(f"requested {n_false} false pairs but only {len(cross)} exist")
        false_idx = _sample_pairs(rng, cross, n_false)

    pairs = [CorrespondencePair(images[i].id, segments[j].id, True) for i, j in true_idx]
    pairs += [CorrespondencePair(images[i].id, segments[j].id, False) for i, j in false_idx]
    for p, (i, j) in zip(pairs, true_idx + false_idx):
        assert p.label == (images[i].cls == segments[j].cls)
    return sorted(pairs)


def partition_counts(n: int, ratios: Sequence[float] = SPLIT_RATIOS) -> tuple[int, int, int]:
    n_val = max(1, int(round(ratios[1] * n)))
    n_test = max(1, int(round(ratios[2] * n)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise InvalidInput(f"{n} items are too few for a train/val/test split")
    return n_train, n_val, n_test


def _partition(ids: Iterable[str], rng: np.random.Generator) -> dict[str, str]:
    ids = sorted(set(ids))
    n_train, n_val, _ = partition_counts(len(ids))
    order = rng.permutation(len(ids))
    where = {}
    for rank, k in enumerate(order):
        where[ids[k]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return where


def split_dataset(pairs: Sequence[CorrespondencePair], seed: int = 0) -> DatasetSplit:
    """Song-disjoint and image-disjoint 70:10:20 split.

    Pairs whose song and image land in different partitions are discarded.
    """
    rng = np.random.default_rng(seed)
    song_part = _partition((song_of(p.segment_id) for p in pairs), rng)
    image_part = _partition((p.image_id for p in pairs), rng)
    out: dict[str, list[CorrespondencePair]] = {"train": [], "val": [], "test": []}
    for p in sorted(pairs):
        part = song_part[song_of(p.segment_id)]
        if image_part[p.image_id] == part:
            out[part].append(p)
    songs = {k: sorted(s for s, v in song_part.items() if v == k) for k in out}
    images = {k: sorted(i for i, v in image_part.items() if v == k) for k in out}
    return DatasetSplit(out["train"], out["val"], out["test"], seed, songs, images)
