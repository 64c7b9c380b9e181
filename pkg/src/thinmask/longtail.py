"""Long-tail data handling: repeat-factor sampling and self-training pseudo labels."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import BBox, Instance, bbox_iou
from .dataset import Dataset, ImageRecord
from .tta import Detection

DEFAULT_RFS_THRESHOLD = 0.001
DEFAULT_COLLECT_SCORE = 0.5
DEFAULT_IGNORE_IOU = 0.5

RARE, COMMON, FREQUENT = "rare", "common", "frequent"
BUCKETS = (RARE, COMMON, FREQUENT)


def rarity_bucket(image_count: int) -> str:
    """Bucket by number of training images: <=10 rare, 11-100 common, >100 frequent."""
    if image_count <= 10:
        return RARE
    if image_count <= 100:
        return COMMON
    return FREQUENT


@dataclass(frozen=True)
class CategoryStats:
    category_id: int
    image_count: int
    frequency: float
    repeat_factor: float
    bucket: str


@dataclass(frozen=True)
class PseudoLabel:
    bbox: BBox
    category_id: int
    score: float
    source_image: int


def category_image_counts(dataset: Dataset) -> Counter:
    counts: Counter = Counter()
    for img in dataset.images:
        counts.update(img.category_ids())
    return counts


def category_frequencies(dataset: Dataset) -> dict[int, float]:
    """Fraction of images containing at least one instance of each category."""
    if len(dataset) == 0:
        raise ValueError("dataset has no images")
    n = len(dataset)
    counts = category_image_counts(dataset)
    return {c: counts[c] / n for c in sorted(counts)}


def repeat_factor(f: float, t: float = DEFAULT_RFS_THRESHOLD) -> float:
    """``max(1, sqrt(t / f))``."""
    if not f > 0:
        raise ValueError(f"category frequency must be positive, got {f}")
    if not t > 0:
        raise ValueError(f"threshold must be positive, got {t}")
    return max(1.0, math.sqrt(t / f))


def category_stats(dataset: Dataset, t: float = DEFAULT_RFS_THRESHOLD) -> dict[int, CategoryStats]:
    freqs = category_frequencies(dataset)
    counts = category_image_counts(dataset)
    return {
        c: CategoryStats(c, counts[c], f, repeat_factor(f, t), rarity_bucket(counts[c]))
        for c, f in freqs.items()
    }


def bucket_map(stats: Mapping[int, CategoryStats]) -> dict[int, str]:
    return {c: s.bucket for c, s in stats.items()}


def image_repeat_factor(image: ImageRecord, stats: Mapping[int, CategoryStats]) -> float:
    """Max category repeat factor over the image; 1 for an image with no instances."""
    cats = image.category_ids()
    if not cats:
        return 1.0
    return max(stats[c].repeat_factor for c in cats)


def repeat_count(r: float, rng: np.random.Generator) -> int:
    """``floor(r)`` copies plus one more with probability ``frac(r)``."""
    whole = math.floor(r)
    frac = r - whole
    return whole + int(rng.random() < frac)


def image_rng(seed: int, image_id: int) -> np.random.Generator:
    """Per-image stream keyed by ``(seed, image_id)`` so results never depend on scheduling."""
    return np.random.default_rng([seed, image_id])


def build_epoch(dataset: Dataset, stats: Mapping[int, CategoryStats], seed: int) -> list[int]:
    """One RFS epoch as a list of image ids, in dataset order, repeats adjacent."""
    epoch: list[int] = []
    for img in dataset.images:
        r = image_repeat_factor(img, stats)
        epoch.extend([img.id] * repeat_count(r, image_rng(seed, img.id)))
    return epoch


def collect_pseudo_labels(
    predictions: Sequence[Detection],
    gts: Sequence[Instance],
    overlap_iou: float = 0.0,
    score_thresh: float = DEFAULT_COLLECT_SCORE,
    image_id: int | None = None,
) -> list[PseudoLabel]:
    """Keep confident predictions that do not overlap any ground-truth box.

    With the default ``overlap_iou=0`` any positive overlap excludes a
    prediction; these survivors are treated as missing annotations.
    """
    if overlap_iou < 0:
        raise ValueError("overlap_iou must be >= 0")
    out = []
    for det in predictions:
        if det.score < score_thresh:
            continue
        if any(bbox_iou(det.bbox, gt.bbox) > overlap_iou for gt in gts):
            continue
        source = det.image_id if image_id is None else image_id
        out.append(PseudoLabel(det.bbox, det.category_id, det.score, source))
    return out


def mark_ignored_proposals(
    proposals: Sequence[BBox],
    pseudo: Sequence[PseudoLabel],
    ignore_iou: float = DEFAULT_IGNORE_IOU,
) -> list[bool]:
    """Flag proposals whose IoU with some pseudo label is at least ``ignore_iou``."""
    if not 0 < ignore_iou <= 1:
        raise ValueError("ignore_iou must lie in (0, 1]")
    return [any(bbox_iou(box, pl.bbox) >= ignore_iou for pl in pseudo) for box in proposals]


def subsample_pool(pool: Sequence, k: int, seed: int) -> list:
    """Uniform sample of ``k`` items without replacement."""
    if k < 0 or k > len(pool):
        raise ValueError(f"cannot draw {k} items from a pool of {len(pool)}")
    idx = np.random.default_rng(seed).choice(len(pool), size=k, replace=False)
    return [pool[i] for i in idx]
