"""Multi-scale test-time merge.

Pipeline per image: drop boxes outside their scale's valid area range,
concatenate all scales, nudge rare-category scores up, class-wise NMS at 0.7,
then class-wise Soft-NMS. Duplicates across scales are suppressed, never
coordinate-averaged.

Ordering is canonical everywhere: descending score, then category id, then
insertion order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .core import BBox, BinaryMask, bbox_iou, decode_rle, encode_rle
from .levels import AssignmentConfig, assign_level

GAUSSIAN = "gaussian"
LINEAR = "linear"


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    score: float
    category_id: int
    scale_id: int = 0
    mask: BinaryMask | None = None
    image_id: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    def to_json_dict(self) -> dict:
        out = {
            "image_id": self.image_id,
            "scale_id": self.scale_id,
            "category_id": self.category_id,
            "score": self.score,
            "bbox": self.bbox.to_list(),
        }
        if self.mask is not None:
            out["rle"] = encode_rle(self.mask)
        return out

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "Detection":
        mask = decode_rle(d["rle"]) if d.get("rle") is not None else None
        return cls(
            bbox=BBox.from_list(d["bbox"]),
            score=float(d["score"]),
            category_id=int(d["category_id"]),
            scale_id=int(d.get("scale_id", 0)),
            mask=mask,
            image_id=int(d.get("image_id", 0)),
        )


@dataclass(frozen=True)
class ScaleSpec:
    """One test resolution and the box areas (reference frame) it may contribute."""

    scale_id: int
    image_size: int
    area_lo: float = 0.0
    area_hi: float = math.inf

    def accepts(self, area: float) -> bool:
        return self.area_lo <= area < self.area_hi


@dataclass(frozen=True)
class SoftNMSConfig:
    method: str = GAUSSIAN
    sigma: float = 0.5
    iou_thresh: float = 0.3
    score_floor: float = 1e-3

    def __post_init__(self) -> None:
        if self.method not in (GAUSSIAN, LINEAR):
            raise ValueError(f"unknown soft-nms method {self.method!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


def default_scales(image_sizes: Sequence[int] = (1600, 1200, 800), base_area: float = 56.0**2) -> list[ScaleSpec]:
    """Geometric partition of box area: the largest image size takes the smallest boxes.

    Boundaries sit at ``base_area * 4**k`` for ``k = 1 .. n-1``.
    """
    sizes = sorted(image_sizes, reverse=True)
    n = len(sizes)
    bounds = [0.0] + [base_area * 4.0**k for k in range(1, n)] + [math.inf]
    return [ScaleSpec(i, size, bounds[i], bounds[i + 1]) for i, size in enumerate(sizes)]


@dataclass(frozen=True)
class TTAConfig:
    scales: tuple[ScaleSpec, ...] = field(default_factory=lambda: tuple(default_scales()))
    rare_boost: float = 0.05
    nms_iou: float = 0.7
    soft_nms: SoftNMSConfig = field(default_factory=SoftNMSConfig)
    mask_ratio_cut: float = 0.25

    def __post_init__(self) -> None:
        if not self.scales:
            raise ValueError("at least one scale is required")
        ids = [s.scale_id for s in self.scales]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate scale_id")
        if not 0 < self.nms_iou < 1:
            raise ValueError("nms_iou must lie in (0, 1)")
        if self.rare_boost < 0:
            raise ValueError("rare_boost must be >= 0")
        if not _covers_positive_axis(self.scales):
            raise ValueError("scale ranges must jointly cover (0, inf)")

    def scale(self, scale_id: int) -> ScaleSpec:
        for s in self.scales:
            if s.scale_id == scale_id:
                return s
        raise KeyError(f"unknown scale_id {scale_id}")

    def to_dict(self) -> dict:
        return {
            "scales": [
                {
                    "scale_id": s.scale_id,
                    "image_size": s.image_size,
                    "area_lo": s.area_lo,
                    "area_hi": None if math.isinf(s.area_hi) else s.area_hi,
                }
                for s in self.scales
            ],
            "rare_boost": self.rare_boost,
            "nms_iou": self.nms_iou,
            "soft_nms": {
                "method": self.soft_nms.method,
                "sigma": self.soft_nms.sigma,
                "iou_thresh": self.soft_nms.iou_thresh,
                "score_floor": self.soft_nms.score_floor,
            },
            "mask_ratio_cut": self.mask_ratio_cut,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TTAConfig":
        kwargs = {}
        if "scales" in d:
            kwargs["scales"] = tuple(
                ScaleSpec(
                    int(s["scale_id"]),
                    int(s["image_size"]),
                    float(s.get("area_lo", 0.0)),
                    math.inf if s.get("area_hi") is None else float(s["area_hi"]),
                )
                for s in d["scales"]
            )
        for key in ("rare_boost", "nms_iou", "mask_ratio_cut"):
            if key in d:
                kwargs[key] = float(d[key])
        if "soft_nms" in d:
            kwargs["soft_nms"] = SoftNMSConfig(**d["soft_nms"])
        return cls(**kwargs)


def _covers_positive_axis(scales: Iterable[ScaleSpec]) -> bool:
    reach = 0.0
    for s in sorted(scales, key=lambda s: s.area_lo):
        if s.area_lo > reach:
            return False
        reach = max(reach, s.area_hi)
    return math.isinf(reach)


def canonical_order(dets: Sequence[Detection]) -> list[Detection]:
    """Sort by descending score, then category id, then original position."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].category_id, i))
    return [dets[i] for i in order]


def filter_by_scale_range(dets: Sequence[Detection], cfg: TTAConfig) -> list[Detection]:
    return [d for d in dets if cfg.scale(d.scale_id).accepts(d.bbox.area())]


def boost_rare(dets: Sequence[Detection], rare_categories: Iterable[int], boost: float) -> list[Detection]:
    """Additive score bump ``min(1, s + boost)`` for rare categories."""
    if boost < 0:
        raise ValueError("boost must be >= 0")
    rare = set(rare_categories)
    if boost == 0 or not rare:
        return list(dets)
    return [replace(d, score=min(1.0, d.score + boost)) if d.category_id in rare else d for d in dets]


def _by_category(dets: Sequence[Detection]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, d in enumerate(dets):
        groups.setdefault(d.category_id, []).append(i)
    return groups


def nms(dets: Sequence[Detection], iou_thresh: float = 0.7) -> list[Detection]:
    """Greedy class-wise NMS; a box is suppressed when IoU with a kept box exceeds the threshold."""
    if not 0 < iou_thresh < 1:
        raise ValueError("iou_thresh must lie in (0, 1)")
    kept: list[int] = []
    for idx in _by_category(dets).values():
        idx = sorted(idx, key=lambda i: (-dets[i].score, i))
        keep_here: list[int] = []
        for i in idx:
            if all(bbox_iou(dets[i].bbox, dets[k].bbox) <= iou_thresh for k in keep_here):
                keep_here.append(i)
        kept.extend(keep_here)
    kept.sort()
    return canonical_order([dets[i] for i in kept])


def soft_nms(dets: Sequence[Detection], cfg: SoftNMSConfig = SoftNMSConfig()) -> list[Detection]:
    """Class-wise Soft-NMS.

    Repeatedly takes the highest remaining score and decays the others by
    ``exp(-iou^2 / sigma)`` (gaussian) or ``1 - iou`` when ``iou > iou_thresh``
    (linear). Detections falling below ``score_floor`` are dropped.
    """
    out: list[tuple[int, Detection]] = []
    for idx in _by_category(dets).values():
        scores = {i: dets[i].score for i in idx}
        remaining = list(idx)
        while remaining:
            best = min(remaining, key=lambda i: (-scores[i], i))
            remaining.remove(best)
            out.append((best, replace(dets[best], score=scores[best])))
            survivors = []
            for i in remaining:
                iou = bbox_iou(dets[best].bbox, dets[i].bbox)
                if cfg.method == GAUSSIAN:
                    scores[i] *= math.exp(-(iou * iou) / cfg.sigma)
                elif iou > cfg.iou_thresh:
                    scores[i] *= 1.0 - iou
                if scores[i] >= cfg.score_floor:
                    survivors.append(i)
            remaining = survivors
    out.sort(key=lambda t: t[0])
    return canonical_order([d for _, d in out])


def merge_multiscale(
    per_scale: Mapping[int, Sequence[Detection]],
    cfg: TTAConfig,
    rare_categories: Iterable[int] = (),
) -> list[Detection]:
    """Merge one image's detections from several test scales.

    Boxes must already be mapped back to reference-image coordinates.
    """
    pooled: list[Detection] = []
    for scale_id in sorted(per_scale):
        cfg.scale(scale_id)
        for d in per_scale[scale_id]:
            if d.scale_id != scale_id:
                d = replace(d, scale_id=scale_id)
            pooled.append(d)
    pooled = filter_by_scale_range(pooled, cfg)
    pooled = boost_rare(pooled, rare_categories, cfg.rare_boost)
    pooled = nms(pooled, cfg.nms_iou)
    return soft_nms(pooled, cfg.soft_nms)


def level_to_tier(level: int, coarsest_level: int, num_tiers: int) -> int:
    """Map a pyramid level onto ``num_tiers`` resolution tiers (0 = highest resolution).

    Exact halves round toward the finer tier.
    """
    if num_tiers <= 1 or coarsest_level == 0:
        return 0
    x = level * (num_tiers - 1) / coarsest_level
    return int(math.ceil(x - 0.5))


def select_mask_source(
    det: Detection,
    available: Mapping[int, BinaryMask | int],
    cfg: TTAConfig,
    coarsest_level: int = 3,
) -> int:
    """Pick which scale's mask prediction to keep for ``det``.

    Each candidate's level is computed from the detection's box area and the
    candidate mask area with the ratio-aware rule; thin or small objects map
    to high-resolution scales. The candidate whose own resolution tier is
    closest to its target tier wins, ties going to the higher resolution.

    Args:
        det: The merged detection.
        available: scale id to candidate mask (or just its pixel area).
        cfg: Supplies scale resolutions and the ratio cut.
    """
    if not available:
        raise ValueError("no candidate masks to choose from")
    if len(available) == 1:
        return next(iter(available))
    by_res = sorted(available, key=lambda sid: (-cfg.scale(sid).image_size, sid))
    tiers = {sid: t for t, sid in enumerate(by_res)}
    acfg = AssignmentConfig(ratio_divisor=cfg.mask_ratio_cut, coarsest_level=coarsest_level)
    s_bbox = det.bbox.area()
    best, best_key = None, None
    for sid in by_res:
        cand = available[sid]
        s_mask = cand.area() if isinstance(cand, BinaryMask) else float(cand)
        level = assign_level(s_bbox, min(s_mask, s_bbox), acfg)
        target = level_to_tier(level, coarsest_level, len(by_res))
        key = (abs(tiers[sid] - target), tiers[sid])
        if best_key is None or key < best_key:
            best, best_key = sid, key
    return best
