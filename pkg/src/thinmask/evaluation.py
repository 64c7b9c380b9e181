"""LVIS-style mask AP with rare/common/frequent grouping.

Matching is greedy per image: detections in descending score order each take
the unmatched same-category ground truth with the highest IoU at or above the
threshold. AP is 101-point interpolated. Categories with no ground truth and
no detections are skipped; with detections but no ground truth they score 0.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from statistics import fmean
from typing import Mapping, Sequence

import numpy as np

from .core import Instance, bbox_iou, mask_iou
from .dataset import Dataset
from .longtail import BUCKETS
from .parallel import pmap
from .tta import Detection

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# k/100 is correctly rounded, so recall tp/n == k/100 compares exactly
RECALL_POINTS = np.arange(101) / 100.0


@dataclass(frozen=True)
class Match:
    det_index: int
    gt_index: int | None
    category_id: int
    score: float
    iou: float

    @property
    def is_tp(self) -> bool:
        return self.gt_index is not None


def _iou(det: Detection, gt: Instance) -> float:
    if det.mask is not None:
        return mask_iou(det.mask, gt.mask)
    return bbox_iou(det.bbox, gt.bbox)


def score_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def match_detections(dets: Sequence[Detection], gts: Sequence[Instance], iou_thresh: float = 0.5) -> list[Match]:
    """Greedy matching within one image.

    Mask IoU is used when a detection carries a mask, box IoU otherwise.
    Returned matches follow descending score (ties by input position).
    """
    taken = [False] * len(gts)
    out = []
    for i in score_order(dets):
        det = dets[i]
        best, best_iou = None, -1.0
        for g, gt in enumerate(gts):
            if taken[g] or gt.category_id != det.category_id:
                continue
            iou = _iou(det, gt)
            if iou >= iou_thresh and iou > best_iou:
                best, best_iou = g, iou
        if best is not None:
            taken[best] = True
        out.append(Match(i, best, det.category_id, det.score, max(best_iou, 0.0)))
    return out


def average_precision(matches: Sequence[Match | bool], num_gt: int) -> float | None:
    """101-point interpolated AP of a score-ranked TP/FP sequence.

    ``matches`` may be :class:`Match` objects (already ranked) or plain
    booleans (True = TP). Returns ``None`` when there is nothing to evaluate.
    """
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    flags = np.array([m.is_tp if isinstance(m, Match) else bool(m) for m in matches], dtype=bool)
    if num_gt == 0:
        return None if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < flags.size, envelope[np.minimum(idx, flags.size - 1)], 0.0)
    return float(np.mean(interp))


@dataclass
class EvalResult:
    per_category: dict[int, float]
    num_gt: dict[int, int]
    buckets: dict[int, str]
    ap: float | None
    ap_r: float | None
    ap_c: float | None
    ap_f: float | None
    matched: int = 0
    unmatched_dets: int = 0
    unmatched_gts: int = 0

    def aggregates(self) -> dict[str, float | None]:
        return {"AP": self.ap, "AP_r": self.ap_r, "AP_c": self.ap_c, "AP_f": self.ap_f}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("category", "bucket", "num_gt", "AP"))
        for c in sorted(self.per_category):
            w.writerow((c, self.buckets.get(c, ""), self.num_gt.get(c, 0), _fmt(self.per_category[c])))
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("AP", "AP_r", "AP_c", "AP_f"))
        w.writerow(tuple(_fmt(v) for v in self.aggregates().values()))
        return buf.getvalue()


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def grouped_ap(per_category: Mapping[int, float | None], buckets: Mapping[int, str]) -> EvalResult:
    """Mean AP overall and per rarity bucket; an empty bucket is reported as ``None``."""
    evaluated = {c: ap for c, ap in per_category.items() if ap is not None}
    missing = [c for c in evaluated if c not in buckets]
    if missing:
        raise ValueError(f"no bucket for categories {sorted(missing)}")
    groups: dict[str, list[float]] = {b: [] for b in BUCKETS}
    for c, ap in evaluated.items():
        groups.setdefault(buckets[c], []).append(ap)

    def mean(vals):
        return fmean(vals) if vals else None

    return EvalResult(
        per_category=dict(sorted(evaluated.items())),
        num_gt={},
        buckets={c: buckets[c] for c in evaluated},
        ap=mean(list(evaluated.values())),
        ap_r=mean(groups["rare"]),
        ap_c=mean(groups["common"]),
        ap_f=mean(groups["frequent"]),
    )


def evaluate(
    dataset: Dataset,
    detections: Sequence[Detection],
    buckets: Mapping[int, str],
    iou_thresholds: Sequence[float] = (0.5,),
    threads: int = 1,
) -> EvalResult:
    """Evaluate detections (tagged with ``image_id``) against a dataset."""
    by_image: dict[int, list[Detection]] = {}
    for d in detections:
        by_image.setdefault(d.image_id, []).append(d)
    known = {img.id for img in dataset.images}
    stray = sorted(set(by_image) - known)
    if stray:
        raise ValueError(f"detections reference unknown images {stray[:5]}")

    num_gt: dict[int, int] = {}
    for ann in dataset.annotations():
        num_gt[ann.category_id] = num_gt.get(ann.category_id, 0) + 1

    def per_threshold(t: float):
        ranked: dict[int, list[tuple[float, int, int, bool]]] = {}
        tp_total = 0
        for img in dataset.images:
            dets = by_image.get(img.id, [])
            for m in match_detections(dets, img.instances, t):
                ranked.setdefault(m.category_id, []).append((m.score, img.id, m.det_index, m.is_tp))
                tp_total += m.is_tp
        return ranked, tp_total

    results = pmap(per_threshold, list(iou_thresholds), threads)
    cats = sorted(set(num_gt) | {c for ranked, _ in results for c in ranked})

    def category_ap(c: int) -> float | None:
        aps = []
        for ranked, _ in results:
            seq = sorted(ranked.get(c, []), key=lambda r: (-r[0], r[1], r[2]))
            ap = average_precision([r[3] for r in seq], num_gt.get(c, 0))
            if ap is not None:
                aps.append(ap)
        return fmean(aps) if aps else None

    per_cat = dict(zip(cats, pmap(category_ap, cats, threads)))
    bucket_lookup = {c: buckets.get(c, "rare") for c in cats}
    res = grouped_ap(per_cat, bucket_lookup)
    res.num_gt = {c: num_gt.get(c, 0) for c in res.per_category}
    tp = results[0][1]
    res.matched = tp
    res.unmatched_dets = len(detections) - tp
    res.unmatched_gts = sum(num_gt.values()) - tp
    return res
