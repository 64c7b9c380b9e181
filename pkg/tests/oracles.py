"""Straightforward re-implementations used as test oracles.

Nothing here imports the code under test beyond plain data types, and each
routine is written the naive way (exact rationals, brute-force loops) so a
bug in the library is unlikely to be mirrored.
"""

from fractions import Fraction
import math


def ratio_level(s_bbox: int, s_mask: int, coarsest: int = 3) -> int:
    """Ratio-aware level with exact rational arithmetic."""
    box_term = s_bbox // 3136
    ratio_term = math.floor(Fraction(s_mask) / (Fraction(1, 4) * s_bbox))
    return max(0, min(box_term, ratio_term, coarsest))


def scale_level(s_bbox: int, coarsest: int = 3) -> int:
    """floor(log2(sqrt(s)/56)) by repeated doubling of the side length."""
    level = 0
    side = Fraction(56)
    while (2 * side) ** 2 <= s_bbox:
        side *= 2
        level += 1
    return min(level, coarsest)


def box_iou_xywh(a, b) -> float:
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    ix = max(0.0, min(ax0 + aw, bx0 + bw) - max(ax0, bx0))
    iy = max(0.0, min(ay0 + ah, by0 + bh) - max(ay0, by0))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def greedy_nms(items, thresh):
    """items: list of (box, score, category). Returns kept indices."""
    kept = []
    order = sorted(range(len(items)), key=lambda i: (-items[i][1], i))
    for i in order:
        ok = True
        for k in kept:
            if items[k][2] == items[i][2] and box_iou_xywh(items[k][0], items[i][0]) > thresh:
                ok = False
                break
        if ok:
            kept.append(i)
    return sorted(kept)


def gaussian_soft_nms(items, sigma, floor):
    """items: list of (box, score, category). Returns {index: final score} for survivors."""
    scores = {i: it[1] for i, it in enumerate(items)}
    alive = set(scores)
    final = {}
    while alive:
        best = None
        for i in sorted(alive):
            if best is None or scores[i] > scores[best]:
                best = i
        alive.discard(best)
        final[best] = scores[best]
        for i in sorted(alive):
            if items[i][2] != items[best][2]:
                continue
            iou = box_iou_xywh(items[best][0], items[i][0])
            scores[i] = scores[i] * math.exp(-iou * iou / sigma)
        alive = {i for i in alive if scores[i] >= floor}
    return final


def interpolated_ap(flags, num_gt):
    """101-point AP by scanning every recall threshold against every rank."""
    if num_gt == 0:
        return None if not flags else 0.0
    points = []
    tp = fp = 0
    for f in flags:
        tp += f
        fp += not f
        points.append((tp / num_gt, tp / (tp + fp)))
    total = 0.0
    for k in range(101):
        r = k / 100
        best = 0.0
        for rec, prec in points:
            if rec >= r and prec > best:
                best = prec
        total += best
    return total / 101
