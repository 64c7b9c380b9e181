"""Routing mask proposals to FPN levels.

Two rules are provided:

* :func:`assign_level` -- the ratio-aware rule. A proposal goes to level
  ``min(floor(S_bbox / 56**2), floor(S_mask / (0.25 * S_bbox)), 3)``, so a
  thin mask (mask covers under a quarter of its box) always lands on the
  finest level no matter how big the box is.
* :func:`assign_level_baseline` -- the usual scale-only heuristic
  ``floor(log2(sqrt(S_bbox) / 56))``.

Levels are indexed ``0..coarsest_level`` (P2..P5 for the default of 3).
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .core import Instance

LITERAL = "literal"
LOG2 = "log2"

RULE_RATIO = "ratio"
RULE_BASELINE = "baseline"

REPORT_COLUMNS = ("rule", "level", "bucket", "count")


@dataclass(frozen=True)
class AssignmentConfig:
    finest_area: float = 56.0**2
    ratio_divisor: float = 0.25
    coarsest_level: int = 3
    box_term_mode: str = LITERAL

    def __post_init__(self) -> None:
        if not self.finest_area > 0:
            raise ValueError("finest_area must be positive")
        if not 0 < self.ratio_divisor <= 1:
            raise ValueError("ratio_divisor must lie in (0, 1]")
        if self.coarsest_level < 0:
            raise ValueError("coarsest_level must be >= 0")
        if self.box_term_mode not in (LITERAL, LOG2):
            raise ValueError(f"unknown box_term_mode {self.box_term_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _log_scale_level(s_bbox: float, finest_area: float) -> int:
    # Largest k >= 0 with s_bbox >= finest_area * 4**k, i.e. floor(log2(sqrt(s) / sqrt(finest))),
    # computed by comparison so exact powers never suffer from log rounding.
    if s_bbox < finest_area:
        return 0
    k = int(math.floor(math.log(s_bbox / finest_area, 4)))
    while k > 0 and s_bbox < finest_area * 4.0**k:
        k -= 1
    while s_bbox >= finest_area * 4.0 ** (k + 1):
        k += 1
    return k


def _check_box(s_bbox: float) -> None:
    if not s_bbox > 0:
        raise ValueError(f"box area must be positive, got {s_bbox}")


def assign_level(s_bbox: float, s_mask: float, cfg: AssignmentConfig = AssignmentConfig()) -> int:
    """Ratio-aware level for a proposal with box area ``s_bbox`` and mask area ``s_mask``.

    ``s_mask == 0`` is allowed and yields level 0.

    Raises:
        ValueError: if ``s_bbox <= 0``, ``s_mask < 0`` or ``s_mask > s_bbox``.
    """
    _check_box(s_bbox)
    if s_mask < 0:
        raise ValueError(f"mask area must be non-negative, got {s_mask}")
    if s_mask > s_bbox:
        raise ValueError(f"mask exceeds box: {s_mask} > {s_bbox}")
    if cfg.box_term_mode == LITERAL:
        box_term = math.floor(s_bbox / cfg.finest_area)
    else:
        box_term = _log_scale_level(s_bbox, cfg.finest_area)
    ratio_term = math.floor(s_mask / (cfg.ratio_divisor * s_bbox))
    return max(0, min(box_term, ratio_term, cfg.coarsest_level))


def assign_level_baseline(s_bbox: float, cfg: AssignmentConfig = AssignmentConfig()) -> int:
    """Scale-only level ``floor(log2(sqrt(s_bbox) / 56))`` clamped to the pyramid."""
    _check_box(s_bbox)
    return min(_log_scale_level(s_bbox, cfg.finest_area), cfg.coarsest_level)


@dataclass
class AssignmentReport:
    """Level histograms for both rules, split by rarity bucket."""

    counts: dict[tuple[str, int, str], int]
    coarsest_level: int
    buckets: tuple[str, ...]
    thin_total: int
    thin_level0: dict[str, int]
    degenerate: int

    def rows(self) -> list[tuple[str, int, str, int]]:
        out = []
        for rule in (RULE_RATIO, RULE_BASELINE):
            for level in range(self.coarsest_level + 1):
                for bucket in self.buckets:
                    out.append((rule, level, bucket, self.counts.get((rule, level, bucket), 0)))
        return out

    def level_histogram(self, rule: str) -> list[int]:
        hist = [0] * (self.coarsest_level + 1)
        for (r, level, _), n in self.counts.items():
            if r == rule:
                hist[level] += n
        return hist

    def thin_level0_rate(self, rule: str) -> float | None:
        if self.thin_total == 0:
            return None
        return self.thin_level0[rule] / self.thin_total

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        writer.writerows(self.rows())
        return buf.getvalue()


def assignment_report(
    instances: Sequence[Instance],
    cfg: AssignmentConfig = AssignmentConfig(),
    bucket_of: Mapping[int, str] | Callable[[int], str] | None = None,
) -> AssignmentReport:
    """Histogram instances by level under both rules.

    Args:
        instances: Instances to route; box and mask areas are read from each.
        cfg: Assignment constants.
        bucket_of: Category id to rarity bucket. When omitted every instance
            falls in a single ``"all"`` bucket.
    """
    if not instances:
        raise ValueError("assignment report needs at least one instance")
    if bucket_of is None:
        lookup: Callable[[int], str] = lambda _c: "all"
    elif callable(bucket_of):
        lookup = bucket_of
    else:
        lookup = bucket_of.__getitem__

    counts: Counter = Counter()
    thin_total = 0
    thin_level0 = {RULE_RATIO: 0, RULE_BASELINE: 0}
    degenerate = 0
    seen_buckets: set[str] = set()
    for inst in instances:
        s_bbox = inst.bbox.area()
        s_mask = inst.mask.area()
        bucket = lookup(inst.category_id)
        seen_buckets.add(bucket)
        ratio_level = assign_level(s_bbox, s_mask, cfg)
        base_level = assign_level_baseline(s_bbox, cfg)
        counts[(RULE_RATIO, ratio_level, bucket)] += 1
        counts[(RULE_BASELINE, base_level, bucket)] += 1
        if s_mask == 0:
            degenerate += 1
        if s_mask / s_bbox < cfg.ratio_divisor:
            thin_total += 1
            thin_level0[RULE_RATIO] += ratio_level == 0
            thin_level0[RULE_BASELINE] += base_level == 0

    return AssignmentReport(
        counts=dict(counts),
        coarsest_level=cfg.coarsest_level,
        buckets=_ordered_buckets(seen_buckets),
        thin_total=thin_total,
        thin_level0=thin_level0,
        degenerate=degenerate,
    )


_BUCKET_ORDER = ("rare", "common", "frequent")


def _ordered_buckets(buckets: Iterable[str]) -> tuple[str, ...]:
    known = [b for b in _BUCKET_ORDER if b in buckets]
    return tuple(known + sorted(set(buckets) - set(_BUCKET_ORDER)))
