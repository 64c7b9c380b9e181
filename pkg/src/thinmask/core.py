"""Geometry and mask primitives: boxes, binary masks, IoU, area ratio, RLE.

Pixel model: mask pixel ``(r, c)`` covers the unit square ``[c, c+1) x [r, r+1)``,
so tight boxes always have integer corners and ``mask.area() <= bbox.area()``
holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class MaskError(ValueError):
    """Raised for invalid masks or boxes."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box ``(x_min, y_min, width, height)`` in pixel units."""

    x_min: float
    y_min: float
    width: float
    height: float

    def __post_init__(self) -> None:
        if not (self.width > 0 and self.height > 0):
            raise MaskError(f"box must have positive size, got {self.width}x{self.height}")
        if self.x_min < 0 or self.y_min < 0:
            raise MaskError(f"box origin must be non-negative, got ({self.x_min}, {self.y_min})")

    @property
    def x_max(self) -> float:
        return self.x_min + self.width

    @property
    def y_max(self) -> float:
        return self.y_min + self.height

    def area(self) -> float:
        return self.width * self.height

    def to_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    @classmethod
    def from_list(cls, xywh: Sequence[float]) -> "BBox":
        x, y, w, h = (float(v) for v in xywh)
        return cls(x, y, w, h)


class BinaryMask:
    """Dense ``height x width`` grid of {0, 1}.

    The underlying array is stored as ``bool`` and marked read-only so a mask
    can be shared freely between instances and threads.
    """

    __slots__ = ("_bits",)

    def __init__(self, bits) -> None:
        arr = np.asarray(bits)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise MaskError(f"mask must be a non-empty 2-D grid, got shape {arr.shape}")
        if arr.dtype != bool:
            if not np.all((arr == 0) | (arr == 1)):
                raise MaskError("mask entries must be 0 or 1")
            arr = arr.astype(bool)
        else:
            arr = arr.copy()
        arr.flags.writeable = False
        self._bits = arr

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def height(self) -> int:
        return self._bits.shape[0]

    @property
    def width(self) -> int:
        return self._bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._bits.shape

    def area(self) -> int:
        return int(np.count_nonzero(self._bits))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._bits, other._bits))

    def __hash__(self) -> int:
        return hash((self.shape, self._bits.tobytes()))

    def __repr__(self) -> str:
        return f"BinaryMask({self.height}x{self.width}, area={self.area()})"


@dataclass(frozen=True)
class Instance:
    """A ground-truth object: category, box and mask in the same pixel frame."""

    category_id: int
    bbox: BBox
    mask: BinaryMask

    def __post_init__(self) -> None:
        if self.category_id < 0:
            raise MaskError("category_id must be non-negative")
        if self.mask.area() < 1:
            raise MaskError("instance mask must contain at least one pixel")
        tight = tight_bbox(self.mask)
        b = self.bbox
        if tight.x_min < b.x_min or tight.y_min < b.y_min or tight.x_max > b.x_max or tight.y_max > b.y_max:
            raise MaskError("bbox does not contain every mask pixel")

    @classmethod
    def from_mask(cls, category_id: int, mask: BinaryMask) -> "Instance":
        """Build an instance whose box is the tight box of ``mask``."""
        return cls(category_id, tight_bbox(mask), mask)


def mask_area(mask: BinaryMask) -> int:
    return mask.area()


def tight_bbox(mask: BinaryMask) -> BBox:
    """Smallest axis-aligned box covering every 1-pixel of ``mask``."""
    rows = np.flatnonzero(mask.bits.any(axis=1))
    if rows.size == 0:
        raise MaskError("empty mask has no bounding box")
    cols = np.flatnonzero(mask.bits.any(axis=0))
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    return BBox(float(c0), float(r0), float(c1 - c0 + 1), float(r1 - r0 + 1))


def bbox_intersection(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def bbox_iou(a: BBox, b: BBox) -> float:
    inter = bbox_intersection(a, b)
    if inter == 0.0:
        return 0.0
    # rounding in the union can push the ratio a hair past 1
    return min(1.0, inter / (a.area() + b.area() - inter))


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union of two equally sized masks; 0 when both are empty."""
    if a.shape != b.shape:
        raise MaskError(f"mask dimension mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a.bits | b.bits)
    if union == 0:
        return 0.0
    return np.count_nonzero(a.bits & b.bits) / union


def area_ratio(inst: Instance) -> float:
    """Mask area over box area; small values mean a thin mask in a large box."""
    return inst.mask.area() / inst.bbox.area()


def crop_to_bbox(mask: BinaryMask, box: BBox) -> BinaryMask:
    """Cut the integer-aligned window ``box`` out of ``mask``.

    Used to turn an image-frame instance into its RoI-frame target grid.
    """
    x0, y0 = int(np.floor(box.x_min)), int(np.floor(box.y_min))
    x1, y1 = int(np.ceil(box.x_max)), int(np.ceil(box.y_max))
    if x1 > mask.width or y1 > mask.height:
        raise MaskError("box extends beyond mask canvas")
    return BinaryMask(mask.bits[y0:y1, x0:x1])


# --- row-major uncompressed RLE -------------------------------------------


def encode_rle(mask: BinaryMask) -> list[int]:
    """Encode as ``[height, width, run0, run1, ...]``, runs alternating bg/fg.

    The first run counts background pixels and may be 0.
    """
    flat = mask.bits.ravel().astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs.insert(0, 0)
    return [mask.height, mask.width, *runs]


def decode_rle(rle: Sequence[int]) -> BinaryMask:
    if len(rle) < 2:
        raise MaskError("RLE must start with height and width")
    height, width = int(rle[0]), int(rle[1])
    runs = np.asarray(rle[2:], dtype=np.int64)
    if np.any(runs < 0):
        raise MaskError("RLE run lengths must be non-negative")
    if int(runs.sum()) != height * width:
        raise MaskError(f"RLE runs sum to {int(runs.sum())}, expected {height * width}")
    values = np.arange(runs.size) % 2 == 1
    flat = np.repeat(values, runs)
    return BinaryMask(flat.reshape(height, width))
