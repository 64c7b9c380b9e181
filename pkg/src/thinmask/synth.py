"""Synthetic long-tailed datasets of thin and blob-like masks.

Only masks and boxes are produced; no pixels are rendered. Category ``k``
(0-based rank) appears in ``max(1, round(N * max_frequency * (k+1)**-alpha))``
images, so image frequencies decrease monotonically with rank.

Shapes and their area ratios:

* ``bar``     -- long thin rectangle (length >= 16x thickness) rotated off-axis; rho < 0.25
* ``annulus`` -- ring with thickness <= radius/7; rho < 0.25
* ``ellipse`` -- rotated ellipse; rho roughly 0.5-0.8
* ``blob``    -- filled axis-aligned rectangle; rho = 1

Bars and annuli are re-drawn until their ratio is below ``thin_cut``, so
every instance of those shapes is thin by construction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .core import BBox, BinaryMask, Instance, MaskError, area_ratio, tight_bbox
from .dataset import Annotation, Dataset, ImageRecord
from .parallel import pmap
from .tta import Detection, TTAConfig

SHAPES = ("bar", "annulus", "ellipse", "blob")

_THIN_SHAPES = ("bar", "annulus")
_MAX_REDRAWS = 50


@dataclass(frozen=True)
class SynthSpec:
    num_categories: int = 30
    num_images: int = 1000
    frequency_exponent: float = 1.5
    max_frequency: float = 0.8
    shape_mix: Mapping[str, float] = field(
        default_factory=lambda: {"bar": 0.25, "annulus": 0.15, "ellipse": 0.3, "blob": 0.3}
    )
    size_range: tuple[int, int] = (16, 200)
    rotation_range: tuple[float, float] = (-90.0, 90.0)
    image_height: int = 256
    image_width: int = 256
    thin_cut: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_categories < 1 or self.num_images < 1:
            raise ValueError("need at least one category and one image")
        unknown = set(self.shape_mix) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")
        weights = list(self.shape_mix.values())
        if any(w < 0 for w in weights) or not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
            raise ValueError("shape_mix weights must be non-negative and sum to 1")
        lo, hi = self.size_range
        if not 8 <= lo <= hi:
            raise ValueError(f"size_range must satisfy 8 <= lo <= hi, got {self.size_range}")
        if hi > min(self.image_height, self.image_width):
            raise ValueError(f"shapes up to {hi}px do not fit a {self.image_height}x{self.image_width} image")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ValueError("rotation_range is empty")
        if not 0 < self.max_frequency <= 1:
            raise ValueError("max_frequency must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape_mix"] = dict(sorted(self.shape_mix.items()))
        d["size_range"] = list(self.size_range)
        d["rotation_range"] = list(self.rotation_range)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthSpec":
        d = dict(d)
        if "size_range" in d:
            d["size_range"] = tuple(int(v) for v in d["size_range"])
        if "rotation_range" in d:
            d["rotation_range"] = tuple(float(v) for v in d["rotation_range"])
        if "shape_mix" in d:
            d["shape_mix"] = {k: float(v) for k, v in d["shape_mix"].items()}
        return cls(**d)


def category_image_targets(spec: SynthSpec) -> list[int]:
    n, a = spec.num_images, spec.frequency_exponent
    return [max(1, min(n, round(n * spec.max_frequency * (k + 1) ** -a))) for k in range(spec.num_categories)]


# --- rasterization ----------------------------------------------------------


def _centers(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(size) + 0.5 - size / 2.0
    return np.meshgrid(c, c, indexing="xy")


def raster_rectangle(length: int, thickness: int, canvas: int) -> BinaryMask:
    """Axis-aligned ``length`` wide, ``thickness`` tall rectangle centred on a square canvas."""
    if length > canvas or thickness > canvas:
        raise MaskError("rectangle larger than canvas")
    bits = np.zeros((canvas, canvas), dtype=bool)
    r0 = (canvas - thickness) // 2
    c0 = (canvas - length) // 2
    bits[r0 : r0 + thickness, c0 : c0 + length] = True
    return BinaryMask(bits)


def raster_annulus(outer_radius: float, thickness: float, canvas: int) -> BinaryMask:
    x, y = _centers(canvas)
    d2 = x * x + y * y
    inner = max(0.0, outer_radius - thickness)
    return BinaryMask((d2 <= outer_radius**2) & (d2 >= inner**2))


def raster_ellipse(semi_x: float, semi_y: float, canvas: int) -> BinaryMask:
    x, y = _centers(canvas)
    return BinaryMask((x / semi_x) ** 2 + (y / semi_y) ** 2 <= 1.0)


def _rotation(angle: float) -> tuple[float, float]:
    a = angle % 360.0
    exact = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}
    if a in exact:
        return exact[a]
    rad = math.radians(a)
    return math.cos(rad), math.sin(rad)


def rotate_mask(mask: BinaryMask, angle: float) -> BinaryMask:
    """Rotate about the pixel centre nearest the centroid, nearest-neighbour sampling.

    Positive angles turn counter-clockwise on screen (y axis pointing down).
    Multiples of 90 degrees are lattice-exact.

    Raises:
        MaskError: if the mask is empty or any rotated pixel leaves the canvas.
    """
    rows, cols = np.nonzero(mask.bits)
    if rows.size == 0:
        raise MaskError("cannot rotate an empty mask")
    cos, sin = _rotation(angle)
    px = math.floor(float(np.mean(cols + 0.5))) + 0.5
    py = math.floor(float(np.mean(rows + 0.5))) + 0.5

    # forward-map every set pixel centre to bound the output window
    dx, dy = cols + 0.5 - px, rows + 0.5 - py
    fx = px + cos * dx + sin * dy
    fy = py - sin * dx + cos * dy
    if fx.min() < 0 or fy.min() < 0 or fx.max() >= mask.width or fy.max() >= mask.height:
        raise MaskError("rotated mask leaves the canvas")

    x0 = max(0, int(math.floor(fx.min())) - 1)
    x1 = min(mask.width, int(math.floor(fx.max())) + 2)
    y0 = max(0, int(math.floor(fy.min())) - 1)
    y1 = min(mask.height, int(math.floor(fy.max())) + 2)
    qx, qy = np.meshgrid(np.arange(x0, x1) + 0.5 - px, np.arange(y0, y1) + 0.5 - py, indexing="xy")
    sx = np.floor(px + cos * qx - sin * qy).astype(np.int64)
    sy = np.floor(py + sin * qx + cos * qy).astype(np.int64)
    inside = (sx >= 0) & (sx < mask.width) & (sy >= 0) & (sy < mask.height)
    window = np.zeros(qx.shape, dtype=bool)
    window[inside] = mask.bits[sy[inside], sx[inside]]

    out = np.zeros(mask.shape, dtype=bool)
    out[y0:y1, x0:x1] = window
    return BinaryMask(out)


def rotate_instance(inst: Instance, angle: float) -> Instance:
    """Rotate the mask and recompute the box as its tight box.

    The box is never obtained by rotating the old box's corners, which would
    inflate it for thin masks.
    """
    rotated = rotate_mask(inst.mask, angle)
    return Instance(inst.category_id, tight_bbox(rotated), rotated)


# --- generation -------------------------------------------------------------


def _odd(n: int) -> int:
    return n if n % 2 else n + 1


def draw_shape(shape: str, size: int, rng: np.random.Generator, spec: SynthSpec) -> BinaryMask:
    """One shape on a square local canvas, already rotated; bbox not yet placed."""
    lo_rot, hi_rot = spec.rotation_range
    if shape == "bar":
        thickness = int(rng.integers(2, max(2, size // 16) + 1))
        canvas = _odd(size + 2 * thickness + 5)
        base = raster_rectangle(size, thickness, canvas)
        return rotate_mask(base, float(rng.uniform(lo_rot, hi_rot)))
    if shape == "annulus":
        radius = size / 2.0
        thickness = float(rng.uniform(1.5, max(1.5, radius / 7.0)))
        return raster_annulus(radius, thickness, _odd(size + 3))
    if shape == "ellipse":
        semi_x = size / 2.0
        semi_y = semi_x * float(rng.uniform(0.3, 1.0))
        canvas = _odd(size + 5)
        base = raster_ellipse(semi_x, semi_y, canvas)
        return rotate_mask(base, float(rng.uniform(lo_rot, hi_rot)))
    if shape == "blob":
        height = max(1, int(round(size * float(rng.uniform(0.5, 1.0)))))
        bits = np.ones((height, size), dtype=bool)
        return BinaryMask(bits)
    raise ValueError(f"unknown shape {shape!r}")


def _thin_enough(mask: BinaryMask, cut: float) -> bool:
    box = tight_bbox(mask)
    return mask.area() / box.area() < cut


def draw_instance_mask(shape: str, rng: np.random.Generator, spec: SynthSpec) -> BinaryMask:
    lo, hi = spec.size_range
    for _ in range(_MAX_REDRAWS):
        size = int(rng.integers(lo, hi + 1))
        local = draw_shape(shape, size, rng, spec)
        if shape not in _THIN_SHAPES or _thin_enough(local, spec.thin_cut):
            return local
    # extremely unlucky draws: fall back to a diagonal bar / thin ring at max size
    if shape == "bar":
        return rotate_mask(raster_rectangle(hi, 2, _odd(hi + 9)), 45.0)
    return raster_annulus(hi / 2.0, 1.5, _odd(hi + 3))


def place(local: BinaryMask, height: int, width: int, rng: np.random.Generator) -> BinaryMask:
    box = tight_bbox(local)
    x0, y0 = int(box.x_min), int(box.y_min)
    w, h = int(box.width), int(box.height)
    if h > height or w > width:
        raise MaskError(f"shape {h}x{w} does not fit a {height}x{width} image")
    ox = int(rng.integers(0, width - w + 1))
    oy = int(rng.integers(0, height - h + 1))
    out = np.zeros((height, width), dtype=bool)
    out[oy : oy + h, ox : ox + w] = local.bits[y0 : y0 + h, x0 : x0 + w]
    return BinaryMask(out)


def _image_instances(
    spec: SynthSpec, image_id: int, cats: list[int], shapes: list[str], weights: np.ndarray
) -> list[Instance]:
    rng = np.random.default_rng([spec.seed, 1, image_id])
    out = []
    for c in cats:
        shape = shapes[int(rng.choice(len(shapes), p=weights))]
        local = draw_instance_mask(shape, rng, spec)
        mask = place(local, spec.image_height, spec.image_width, rng)
        out.append(Instance.from_mask(c, mask))
    return out


def gen_dataset(spec: SynthSpec, threads: int = 1) -> Dataset:
    """Generate a dataset; identical for identical ``spec`` regardless of ``threads``."""
    targets = category_image_targets(spec)
    rng = np.random.default_rng([spec.seed, 0])
    members: list[list[int]] = [[] for _ in range(spec.num_images)]
    for cat, count in enumerate(targets):
        for img in rng.choice(spec.num_images, size=count, replace=False):
            members[int(img)].append(cat)

    shapes = [s for s in SHAPES if spec.shape_mix.get(s, 0.0) > 0]
    weights = np.array([spec.shape_mix[s] for s in shapes], dtype=np.float64)
    weights /= weights.sum()

    per_image = pmap(
        lambda i: _image_instances(spec, i, sorted(members[i]), shapes, weights),
        range(spec.num_images),
        threads,
    )
    images = []
    ann_id = 0
    for image_id, insts in enumerate(per_image):
        rec = ImageRecord(image_id, spec.image_height, spec.image_width)
        for inst in insts:
            rec.annotations.append(Annotation(ann_id, image_id, inst))
            ann_id += 1
        images.append(rec)
    categories = {c: f"cat{c:03d}" for c in range(spec.num_categories)}
    return Dataset(images, categories)


def ratio_histogram(dataset: Dataset, edges=(0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.5, 0.75, 1.0)) -> list[tuple[float, float, int]]:
    ratios = np.array([area_ratio(inst) for inst in dataset.instances()])
    counts, _ = np.histogram(ratios, bins=np.asarray(edges))
    return [(edges[i], edges[i + 1], int(counts[i])) for i in range(len(edges) - 1)]


# --- predictions -------------------------------------------------------------


@dataclass(frozen=True)
class PerturbNoise:
    flip_prob: float = 0.1
    blur: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.flip_prob < 0.5:
            raise ValueError("flip_prob must lie in [0, 0.5)")
        if self.blur < 0:
            raise ValueError("blur must be >= 0")


def perturb_prediction(
    inst: Instance, noise: PerturbNoise, seed: int | Sequence[int], scale_id: int = 0, image_id: int = 0
) -> tuple[np.ndarray, Detection]:
    """Noisy probability map for ``inst`` plus the detection it would yield.

    Pixels inside the instance box are flipped with probability ``flip_prob``;
    flipped-to-1 pixels get probability ``1 - flip_prob`` and 0 pixels get
    ``flip_prob``, then an optional box blur of radius ``blur`` is applied.
    Pixels outside the box stay at probability 0.
    """
    rng = np.random.default_rng(seed)
    q = noise.flip_prob
    box = inst.bbox
    x0, y0 = int(math.floor(box.x_min)), int(math.floor(box.y_min))
    x1, y1 = int(math.ceil(box.x_max)), int(math.ceil(box.y_max))
    gt = inst.mask.bits
    noisy = gt.copy()
    region = noisy[y0:y1, x0:x1]
    flips = rng.random(region.shape) < q
    region ^= flips
    probs = np.zeros(gt.shape, dtype=np.float64)
    inner = np.where(region, 1.0 - q, q)
    if noise.blur:
        inner = ndimage.uniform_filter(inner, size=2 * noise.blur + 1, mode="nearest")
    probs[y0:y1, x0:x1] = inner
    probs = np.clip(probs, 0.0, 1.0)

    pred = BinaryMask(probs >= 0.5)
    pred_box = tight_bbox(pred) if pred.area() else box
    det = Detection(pred_box, 1.0 - q, inst.category_id, scale_id, pred, image_id)
    return probs, det


def simulate_multiscale_detections(
    dataset: Dataset,
    cfg: TTAConfig,
    seed: int,
    good_flip: float = 0.05,
    bad_flip: float = 0.2,
    false_positives: int = 1,
    threads: int = 1,
) -> list[Detection]:
    """Fake per-scale detections for every GT instance.

    Each instance is detected at every scale; the scale whose valid range
    contains the box gets ``good_flip`` noise and the rest ``bad_flip``.
    Every image also receives ``false_positives`` low-score random boxes per scale.
    """

    def one_image(img: ImageRecord) -> list[Detection]:
        rng = np.random.default_rng([seed, 2, img.id])
        out = []
        for k, ann in enumerate(img.annotations):
            inst = ann.instance
            for s in cfg.scales:
                q = good_flip if s.accepts(inst.bbox.area()) else bad_flip
                sub = int(rng.integers(0, 2**31))
                _, det = perturb_prediction(inst, PerturbNoise(q), sub, s.scale_id, img.id)
                jitter = float(rng.uniform(-0.05, 0.05))
                out.append(Detection(det.bbox, float(np.clip(det.score + jitter, 0.0, 1.0)), det.category_id,
                                     s.scale_id, det.mask, img.id))
        cats = sorted(dataset.categories)
        for s in cfg.scales:
            for _ in range(false_positives):
                w = int(rng.integers(4, img.width // 2))
                h = int(rng.integers(4, img.height // 2))
                x = int(rng.integers(0, img.width - w + 1))
                y = int(rng.integers(0, img.height - h + 1))
                bits = np.zeros((img.height, img.width), dtype=bool)
                bits[y : y + h, x : x + w] = True
                cat = cats[int(rng.integers(0, len(cats)))]
                out.append(Detection(BBox(float(x), float(y), float(w), float(h)), float(rng.uniform(0.05, 0.4)), cat, s.scale_id,
                                     BinaryMask(bits), img.id))
        return out

    return [d for dets in pmap(one_image, dataset.images, threads) for d in dets]
