"""In-memory dataset and its JSON form.

Schema::

    {"images":      [{"id", "height", "width"}],
     "annotations": [{"id", "image_id", "category_id", "bbox": [x, y, w, h], "rle": [...]}],
     "categories":  [{"id", "name"}]}

``rle`` is the row-major run-length form produced by :func:`thinmask.core.encode_rle`.
Masks live in the image frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .core import BBox, Instance, decode_rle, encode_rle


@dataclass
class Annotation:
    id: int
    image_id: int
    instance: Instance

    @property
    def category_id(self) -> int:
        return self.instance.category_id


@dataclass
class ImageRecord:
    id: int
    height: int
    width: int
    annotations: list[Annotation] = field(default_factory=list)

    @property
    def instances(self) -> list[Instance]:
        return [a.instance for a in self.annotations]

    def category_ids(self) -> set[int]:
        return {a.category_id for a in self.annotations}


@dataclass
class Dataset:
    images: list[ImageRecord]
    categories: dict[int, str]

    def __len__(self) -> int:
        return len(self.images)

    def annotations(self) -> Iterator[Annotation]:
        for img in self.images:
            yield from img.annotations

    def instances(self) -> list[Instance]:
        return [a.instance for a in self.annotations()]

    def image(self, image_id: int) -> ImageRecord:
        for img in self.images:
            if img.id == image_id:
                return img
        raise KeyError(image_id)

    def to_json_dict(self) -> dict:
        return {
            "images": [{"id": im.id, "height": im.height, "width": im.width} for im in self.images],
            "annotations": [
                {
                    "id": ann.id,
                    "image_id": ann.image_id,
                    "category_id": ann.category_id,
                    "bbox": ann.instance.bbox.to_list(),
                    "rle": encode_rle(ann.instance.mask),
                }
                for ann in self.annotations()
            ],
            "categories": [{"id": cid, "name": name} for cid, name in sorted(self.categories.items())],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "Dataset":
        images = {}
        for im in data["images"]:
            rec = ImageRecord(int(im["id"]), int(im["height"]), int(im["width"]))
            if rec.id in images:
                raise ValueError(f"duplicate image id {rec.id}")
            images[rec.id] = rec
        for ann in data.get("annotations", []):
            image_id = int(ann["image_id"])
            if image_id not in images:
                raise ValueError(f"annotation {ann['id']} references unknown image {image_id}")
            mask = decode_rle(ann["rle"])
            img = images[image_id]
            if mask.shape != (img.height, img.width):
                raise ValueError(f"annotation {ann['id']} mask shape {mask.shape} does not match its image")
            inst = Instance(int(ann["category_id"]), BBox.from_list(ann["bbox"]), mask)
            img.annotations.append(Annotation(int(ann["id"]), image_id, inst))
        categories = {int(c["id"]): str(c.get("name", c["id"])) for c in data.get("categories", [])}
        for img in images.values():
            for a in img.annotations:
                categories.setdefault(a.category_id, str(a.category_id))
        return cls(list(images.values()), categories)


def dumps_json(obj) -> str:
    """Stable, compact JSON used for every artifact so reruns are byte-identical."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps_json(dataset.to_json_dict()))


def load_dataset(path: str | Path) -> Dataset:
    with open(path) as fh:
        return Dataset.from_json_dict(json.load(fh))
