"""Instance-annotated source corpora.

Two on-disk formats:

* Folder corpus: ``<root>/<image_id>/image.png`` plus one binary PNG per
  instance under ``<root>/<image_id>/masks/``.
* COCO-style corpus: ``<root>/annotations.json`` (polygon segmentations only)
  with images under ``<root>/images/``.

Both yield `SourceRecord`s with float images in [0, 1] and boolean instance
masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..errors import DataError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG/JPEG as float32 RGB in [0, 1]."""
    p = Path(path)
    if p.suffix.lower() not in IMAGE_EXTENSIONS:
        raise DataError(f"unsupported image format (PNG/JPEG only): {p}")
    try:
        with Image.open(p) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise DataError(f"image not found: {p}") from None
    except OSError as exc:
        raise DataError(f"unreadable image {p}: {exc}") from exc
    return arr


def load_mask(path: str | Path, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Read a mask PNG as bool (any nonzero pixel counts as foreground)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except FileNotFoundError:
        raise DataError(f"mask not found: {path}") from None
    except OSError as exc:
        raise DataError(f"unreadable mask {path}: {exc}") from exc
    mask = arr > 0
    if shape is not None and mask.shape != shape:
        raise DataError(f"mask {path} has shape {mask.shape}, expected {shape}")
    return mask


@dataclass
class SourceRecord:
    """One corpus image with its instance masks."""

    image_id: str
    image: np.ndarray                 # H x W x 3 float32 in [0, 1]
    instances: list[np.ndarray]       # each H x W bool, non-empty

    def validate(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"{self.image_id}: image must be H x W x 3, got {self.image.shape}")
        for i, m in enumerate(self.instances):
            if m.shape != self.image.shape[:2]:
                raise DataError(f"{self.image_id}: instance {i} shape {m.shape} "
                                f"does not match image {self.image.shape[:2]}")
            if not m.any():
                raise DataError(f"{self.image_id}: instance {i} is empty")


class FolderCorpus:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DataError(f"corpus root is not a directory: {self.root}")
        self._ids = sorted(p.name for p in self.root.iterdir()
                           if p.is_dir() and any((p / f"image{e}").is_file() for e in IMAGE_EXTENSIONS))
        if not self._ids:
            raise DataError(f"no corpus records under {self.root} "
                            "(expected <root>/<image_id>/image.png + masks/*.png)")

    def ids(self) -> list[str]:
        return list(self._ids)

    def load(self, image_id: str) -> SourceRecord:
        rec_dir = self.root / image_id
        image_path = next((rec_dir / f"image{e}" for e in IMAGE_EXTENSIONS
                           if (rec_dir / f"image{e}").is_file()), None)
        if image_path is None:
            raise DataError(f"missing image file for corpus record {image_id}")
        image = load_image(image_path)
        mask_dir = rec_dir / "masks"
        masks = sorted(mask_dir.glob("*.png")) if mask_dir.is_dir() else []
        if not masks:
            raise DataError(f"corpus record {image_id} has no instance masks")
        instances = [load_mask(m, image.shape[:2]) for m in masks]
        rec = SourceRecord(image_id=image_id, image=image,
                           instances=[m for m in instances if m.any()])
        if not rec.instances:
            raise DataError(f"corpus record {image_id} has only empty instance masks")
        rec.validate()
        return rec


class CocoCorpus:
    """COCO-style instance annotations; polygon segmentations only."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        ann_path = self.root / "annotations.json"
        if not ann_path.is_file():
            raise DataError(f"missing {ann_path}")
        try:
            data = json.loads(ann_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid JSON in {ann_path}: {exc}") from exc
        self._images = {img["id"]: img for img in data.get("images", [])}
        self._anns: dict[int, list[dict]] = {}
        for ann in data.get("annotations", []):
            seg = ann.get("segmentation")
            if not isinstance(seg, list):
                continue          # RLE segmentations are unsupported
            self._anns.setdefault(ann["image_id"], []).append(ann)
        self._ids = sorted(str(i) for i in self._images if self._anns.get(i))
        if not self._ids:
            raise DataError(f"no polygon-annotated images in {ann_path}")

    def ids(self) -> list[str]:
        return list(self._ids)

    def load(self, image_id: str) -> SourceRecord:
        info = self._images[int(image_id)]
        image = load_image(self.root / "images" / info["file_name"])
        h, w = image.shape[:2]
        instances = []
        for ann in self._anns[int(image_id)]:
            mask_im = Image.new("1", (w, h), 0)
            draw = ImageDraw.Draw(mask_im)
            for poly in ann["segmentation"]:
                if len(poly) >= 6:
                    draw.polygon([(poly[i], poly[i + 1]) for i in range(0, len(poly), 2)], fill=1)
            mask = np.asarray(mask_im, dtype=bool)
            if mask.any():
                instances.append(mask)
        if not instances:
            raise DataError(f"corpus record {image_id} rasterized to no usable instances")
        rec = SourceRecord(image_id=str(image_id), image=image, instances=instances)
        rec.validate()
        return rec


def open_corpus(root: str | Path):
    """Pick the corpus format by layout: annotations.json -> COCO, else folders."""
    root = Path(root)
    if (root / "annotations.json").is_file():
        return CocoCorpus(root)
    return FolderCorpus(root)
