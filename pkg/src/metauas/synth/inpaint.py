"""Inpainting backends for object-disappear synthesis.

The contract: ``inpaint(image, mask, image_id=None) -> image`` where pixels
outside the mask are returned bit-identical and pixels inside are filled
plausibly. Backends are pluggable:

* DiffusionInpainter   packaged default (OpenCV Navier-Stokes fill).
* ExternalInpainter    shells out to a user command template.
* PrecomputedInpainter serves pre-rendered fills from a directory by image id.
"""

from __future__ import annotations

import subprocess
import tempfile
from pathlib import Path
from typing import Protocol

import cv2
import numpy as np
from PIL import Image

from ..errors import ConfigError, InpaintError


class Inpainter(Protocol):
    def __call__(self, image: np.ndarray, mask: np.ndarray,
                 image_id: str | None = None) -> np.ndarray: ...


def _composite(image: np.ndarray, fill: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep outside-mask pixels bit-identical regardless of backend behavior."""
    out = image.copy()
    out[mask] = fill[mask]
    return out


class DiffusionInpainter:
    """Naive diffusion-style fill (OpenCV Navier-Stokes inpainting)."""

    def __init__(self, radius: int = 3):
        self.radius = radius

    def __call__(self, image: np.ndarray, mask: np.ndarray,
                 image_id: str | None = None) -> np.ndarray:
        img8 = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
        mask8 = mask.astype(np.uint8) * 255
        filled = cv2.inpaint(img8, mask8, self.radius, cv2.INPAINT_NS)
        return _composite(image, filled.astype(np.float32) / 255.0, mask)


class ExternalInpainter:
    """Adapter for an external program.

    `command` is a template with {image} {mask} {output} placeholders; the
    program must write an RGB PNG of the same size to {output}.
    """

    def __init__(self, command: str):
        if not all(k in command for k in ("{image}", "{mask}", "{output}")):
            raise ConfigError("external inpainter command needs {image} {mask} {output} placeholders")
        self.command = command

    def __call__(self, image: np.ndarray, mask: np.ndarray,
                 image_id: str | None = None) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="inpaint_") as tmp:
            tmp = Path(tmp)
            img_p, mask_p, out_p = tmp / "image.png", tmp / "mask.png", tmp / "output.png"
            Image.fromarray(np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)).save(img_p)
            Image.fromarray(mask.astype(np.uint8) * 255).save(mask_p)
            cmd = self.command.format(image=img_p, mask=mask_p, output=out_p)
            proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
            if proc.returncode != 0 or not out_p.is_file():
                raise InpaintError(f"external inpainter failed (source {image_id}): "
                                   f"rc={proc.returncode} stderr={proc.stderr.strip()[:500]}")
            with Image.open(out_p) as im:
                fill = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        if fill.shape != image.shape:
            raise InpaintError(f"external inpainter returned shape {fill.shape}, "
                               f"expected {image.shape} (source {image_id})")
        return _composite(image, fill, mask)


class PrecomputedInpainter:
    """Serve fills rendered offline: <dir>/<image_id>.png."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise ConfigError(f"precomputed inpaint directory not found: {self.directory}")

    def __call__(self, image: np.ndarray, mask: np.ndarray,
                 image_id: str | None = None) -> np.ndarray:
        if image_id is None:
            raise InpaintError("precomputed inpainter needs the source image id")
        path = self.directory / f"{image_id}.png"
        if not path.is_file():
            raise InpaintError(f"no precomputed fill for source {image_id}: {path}")
        with Image.open(path) as im:
            fill = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        if fill.shape[:2] != image.shape[:2]:
            fill = np.asarray(Image.fromarray(
                np.clip(np.rint(fill * 255.0), 0, 255).astype(np.uint8)).resize(
                    (image.shape[1], image.shape[0]), Image.BILINEAR), dtype=np.float32) / 255.0
        return _composite(image, fill, mask)


def make_inpainter(setting: str) -> Inpainter:
    """Instantiate a backend from a config string.

    "naive" | "external:<command template>" | "precomputed:<directory>".
    """
    if setting == "naive":
        return DiffusionInpainter()
    if setting.startswith("external:"):
        return ExternalInpainter(setting.split(":", 1)[1])
    if setting.startswith("precomputed:"):
        return PrecomputedInpainter(setting.split(":", 1)[1])
    raise ConfigError(f"unknown inpainter setting {setting!r}")
