"""Procedural toy data: an instance-annotated corpus and a small anomaly
dataset tree, both deterministic in the seed. Used by the demo CLI command and
by the test/acceptance suites (no external downloads needed)."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
from PIL import Image


def _textured_background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Color field with oriented stripes and speckle. Patches need enough
    local structure to be tellable apart, or prompt/query comparison (and
    the feature alignment it rides on) has nothing to anchor to."""
    cells = int(rng.integers(6, 13))
    coarse = rng.uniform(0.15, 0.85, (cells, cells, 3)).astype(np.float32)
    bg = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    theta = rng.uniform(0, np.pi)
    wave = rng.uniform(6.0, 16.0)
    stripes = np.sin((np.cos(theta) * xx + np.sin(theta) * yy) * (2 * np.pi / wave)
                     + rng.uniform(0, 2 * np.pi))
    bg += (0.06 * stripes)[..., None] * rng.uniform(0.3, 1.0, 3).astype(np.float32)
    bg += rng.normal(0.0, 0.02, bg.shape).astype(np.float32)
    return np.clip(bg, 0.0, 1.0)


def _draw_shape(canvas: np.ndarray, rng: np.random.Generator) -> np.ndarray | None:
    """Paint one random solid shape; returns its mask or None if degenerate."""
    size = canvas.shape[0]
    mask = np.zeros((size, size), dtype=np.uint8)
    color = rng.uniform(0.0, 1.0, 3).astype(np.float32)
    kind = rng.integers(0, 3)
    cx, cy = rng.integers(size // 5, size - size // 5, 2)
    r1, r2 = rng.integers(size // 10, size // 4, 2)
    if kind == 0:
        cv2.ellipse(mask, (int(cx), int(cy)), (int(r1), int(r2)),
                    float(rng.uniform(0, 180)), 0, 360, 1, -1)
    elif kind == 1:
        cv2.rectangle(mask, (int(cx - r1), int(cy - r2)), (int(cx + r1), int(cy + r2)), 1, -1)
    else:
        pts = np.stack([cx + rng.integers(-r1, r1 + 1, 3),
                        cy + rng.integers(-r2, r2 + 1, 3)], axis=1).astype(np.int32)
        cv2.fillPoly(mask, [pts], 1)
    m = mask.astype(bool)
    if m.sum() < (size // 16) ** 2:
        return None
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    grad = (xx - cx) * rng.uniform(-1, 1) + (yy - cy) * rng.uniform(-1, 1)
    grad /= np.abs(grad[m]).max() + 1e-6
    fill = (np.clip(color * rng.uniform(0.85, 1.0), 0, 1)[None, None, :]
            + grad[..., None] * 0.15
            + rng.normal(0.0, 0.03, canvas.shape).astype(np.float32))
    canvas[m] = np.clip(fill, 0, 1)[m]
    return m


def generate_toy_corpus(out_dir: str | Path, n_images: int = 60, size: int = 96,
                        seed: int = 0) -> Path:
    """Instance-annotated folder corpus: colored shapes on textured backgrounds."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    for i in range(n_images):
        canvas = _textured_background(size, rng)
        instances = []
        for _ in range(int(rng.integers(2, 6))):
            m = _draw_shape(canvas, rng)
            if m is not None:
                instances.append(m)
        if not instances:        # extremely unlikely; reroll deterministically
            instances.append(_draw_shape(canvas, rng) or np.ones((size, size), bool))
        rec_dir = out_dir / f"img_{i:04d}"
        (rec_dir / "masks").mkdir(parents=True, exist_ok=True)
        Image.fromarray((canvas * 255).round().astype(np.uint8)).save(rec_dir / "image.png")
        for k, m in enumerate(instances):
            Image.fromarray(m.astype(np.uint8) * 255).save(rec_dir / "masks" / f"{k:02d}.png")
    return out_dir


def _class_pattern(class_idx: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """A distinctive quasi-regular texture per class, with slight per-image noise."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    phase = rng.uniform(0, 2 * np.pi)
    if class_idx % 2 == 0:
        base = 0.5 + 0.25 * np.sin(xx / 6.0 + phase) * np.sin(yy / 6.0 + phase)
    else:
        base = 0.5 + 0.25 * np.sin((xx + yy) / 8.0 + phase)
    img = np.stack([base * 0.9, base, base * 1.1], axis=-1)
    img += rng.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_toy_anomaly_dataset(root: str | Path, classes: tuple[str, ...] = ("widget", "gadget"),
                                 n_train: int = 6, n_test_good: int = 4, n_test_defect: int = 4,
                                 size: int = 64, seed: int = 0) -> Path:
    """Small dataset tree in the standard layout:

    <root>/<class>/train/good/*.png
    <root>/<class>/test/{good,<defect>}/*.png
    <root>/<class>/ground_truth/<defect>/<stem>_mask.png
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    for ci, cls in enumerate(classes):
        for j in range(n_train):
            img = _class_pattern(ci, size, rng)
            p = root / cls / "train" / "good" / f"{j:03d}.png"
            p.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray((img * 255).round().astype(np.uint8)).save(p)
        for j in range(n_test_good):
            img = _class_pattern(ci, size, rng)
            p = root / cls / "test" / "good" / f"{j:03d}.png"
            p.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray((img * 255).round().astype(np.uint8)).save(p)
        for j in range(n_test_defect):
            img = _class_pattern(ci, size, rng)
            mask = np.zeros((size, size), dtype=np.uint8)
            cx, cy = rng.integers(size // 4, 3 * size // 4, 2)
            ax, ay = rng.integers(size // 12, size // 5, 2)
            cv2.ellipse(mask, (int(cx), int(cy)), (int(ax), int(ay)),
                        float(rng.uniform(0, 180)), 0, 360, 1, -1)
            color = rng.uniform(0.0, 1.0, 3).astype(np.float32)
            img[mask.astype(bool)] = color
            ip = root / cls / "test" / "scratch" / f"{j:03d}.png"
            mp = root / cls / "ground_truth" / "scratch" / f"{j:03d}_mask.png"
            ip.parent.mkdir(parents=True, exist_ok=True)
            mp.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray((img * 255).round().astype(np.uint8)).save(ip)
            Image.fromarray(mask * 255).save(mp)
    return root
