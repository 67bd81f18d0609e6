"""Core change-pair synthesis operations.

All operations work at the final pair resolution and guarantee:

* pixels outside the change mask Y are bit-identical between prompt and query
  (before any paired augmentation), and
* Y is exactly the synthesized change footprint, and
* emitted masks are nondegenerate (0 < foreground < max_fg_fraction * H * W),
  and the pair shows a visible change after 8-bit quantization.

Pairs violating these raise DegeneratePairError and are never emitted.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from ..config import AugmentConfig, SynthConfig
from ..errors import ConfigError, DegeneratePairError, InpaintError
from .corpus import SourceRecord
from .perlin import perlin_mask

CHANGE_TYPES = ("local", "disappear", "appear", "exchange")


@dataclass
class ChangePair:
    prompt: np.ndarray                  # H x W x 3 float32 in [0, 1]
    query: np.ndarray                   # H x W x 3 float32 in [0, 1]
    mask: np.ndarray                    # H x W bool, the change footprint Y
    change_type: str
    provenance: dict = field(default_factory=dict)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def _visible_change(a: np.ndarray, b: np.ndarray) -> bool:
    """True when the pair differs somewhere after 8-bit quantization."""
    return bool(np.any(to_uint8(a) != to_uint8(b)))


def _check_mask(mask: np.ndarray, max_fg_fraction: float) -> bool:
    fg = int(np.count_nonzero(mask))
    return 0 < fg < max_fg_fraction * mask.size


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[:2] == (size, size):
        return image.astype(np.float32, copy=False)
    return cv2.resize(image, (size, size), interpolation=cv2.INTER_LINEAR).astype(np.float32)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask
    return cv2.resize(mask.astype(np.uint8), (size, size),
                      interpolation=cv2.INTER_NEAREST).astype(bool)


def resize_record(record: SourceRecord, size: int) -> SourceRecord:
    """Resize to the pair resolution; instances that vanish are dropped."""
    image = resize_image(record.image, size)
    instances = [m for m in (resize_mask(i, size) for i in record.instances) if m.any()]
    return SourceRecord(image_id=record.image_id, image=image, instances=instances)


# ---------------------------------------------------------------------------
# Change synthesis
# ---------------------------------------------------------------------------


def synth_local_change(base: np.ndarray, donor: np.ndarray, cfg: SynthConfig,
                       rng: np.random.Generator) -> ChangePair:
    """Blend donor pixels into the base image inside a random Perlin blob.

    query = blend * donor + (1 - blend) * base inside the mask; elsewhere the
    base is copied untouched. blend is drawn from cfg.blend_range (0 excluded),
    so blend = 1.0 pastes donor pixels exactly.
    """
    if base.shape != donor.shape:
        raise ConfigError(f"base and donor dims differ: {base.shape} vs {donor.shape}")
    h, w = base.shape[:2]
    for _ in range(cfg.max_retries):
        mask = perlin_mask(h, w, cfg, rng)
        if not _check_mask(mask, cfg.max_fg_fraction):
            continue
        blend = float(rng.uniform(*cfg.blend_range))
        query = base.copy()
        query[mask] = blend * donor[mask] + (1.0 - blend) * base[mask]
        if not _visible_change(base, query):
            continue
        return ChangePair(prompt=base, query=query, mask=mask, change_type="local",
                          provenance={"blend": blend})
    raise DegeneratePairError(f"no nondegenerate local change after {cfg.max_retries} attempts")


def synth_object_disappear(record: SourceRecord, inpainter, cfg: SynthConfig,
                           rng: np.random.Generator) -> ChangePair:
    """Remove a random nonempty subset of instances by inpainting.

    Y is the union of the removed instance masks; the query equals the prompt
    bit-for-bit outside Y. Inpainter failures propagate with the source id.
    """
    n = len(record.instances)
    if n == 0:
        raise DegeneratePairError(f"{record.image_id}: no instances to remove")
    for _ in range(cfg.max_retries):
        count = int(rng.integers(1, n + 1))
        chosen = rng.choice(n, size=count, replace=False)
        union = np.zeros(record.image.shape[:2], dtype=bool)
        for idx in chosen:
            union |= record.instances[int(idx)]
        if not _check_mask(union, cfg.max_fg_fraction):
            continue
        try:
            query = inpainter(record.image, union, image_id=record.image_id)
        except InpaintError:
            raise
        except Exception as exc:
            raise InpaintError(f"inpainter failed on source {record.image_id}: {exc}") from exc
        query = query.astype(np.float32, copy=False)
        if not _visible_change(record.image, query):
            continue        # fill reproduced the objects; nothing disappeared
        return ChangePair(prompt=record.image, query=query, mask=union, change_type="disappear",
                          provenance={"removed": sorted(int(i) for i in chosen)})
    raise DegeneratePairError(
        f"{record.image_id}: no visible disappear change after {cfg.max_retries} attempts")


def swap_to_appear(pair: ChangePair) -> ChangePair:
    """A disappear pair viewed backwards: objects appear in the query."""
    return replace(pair, prompt=pair.query, query=pair.prompt, change_type="appear")


def _extract_patch(record: SourceRecord, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Crop one random instance to its bounding box."""
    idx = int(rng.integers(0, len(record.instances)))
    inst = record.instances[idx]
    ys, xs = np.nonzero(inst)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    return record.image[y0:y1, x0:x1].copy(), inst[y0:y1, x0:x1].copy()


def synth_object_paste(base: np.ndarray, donors: list[SourceRecord], cfg: SynthConfig,
                       rng: np.random.Generator) -> ChangePair:
    """Paste 1..k donor object patches onto the base image (exchange change).

    The paste count is drawn from cfg.paste_count_range; each patch is rescaled
    by a factor in 1 +- cfg.paste_scale_jitter (clamped to fit the frame) and
    placed uniformly at random fully inside the frame. Y is the union of the
    pasted footprints.
    """
    donors = [d for d in donors if d.instances]
    if not donors:
        raise ConfigError("paste needs at least one donor record with instances")
    h, w = base.shape[:2]
    count = int(rng.integers(cfg.paste_count_range[0], cfg.paste_count_range[1] + 1))
    query = base.copy()
    footprint = np.zeros((h, w), dtype=bool)
    donor_ids = []
    pasted = 0
    for _ in range(count):
        donor = donors[int(rng.integers(0, len(donors)))]
        patch, pmask = _extract_patch(donor, rng)
        scale = float(rng.uniform(1.0 - cfg.paste_scale_jitter, 1.0 + cfg.paste_scale_jitter))
        ph = max(1, min(h, int(round(patch.shape[0] * scale))))
        pw = max(1, min(w, int(round(patch.shape[1] * scale))))
        if (ph, pw) != patch.shape[:2]:
            patch = cv2.resize(patch, (pw, ph), interpolation=cv2.INTER_LINEAR)
            pmask = cv2.resize(pmask.astype(np.uint8), (pw, ph),
                               interpolation=cv2.INTER_NEAREST).astype(bool)
        if not pmask.any():
            continue
        top = int(rng.integers(0, h - ph + 1))
        left = int(rng.integers(0, w - pw + 1))
        region = (slice(top, top + ph), slice(left, left + pw))
        query[region][pmask] = patch[pmask]
        footprint[region] |= pmask
        donor_ids.append(donor.image_id)
        pasted += 1
    if pasted == 0 or not _check_mask(footprint, cfg.max_fg_fraction):
        raise DegeneratePairError("paste produced no usable footprint")
    if not _visible_change(base, query):
        raise DegeneratePairError("pasted patches are indistinguishable from the base image")
    return ChangePair(prompt=base, query=query, mask=footprint, change_type="exchange",
                      provenance={"donor_ids": donor_ids})


# ---------------------------------------------------------------------------
# Paired augmentation
# ---------------------------------------------------------------------------


def _affine_warp(arr: np.ndarray, angle: float, scale: float, tx: int, ty: int,
                 nearest: bool) -> np.ndarray:
    if angle == 0.0 and scale == 1.0 and tx == 0 and ty == 0:
        return arr.copy()
    h, w = arr.shape[:2]
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, scale)
    m[0, 2] += tx
    m[1, 2] += ty
    if nearest:
        return cv2.warpAffine(arr, m, (w, h), flags=cv2.INTER_NEAREST,
                              borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return cv2.warpAffine(arr, m, (w, h), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_REFLECT)


def _draw_geometry(cfg: AugmentConfig, rng: np.random.Generator) -> tuple[float, float, int, int]:
    angle = float(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg))
    scale = float(rng.uniform(*cfg.scale_range))
    tx = int(rng.integers(-cfg.translate_px, cfg.translate_px + 1))
    ty = int(rng.integers(-cfg.translate_px, cfg.translate_px + 1))
    return angle, scale, tx, ty


def _color_jitter(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Brightness/contrast/saturation jitter; factors of exactly 1 are no-ops."""
    out = image
    b = float(rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness))
    c = float(rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast))
    s = float(rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation))
    if b != 1.0:
        out = out * b
    if c != 1.0:
        mean = out.mean()
        out = (out - mean) * c + mean
    if s != 1.0:
        gray = out @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        out = gray[..., None] * (1.0 - s) + out * s
    if out is image:
        return image
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_pair(pair: ChangePair, cfg: AugmentConfig, rng: np.random.Generator,
                 max_attempts: int = 5) -> ChangePair:
    """Jitter a pair: independent geometric transforms for prompt and query,
    mask warped with the query transform (nearest-neighbor, stays binary),
    independent color jitter per image.

    A query transform that pushes more than half of the mask out of frame is
    resampled; after max_attempts the identity transform is used instead.
    """
    if not cfg.enabled:
        return pair
    p_geom = _draw_geometry(cfg, rng)
    prompt = _affine_warp(pair.prompt, *p_geom, nearest=False)

    mask_area = int(pair.mask.sum())
    q_geom = (0.0, 1.0, 0, 0)
    query, mask = pair.query.copy(), pair.mask.copy()
    for _ in range(max_attempts):
        cand = _draw_geometry(cfg, rng)
        cand_mask = _affine_warp(pair.mask.astype(np.uint8), *cand, nearest=True).astype(bool)
        if cand_mask.sum() * 2 >= mask_area:
            q_geom = cand
            query = _affine_warp(pair.query, *cand, nearest=False)
            mask = cand_mask
            break
    prompt = _color_jitter(prompt, cfg, rng)
    query = _color_jitter(query, cfg, rng)
    return replace(pair, prompt=prompt, query=query, mask=mask)
