"""Dataset construction: pair planning, generation, on-disk layout, manifest.

Layout:
    <out>/train/<pair_id>/{prompt.png,query.png,mask.png}
    <out>/val/<pair_id>/...
    <out>/manifest.json

Determinism: the source split, each pair's base image and its private RNG are
all fixed by (corpus ids, config, seed) alone, so reruns and any worker count
produce byte-identical outputs. Masks are 8-bit {0, 255}; images are 8-bit RGB.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from ..config import SynthConfig
from ..errors import DataError, DegeneratePairError
from .changes import (ChangePair, resize_record, swap_to_appear, synth_local_change,
                      synth_object_disappear, synth_object_paste, augment_pair, to_uint8)
from .inpaint import make_inpainter

log = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1


def pair_rng_seed(global_seed: int, key: str) -> int:
    """Stable per-pair seed: independent of worker count and platform."""
    digest = hashlib.blake2s(f"{global_seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def split_sources(ids: list[str], cfg: SynthConfig) -> tuple[list[str], list[str]]:
    """Shuffle source ids and split train/val by cfg.split_ratio (disjoint)."""
    if len(ids) < 2:
        raise DataError("need at least 2 source images to form disjoint train/val splits")
    rng = np.random.default_rng(pair_rng_seed(cfg.seed, "split"))
    perm = [ids[i] for i in rng.permutation(len(ids))]
    n_train = int(np.clip(round(cfg.split_ratio * len(ids)), 1, len(ids) - 1))
    return sorted(perm[:n_train]), sorted(perm[n_train:])


class _RecordCache:
    """Load-and-resize cache; each worker process keeps its own."""

    def __init__(self, corpus, size: int):
        self.corpus = corpus
        self.size = size
        self._cache: dict[str, object] = {}

    def get(self, image_id: str):
        if image_id not in self._cache:
            self._cache[image_id] = resize_record(self.corpus.load(image_id), self.size)
        return self._cache[image_id]


def generate_pair(cache: _RecordCache, split_ids: list[str], base_id: str,
                  cfg: SynthConfig, inpainter, seed: int) -> ChangePair | None:
    """Synthesize one pair rooted at base_id. Returns None when every retry
    degenerates (the pair is skipped with a warning, never emitted)."""
    rng = np.random.default_rng(seed)
    base = cache.get(base_id)
    others = [i for i in split_ids if i != base_id]
    for _ in range(cfg.max_retries):
        try:
            take_local = rng.random() < cfg.p_local and bool(others)
            if take_local:
                donor = cache.get(others[int(rng.integers(0, len(others)))])
                pair = synth_local_change(base.image, donor.image, cfg, rng)
                pair.provenance["donor_ids"] = [donor.image_id]
            elif rng.random() < cfg.p_paste_within_object and others:
                donors = [cache.get(others[int(rng.integers(0, len(others)))])
                          for _ in range(cfg.paste_count_range[1])]
                pair = synth_object_paste(base.image, donors, cfg, rng)
            else:
                pair = synth_object_disappear(base, inpainter, cfg, rng)
                if rng.random() < 0.5:
                    pair = swap_to_appear(pair)
            pair.provenance["base_id"] = base_id
            pair.provenance["seed"] = seed
            if cfg.augment.enabled:
                pair = augment_pair(pair, cfg.augment, rng)
            return pair
        except DegeneratePairError as exc:
            last = exc
            continue
    log.warning("skipping pair for base %s: %s", base_id, last)
    return None


def _write_pair(pair_dir: Path, pair: ChangePair) -> None:
    pair_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pair.prompt)).save(pair_dir / "prompt.png")
    Image.fromarray(to_uint8(pair.query)).save(pair_dir / "query.png")
    Image.fromarray(pair.mask.astype(np.uint8) * 255).save(pair_dir / "mask.png")


def _run_plan(args) -> dict | None:
    corpus_root, cfg, out_dir, plan_chunk = args
    from .corpus import open_corpus
    corpus = open_corpus(corpus_root)
    cache = _RecordCache(corpus, cfg.pair_size)
    inpainter = make_inpainter(cfg.inpainter)
    records = []
    for pair_id, split, base_id, split_ids in plan_chunk:
        seed = pair_rng_seed(cfg.seed, pair_id)
        pair = generate_pair(cache, split_ids, base_id, cfg, inpainter, seed)
        if pair is None:
            records.append(None)
            continue
        _write_pair(Path(out_dir) / split / pair_id, pair)
        records.append({
            "pair_id": pair_id,
            "split": split,
            "change_type": pair.change_type,
            "base_id": pair.provenance.get("base_id", base_id),
            "donor_ids": pair.provenance.get("donor_ids", []),
            "seed": seed,
            "files": {name: f"{split}/{pair_id}/{name}.png" for name in ("prompt", "query", "mask")},
        })
    return records


def build_dataset(corpus_root: str | Path, out_dir: str | Path, cfg: SynthConfig,
                  workers: int = 1) -> dict:
    """Synthesize the full train/val pair dataset and write its manifest."""
    cfg.validate()
    from .corpus import open_corpus
    corpus = open_corpus(corpus_root)
    train_ids, val_ids = split_sources(corpus.ids(), cfg)

    plan = []
    for split, ids, count in (("train", train_ids, cfg.train_pairs),
                              ("val", val_ids, cfg.val_pairs)):
        for i in range(count):
            pair_id = f"{split}_{i:06d}"
            plan.append((pair_id, split, ids[i % len(ids)], ids))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if workers <= 1:
        chunks = [_run_plan((str(corpus_root), cfg, str(out_dir), plan))]
    else:
        per = max(1, (len(plan) + workers - 1) // workers)
        parts = [plan[i:i + per] for i in range(0, len(plan), per)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_plan,
                                   [(str(corpus_root), cfg, str(out_dir), p) for p in parts]))

    pairs = sorted((r for c in chunks for r in c if r is not None), key=lambda r: r["pair_id"])
    counts: dict[str, dict[str, int]] = {"train": {}, "val": {}}
    for r in pairs:
        counts[r["split"]][r["change_type"]] = counts[r["split"]].get(r["change_type"], 0) + 1
    from dataclasses import asdict
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "global_seed": cfg.seed,
        "config": json.loads(json.dumps(asdict(cfg))),
        "splits": {"train": train_ids, "val": val_ids},
        "counts": counts,
        "pairs": pairs,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def iter_pairs(corpus_root: str | Path, cfg: SynthConfig, split: str = "train",
               count: int | None = None):
    """Generate pairs in memory (no disk writes); same plan as build_dataset."""
    from .corpus import open_corpus
    corpus = open_corpus(corpus_root)
    train_ids, val_ids = split_sources(corpus.ids(), cfg)
    ids = train_ids if split == "train" else val_ids
    n = count if count is not None else (cfg.train_pairs if split == "train" else cfg.val_pairs)
    cache = _RecordCache(corpus, cfg.pair_size)
    inpainter = make_inpainter(cfg.inpainter)
    for i in range(n):
        pair_id = f"{split}_{i:06d}"
        seed = pair_rng_seed(cfg.seed, pair_id)
        pair = generate_pair(cache, ids, ids[i % len(ids)], cfg, inpainter, seed)
        if pair is not None:
            yield pair_id, pair


def load_manifest(out_dir: str | Path) -> dict:
    path = Path(out_dir) / "manifest.json"
    if not path.is_file():
        raise DataError(f"missing dataset manifest: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid manifest {path}: {exc}") from exc
    if "pairs" not in manifest:
        raise DataError(f"manifest {path} has no pair records")
    return manifest


def load_pair(out_dir: str | Path, record: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read one pair back as (prompt, query, mask): float32 images, bool mask."""
    out_dir = Path(out_dir)
    arrays = []
    for name in ("prompt", "query"):
        with Image.open(out_dir / record["files"][name]) as im:
            arrays.append(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
    with Image.open(out_dir / record["files"]["mask"]) as im:
        mask = np.asarray(im.convert("L")) > 0
    return arrays[0], arrays[1], mask
