"""One-prompt inference: prompt pools, prompt selection policies, prediction.

Policies:

* fixed-random  one seeded prompt per class, reused for every query of that
                class (the plain one-prompt protocol);
* pool-match    route each query to the most similar pool prompt by global
                embedding (class-agnostic);
* best-match    per query, pick the most similar image from the class's
                normal set (embeddings cached and reused).

Anomaly maps are emitted at the model input resolution; the image-level score
is the maximum pixel probability (no post-processing).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
from PIL import Image

from .encoder import EmbeddingVector, embed_global
from .errors import ConfigError, DataError
from .segnet import ChangeSegmenter


def _to_model_input(image: np.ndarray, size: int) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigError(f"expected an H x W x 3 image, got shape {image.shape}")
    if image.shape[:2] != (size, size):
        image = cv2.resize(image, (size, size), interpolation=cv2.INTER_LINEAR)
    return image.astype(np.float32, copy=False)


def _batch_tensor(images: list[np.ndarray], size: int) -> torch.Tensor:
    arr = np.stack([_to_model_input(im, size) for im in images])
    return torch.from_numpy(arr.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# Embeddings and caching
# ---------------------------------------------------------------------------


def _image_key(image: np.ndarray) -> str:
    data = np.ascontiguousarray(np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8))
    return hashlib.blake2s(data.tobytes() + str(data.shape).encode()).hexdigest()


def _model_fingerprint(model: ChangeSegmenter) -> str:
    c = model.cfg
    return f"{c.arch}|{c.weights}|{c.encoder_seed}|{c.input_size}"


class EmbeddingCache:
    """Content-addressed cache of normal-image embeddings.

    In-memory by default; set cache_dir (or METAUAS_CACHE_DIR) to persist
    across processes.
    """

    def __init__(self, cache_dir: str | Path | None = None):
        env = os.environ.get("METAUAS_CACHE_DIR")
        self.cache_dir = Path(cache_dir or env) if (cache_dir or env) else None
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._mem: dict[str, EmbeddingVector] = {}
        self.hits = 0
        self.misses = 0

    def get(self, key: str) -> EmbeddingVector | None:
        if key in self._mem:
            self.hits += 1
            return self._mem[key]
        if self.cache_dir is not None:
            path = self.cache_dir / f"{key}.npy"
            if path.is_file():
                vec = EmbeddingVector.from_array(np.load(path))
                self._mem[key] = vec
                self.hits += 1
                return vec
        self.misses += 1
        return None

    def put(self, key: str, vec: EmbeddingVector) -> None:
        self._mem[key] = vec
        if self.cache_dir is not None:
            np.save(self.cache_dir / f"{key}.npy", vec.values)


DEFAULT_EMBEDDING_CACHE = EmbeddingCache()


@torch.no_grad()
def embed_image(model: ChangeSegmenter, image: np.ndarray,
                cache: EmbeddingCache | None = None) -> EmbeddingVector:
    """Global embedding (GAP of the deepest encoder stage) with caching."""
    key = None
    if cache is not None:
        key = f"{_model_fingerprint(model)}:{_image_key(image)}"
        hit = cache.get(key)
        if hit is not None:
            return hit
    batch = _batch_tensor([image], model.cfg.input_size)
    stage5 = model.extract(batch)[-1]
    vec = embed_global(stage5)
    if cache is not None and key is not None:
        cache.put(key, vec)
    return vec


# ---------------------------------------------------------------------------
# Prompt pool
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptEntry:
    class_id: str
    prompt_id: str
    image: np.ndarray
    embedding: EmbeddingVector


@dataclass(frozen=True)
class PromptPool:
    """Immutable one-prompt-per-class pool."""

    entries: tuple[PromptEntry, ...]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.class_id in seen:
                raise ConfigError(f"duplicate class id in prompt pool: {e.class_id!r}")
            seen.add(e.class_id)

    def classes(self) -> tuple[str, ...]:
        return tuple(e.class_id for e in self.entries)

    def get(self, class_id: str) -> PromptEntry:
        for e in self.entries:
            if e.class_id == class_id:
                return e
        raise DataError(f"no prompt for class {class_id!r} in pool")


def build_prompt_pool(model: ChangeSegmenter, items: list[tuple[str, str, np.ndarray]],
                      cache: EmbeddingCache | None = None) -> PromptPool:
    """items: (class_id, prompt_id, image). One entry per class, sorted."""
    entries = []
    for class_id, prompt_id, image in sorted(items, key=lambda it: it[0]):
        entries.append(PromptEntry(class_id=class_id, prompt_id=prompt_id, image=image,
                                   embedding=embed_image(model, image, cache)))
    return PromptPool(entries=tuple(entries))


def match_prompt(model: ChangeSegmenter, query_image: np.ndarray, pool: PromptPool,
                 cache: EmbeddingCache | None = None) -> str:
    """Class id of the pool entry most cosine-similar to the query embedding.

    Ties resolve to the smallest class id (entries are kept sorted); zero-norm
    embeddings score -1 on every comparison.
    """
    if not pool.entries:
        raise ConfigError("prompt pool is empty")
    q = embed_image(model, query_image, cache)
    best_id, best_sim = None, -np.inf
    for e in pool.entries:
        sim = q.cosine(e.embedding)
        if sim > best_sim:
            best_id, best_sim = e.class_id, sim
    return best_id


def select_best_prompt(model: ChangeSegmenter, query_image: np.ndarray,
                       normals: list[tuple[str, np.ndarray]],
                       cache: EmbeddingCache | None = None) -> tuple[int, str]:
    """Most similar normal image to the query (the starred protocol).

    normals: (prompt_id, image) candidates. Returns (index, prompt_id); ties
    resolve to the smallest index. Normal-set embeddings go through `cache`
    (default: a process-wide cache), so repeated queries reuse them.
    """
    if not normals:
        raise ConfigError("best-match needs a non-empty normal set")
    cache = cache if cache is not None else DEFAULT_EMBEDDING_CACHE
    q = embed_image(model, query_image, cache)
    best_idx, best_sim = 0, -np.inf
    for i, (_, image) in enumerate(normals):
        sim = q.cosine(embed_image(model, image, cache))
        if sim > best_sim:
            best_idx, best_sim = i, sim
    return best_idx, normals[best_idx][0]


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


@dataclass
class AnomalyMap:
    """Per-pixel change probabilities plus the image-level score (their max)."""

    values: np.ndarray
    image_score: float
    query_id: str = ""
    prompt_id: str = ""
    meta: dict = field(default_factory=dict)

    @staticmethod
    def from_values(values: np.ndarray, query_id: str = "", prompt_id: str = "",
                    **meta) -> "AnomalyMap":
        values = np.asarray(values, dtype=np.float32)
        return AnomalyMap(values=values, image_score=float(values.max()),
                          query_id=query_id, prompt_id=prompt_id, meta=dict(meta))


@torch.no_grad()
def predict(model: ChangeSegmenter, query_image: np.ndarray, prompt_image: np.ndarray,
            query_id: str = "", prompt_id: str = "") -> AnomalyMap:
    """One query against one normal prompt; both are resized to the model
    input size and the map is returned at that resolution."""
    model.eval()
    size = model.cfg.input_size
    probs = model(_batch_tensor([query_image], size), _batch_tensor([prompt_image], size))
    return AnomalyMap.from_values(probs[0].cpu().numpy(), query_id=query_id, prompt_id=prompt_id)


@dataclass
class QueryItem:
    query_id: str
    class_id: str
    image: np.ndarray


@torch.no_grad()
def predict_batch(model: ChangeSegmenter, queries: list[QueryItem],
                  normals: dict[str, list[tuple[str, np.ndarray]]],
                  policy: str = "fixed-random", seed: int = 0, batch_size: int = 8,
                  cache: EmbeddingCache | None = None) -> list[AnomalyMap]:
    """Predict maps for a set of class-labeled queries under a prompt policy.

    normals maps class_id -> [(prompt_id, image), ...]. fixed-random draws one
    prompt per class from its normal set (seeded) and reuses it for all of the
    class's queries; pool-match builds a pool from those same draws and routes
    each query by embedding similarity; best-match searches the query's own
    class normal set per query.
    """
    if policy not in ("fixed-random", "pool-match", "best-match"):
        raise ConfigError(f"unknown prompt policy {policy!r}")
    model.eval()
    cache = cache if cache is not None else DEFAULT_EMBEDDING_CACHE
    rng = np.random.default_rng(seed)
    chosen: dict[str, tuple[str, np.ndarray]] = {}
    for class_id in sorted(normals):
        pool_items = normals[class_id]
        if not pool_items:
            raise DataError(f"class {class_id!r} has an empty normal set")
        chosen[class_id] = pool_items[int(rng.integers(0, len(pool_items)))]

    # resolve each query's prompt
    assignments: list[tuple[QueryItem, str, np.ndarray]] = []
    pool = None
    if policy == "pool-match":
        pool = build_prompt_pool(
            model, [(cid, pid, img) for cid, (pid, img) in chosen.items()], cache)
    for q in queries:
        if policy == "fixed-random":
            if q.class_id not in chosen:
                raise DataError(f"query {q.query_id!r} has unknown class {q.class_id!r}")
            pid, img = chosen[q.class_id]
        elif policy == "pool-match":
            routed = match_prompt(model, q.image, pool, cache)
            entry = pool.get(routed)
            pid, img = entry.prompt_id, entry.image
        else:
            if q.class_id not in normals:
                raise DataError(f"query {q.query_id!r} has unknown class {q.class_id!r}")
            idx, pid = select_best_prompt(model, q.image, normals[q.class_id], cache)
            img = normals[q.class_id][idx][1]
        assignments.append((q, pid, img))

    # batch queries that share a prompt so each prompt pyramid is computed once
    by_prompt: dict[int, list[tuple[QueryItem, np.ndarray]]] = {}
    prompt_of: dict[int, tuple[str, np.ndarray]] = {}
    for q, pid, img in assignments:
        by_prompt.setdefault(id(img), []).append((q, img))
        prompt_of[id(img)] = (pid, img)
    size = model.cfg.input_size
    results: dict[str, AnomalyMap] = {}
    for key, group in by_prompt.items():
        pid, prompt_img = prompt_of[key]
        p_feats = model.extract(_batch_tensor([prompt_img], size))
        for i in range(0, len(group), batch_size):
            chunk = [g[0] for g in group[i:i + batch_size]]
            q_feats = model.extract(_batch_tensor([c.image for c in chunk], size))
            p_exp = [f.expand(len(chunk), -1, -1, -1) for f in p_feats]
            probs = torch.sigmoid(model.decode_features(q_feats, p_exp)).squeeze(1)
            for c, pm in zip(chunk, probs):
                results[c.query_id] = AnomalyMap.from_values(
                    pm.cpu().numpy(), query_id=c.query_id, prompt_id=pid)
    return [results[q.query_id] for q in queries]


# ---------------------------------------------------------------------------
# Map storage
# ---------------------------------------------------------------------------


def save_map(anomaly_map: AnomalyMap, path: str | Path) -> Path:
    """16-bit single-channel PNG (round(p * 65535)) plus a JSON sidecar with
    the image score and prompt identity."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.clip(anomaly_map.values, 0.0, 1.0)
    png = np.rint(values * 65535.0).astype(np.uint16)
    Image.fromarray(png).save(path)
    sidecar = {
        "image_score": anomaly_map.image_score,
        "query_id": anomaly_map.query_id,
        "prompt_id": anomaly_map.prompt_id,
        **anomaly_map.meta,
    }
    Path(path.with_suffix(".json")).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_map(path: str | Path) -> AnomalyMap:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"anomaly map not found: {path}")
    with Image.open(path) as im:
        values = np.asarray(im, dtype=np.float32) / 65535.0
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.is_file() else {}
    return AnomalyMap(values=values,
                      image_score=float(meta.get("image_score", values.max())),
                      query_id=meta.get("query_id", ""), prompt_id=meta.get("prompt_id", ""),
                      meta={k: v for k, v in meta.items()
                            if k not in ("image_score", "query_id", "prompt_id")})
