"""Dataset-tree ingestion, the evaluation protocol, and benchmarking."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch

from . import __version__
from .config import EvalConfig
from .errors import DataError
from .inference import AnomalyMap, EmbeddingCache, QueryItem, predict_batch, save_map
from .metrics import MetricsReport, SampleResult, evaluate
from .segnet import ChangeSegmenter
from .synth.corpus import IMAGE_EXTENSIONS, load_image, load_mask


# ---------------------------------------------------------------------------
# Ingestion: <root>/<class>/{train/good, test/<defect>, ground_truth/<defect>}
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestImage:
    class_name: str
    defect_type: str             # "good" for normal test images
    path: Path
    mask_path: Path | None       # None exactly when defect_type == "good"

    @property
    def label(self) -> int:
        return 0 if self.defect_type == "good" else 1


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    classes: tuple[str, ...]
    train: dict[str, tuple[Path, ...]]
    test: dict[str, tuple[TestImage, ...]]


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in IMAGE_EXTENSIONS and p.is_file())


def ingest_dataset(root: str | Path) -> DatasetIndex:
    """Index a class/train/test/ground_truth tree.

    Every anomalous test image must have a ground-truth mask named
    <stem>_mask.png (or <stem>.png) under ground_truth/<defect>/; missing
    masks fail with the full offender list.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root is not a directory: {root}")
    classes = sorted(p.name for p in root.iterdir() if (p / "train" / "good").is_dir())
    if not classes:
        raise DataError(f"no classes with train/good under {root}")
    train: dict[str, tuple[Path, ...]] = {}
    test: dict[str, tuple[TestImage, ...]] = {}
    missing: list[str] = []
    for cls in classes:
        goods = _list_images(root / cls / "train" / "good")
        if not goods:
            raise DataError(f"class {cls} has no train/good images")
        train[cls] = tuple(goods)
        items: list[TestImage] = []
        test_dir = root / cls / "test"
        defects = sorted(p.name for p in test_dir.iterdir() if p.is_dir()) if test_dir.is_dir() else []
        for defect in defects:
            for img in _list_images(test_dir / defect):
                if defect == "good":
                    items.append(TestImage(cls, defect, img, None))
                    continue
                gt_dir = root / cls / "ground_truth" / defect
                mask = gt_dir / f"{img.stem}_mask.png"
                if not mask.is_file():
                    mask = gt_dir / f"{img.stem}.png"
                if not mask.is_file():
                    missing.append(f"{cls}/test/{defect}/{img.name}")
                    continue
                items.append(TestImage(cls, defect, img, mask))
        test[cls] = tuple(items)
    if missing:
        raise DataError("anomalous test images without ground-truth masks: "
                        + ", ".join(missing))
    return DatasetIndex(root=root, classes=tuple(classes), train=train, test=test)


# ---------------------------------------------------------------------------
# Evaluation protocol
# ---------------------------------------------------------------------------


def _resize_map(values: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if values.shape == shape:
        return values
    return cv2.resize(values, (shape[1], shape[0]), interpolation=cv2.INTER_LINEAR)


def _eval_one_seed(model: ChangeSegmenter, index: DatasetIndex, cfg: EvalConfig,
                   seed: int, cache: EmbeddingCache,
                   collect_maps: bool = False) -> tuple[MetricsReport, list[tuple[TestImage, AnomalyMap]]]:
    normals = {cls: [(str(p.relative_to(index.root)), load_image(p)) for p in paths]
               for cls, paths in index.train.items()}
    queries: list[QueryItem] = []
    items: list[TestImage] = []
    for cls in index.classes:
        for t in index.test[cls]:
            qid = str(t.path.relative_to(index.root))
            queries.append(QueryItem(query_id=qid, class_id=cls, image=load_image(t.path)))
            items.append(t)
    maps = predict_batch(model, queries, normals, policy=cfg.policy, seed=seed,
                         batch_size=cfg.batch_size, cache=cache)
    results: list[SampleResult] = []
    emitted: list[tuple[TestImage, AnomalyMap]] = []
    for t, q, amap in zip(items, queries, maps):
        if t.mask_path is None:
            mask = np.zeros(q.image.shape[:2], dtype=bool)
        else:
            mask = load_mask(t.mask_path)
        results.append(SampleResult(
            class_name=t.class_name, image_label=t.label, image_score=amap.image_score,
            anomaly_map=_resize_map(amap.values, mask.shape), mask=mask))
        if collect_maps:
            emitted.append((t, amap))
    report = evaluate(results, fpr_cap=cfg.fpr_cap, pro_grid=cfg.pro_grid)
    return report, emitted


def _aggregate(reports: list[MetricsReport]) -> dict:
    """Mean and std per metric, per class and for the class mean."""
    def stats_of(values: list[float]) -> dict:
        return {"mean": float(np.mean(values)),
                "std": float(np.std(values)) if len(values) > 1 else 0.0}
    out: dict = {"classes": {}, "mean": {}}
    metric_names = [f for f in reports[0].mean.__dataclass_fields__]
    for cls in reports[0].classes:
        out["classes"][cls] = {m: stats_of([getattr(r.classes[cls], m) for r in reports])
                               for m in metric_names}
    out["mean"] = {m: stats_of([getattr(r.mean, m) for r in reports]) for m in metric_names}
    return out


def run_eval(model: ChangeSegmenter, dataset_root: str | Path, cfg: EvalConfig,
             out_dir: str | Path, checkpoint_name: str = "") -> dict:
    """Evaluate a model over a dataset tree under the configured prompt policy.

    fixed-random and pool-match repeat over cfg.seeds (prompts are re-drawn
    per seed) and report mean +- std; best-match is deterministic and runs
    once. Writes report.json and report.txt; reruns produce identical bytes.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = ingest_dataset(dataset_root)
    cache = EmbeddingCache()
    seeds = list(cfg.seeds) if cfg.policy != "best-match" else [int(cfg.seeds[0])]

    reports: list[MetricsReport] = []
    for i, seed in enumerate(seeds):
        report, emitted = _eval_one_seed(model, index, cfg, int(seed), cache,
                                         collect_maps=cfg.save_maps and i == 0)
        reports.append(report)
        for t, amap in emitted:
            rel = t.path.relative_to(index.root).with_suffix(".png")
            save_map(amap, out_dir / "maps" / rel)

    payload = {
        "version": __version__,
        "policy": cfg.policy,
        "seeds": seeds,
        "checkpoint": checkpoint_name,
        "fpr_cap": cfg.fpr_cap,
        "pro_grid": cfg.pro_grid,
        "per_seed": [r.to_dict() for r in reports],
        "aggregate": _aggregate(reports),
    }
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out_dir / "report.txt").write_text(_format_table(payload) + "\n")
    return payload


def _format_table(payload: dict) -> str:
    agg = payload["aggregate"]
    cols = ("image_auroc", "image_ap", "image_f1_max",
            "pixel_auroc", "pixel_ap", "pixel_f1_max", "pixel_pro")
    names = list(agg["classes"]) + ["mean"]
    width = max(len(n) for n in names)
    multi = len(payload["seeds"]) > 1
    header = "class".ljust(width) + "  " + "  ".join(c.rjust(18 if multi else 12) for c in cols)
    lines = [f"policy: {payload['policy']}   seeds: {payload['seeds']}", header]

    def cell(st):
        if multi:
            return f"{st['mean'] * 100:9.2f} +-{st['std'] * 100:5.2f}".rjust(18)
        return f"{st['mean'] * 100:12.2f}"

    for name in names:
        stats_map = agg["mean"] if name == "mean" else agg["classes"][name]
        lines.append(name.ljust(width) + "  " + "  ".join(cell(stats_map[c]) for c in cols))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Bench
# ---------------------------------------------------------------------------


def run_bench(model: ChangeSegmenter, batch_sizes: tuple[int, ...] = (1, 32),
              iters: int = 100, device: str = "cpu") -> dict:
    """Parameter counts and median forward latency per batch size.

    total = learnable + frozen by construction; latency is the median of
    `iters` timed runs after 3 warmup runs.
    """
    model.eval().to(device)
    total = sum(p.numel() for p in model.parameters())
    learnable = sum(p.numel() for p in model.trainable_parameters())
    out = {
        "version": __version__,
        "arch": model.cfg.arch,
        "input_size": model.cfg.input_size,
        "params_total": int(total),
        "params_learnable": int(learnable),
        "params_frozen": int(total - learnable),
        "latency_ms": {},
    }
    size = model.cfg.input_size
    with torch.no_grad():
        for bs in batch_sizes:
            q = torch.rand(bs, 3, size, size, device=device)
            p = torch.rand(bs, 3, size, size, device=device)
            for _ in range(3):
                model(q, p)
            times = []
            for _ in range(iters):
                t0 = time.perf_counter()
                model(q, p)
                times.append((time.perf_counter() - t0) * 1000.0)
            out["latency_ms"][str(bs)] = float(statistics.median(times))
    return out
