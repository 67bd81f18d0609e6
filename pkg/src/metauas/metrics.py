"""Evaluation metrics computed exactly on numpy arrays.

All metrics are hand-built from their definitions (no sklearn) so threshold
semantics are explicit:

* auroc            Mann-Whitney U statistic with average ranks for ties.
* average_precision  AP = sum_k (R_k - R_{k-1}) P_k over descending unique scores.
* f1_max           max F1 over thresholds at every unique score ("positive" means
                   score >= threshold).
* pro              per-region overlap vs. global pixel FPR, integrated over
                   FPR in [0, fpr_cap] and normalized by the cap.

Scores may be any real values; every metric is invariant under strictly
increasing transforms of the scores.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, stats

from .errors import UndefinedMetricError

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _scores_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise UndefinedMetricError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    if s.size == 0:
        raise UndefinedMetricError("empty score set")
    if not np.all(np.isin(y, (0, 1))):
        raise UndefinedMetricError("labels must be binary (0/1)")
    return s, y.astype(np.int64)


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank (Mann-Whitney) formulation.

    Ties contribute 1/2, which average ranks account for exactly.
    """
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both a positive and a negative example")
    ranks = stats.rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_sweep(s: np.ndarray, y: np.ndarray):
    """Cumulative TP/FP counts at each unique score, descending.

    Returns (thresholds_desc, tp, fp) where tp[k] counts positives with
    score >= thresholds_desc[k].
    """
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    # last index of each tie group = cumulative counts at that threshold
    boundary = np.nonzero(np.diff(s_sorted))[0]
    idx = np.r_[boundary, s_sorted.size - 1]
    tp = np.cumsum(y_sorted)[idx]
    fp = (idx + 1) - tp
    return s_sorted[idx], tp.astype(np.float64), fp.astype(np.float64)


def average_precision(scores, labels) -> float:
    """AP as the recall-weighted sum of precisions at descending unique scores."""
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    _, tp, fp = _threshold_sweep(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev_recall) * precision))


def f1_max(scores, labels) -> float:
    """Maximum F1 over thresholds placed at every unique score."""
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("F1 needs at least one positive")
    _, tp, fp = _threshold_sweep(s, y)
    denom = tp + fp + n_pos          # = 2TP + FP + FN at each threshold
    f1 = np.where(denom > 0, 2.0 * tp / denom, 0.0)
    return float(f1.max())


def _as_stack(arrays: Sequence[np.ndarray], dtype) -> list[np.ndarray]:
    out = []
    for a in arrays:
        a = np.asarray(a)
        if a.ndim != 2:
            raise UndefinedMetricError(f"expected 2-D arrays, got shape {a.shape}")
        out.append(a.astype(dtype))
    return out


def pro(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray],
        fpr_cap: float = 0.3, grid: int = 200) -> float:
    """Per-region overlap, integrated against global FPR over [0, fpr_cap].

    Regions are 8-connected components of the ground-truth masks. For each
    threshold t (score >= t predicts change), the PRO value is the mean over
    all regions of |prediction AND region| / |region|, and the FPR is the
    fraction of normal pixels predicted as changed, pooled over all images.

    Thresholds are `grid` equally spaced score quantiles (lower interpolation,
    so every threshold is an attained score and the result is invariant under
    strictly increasing score transforms). The integrand at FPR f is the best
    overlap achievable at FPR <= f (a right-continuous step function through
    the swept points, extended constantly beyond the last one); the integral
    is normalized by fpr_cap. Perfect predictions give 1.0, constant-zero
    maps give 0.0.
    """
    if not (0.0 < fpr_cap <= 1.0):
        raise UndefinedMetricError(f"fpr_cap must lie in (0, 1], got {fpr_cap}")
    if grid < 2:
        raise UndefinedMetricError("grid must be >= 2")
    if len(maps) != len(masks) or len(maps) == 0:
        raise UndefinedMetricError("maps and masks must be non-empty and same length")
    maps = _as_stack(maps, np.float64)
    masks = _as_stack(masks, bool)

    regions: list[tuple[int, np.ndarray, np.ndarray]] = []   # (area, region_bool, map)
    normal_scores = []
    for m, gt in zip(maps, masks):
        if m.shape != gt.shape:
            raise UndefinedMetricError(f"map/mask shape mismatch: {m.shape} vs {gt.shape}")
        labeled, n = ndimage.label(gt, structure=EIGHT_CONNECTED)
        for r in range(1, n + 1):
            region = labeled == r
            regions.append((int(region.sum()), region, m))
        normal_scores.append(m[~gt])
    if not regions:
        raise UndefinedMetricError("PRO needs at least one ground-truth region")
    normal = np.concatenate(normal_scores)
    if normal.size == 0:
        raise UndefinedMetricError("PRO needs at least one normal pixel")

    pooled = np.concatenate([m.ravel() for m in maps])
    qs = np.quantile(pooled, np.linspace(0.0, 1.0, grid), method="lower")
    thresholds = np.unique(qs)[::-1]            # descending: prediction set grows

    n_regions = len(regions)
    pro_vals = np.empty(thresholds.size)
    fpr_vals = np.empty(thresholds.size)
    for i, t in enumerate(thresholds):
        overlap = 0.0
        for area, region, m in regions:
            overlap += np.count_nonzero(m[region] >= t) / area
        pro_vals[i] = overlap / n_regions
        fpr_vals[i] = np.count_nonzero(normal >= t) / normal.size
    return _integrate_best_step(fpr_vals, pro_vals, fpr_cap)


def _integrate_best_step(fpr: np.ndarray, pro_vals: np.ndarray, cap: float) -> float:
    """Integrate best-achievable overlap over FPR in [0, cap], divided by cap.

    Points arrive sorted by descending threshold, so both coordinates are
    non-decreasing. best(f) = max overlap among points with fpr <= f; 0 when
    no point qualifies.
    """
    best = 0.0
    area = 0.0
    prev_f = 0.0
    for f, p in zip(fpr, pro_vals):
        if f > cap:
            break
        if f > prev_f:
            area += best * (f - prev_f)
            prev_f = f
        best = max(best, p)
    area += best * (cap - prev_f)
    return float(area / cap)


# ---------------------------------------------------------------------------
# Dataset-level evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassMetrics:
    image_auroc: float
    image_ap: float
    image_f1_max: float
    pixel_auroc: float
    pixel_ap: float
    pixel_f1_max: float
    pixel_pro: float


@dataclass(frozen=True)
class MetricsReport:
    """Per-class metrics plus their unweighted mean, with the knobs echoed."""

    classes: dict[str, ClassMetrics]
    mean: ClassMetrics
    fpr_cap: float
    pro_grid: int

    def to_dict(self) -> dict:
        return {
            "classes": {k: dataclasses.asdict(v) for k, v in sorted(self.classes.items())},
            "mean": dataclasses.asdict(self.mean),
            "fpr_cap": self.fpr_cap,
            "pro_grid": self.pro_grid,
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def to_table(self) -> str:
        cols = ("image_auroc", "image_ap", "image_f1_max",
                "pixel_auroc", "pixel_ap", "pixel_f1_max", "pixel_pro")
        width = max([len("mean")] + [len(c) for c in self.classes])
        lines = ["class".ljust(width) + "  " + "  ".join(c.rjust(12) for c in cols)]
        def row(name, cm):
            vals = "  ".join(f"{getattr(cm, c) * 100:12.2f}" for c in cols)
            return name.ljust(width) + "  " + vals
        for name in sorted(self.classes):
            lines.append(row(name, self.classes[name]))
        lines.append(row("mean", self.mean))
        return "\n".join(lines)


@dataclass(frozen=True)
class SampleResult:
    """One evaluated image: its class, label, score, map and ground truth."""

    class_name: str
    image_label: int                 # 1 = anomalous
    image_score: float
    anomaly_map: np.ndarray          # H x W floats
    mask: np.ndarray                 # H x W binary ground truth


def evaluate(results: Sequence[SampleResult], fpr_cap: float = 0.3, pro_grid: int = 200) -> MetricsReport:
    """Aggregate per-image results into per-class and mean metrics.

    Image-level metrics use one score per image; pixel-level metrics pool all
    pixels of a class. PRO is computed per class and averaged. Input order
    does not matter.
    """
    if not results:
        raise UndefinedMetricError("no results to evaluate")
    per_class: dict[str, list[SampleResult]] = {}
    for r in results:
        per_class.setdefault(r.class_name, []).append(r)

    classes: dict[str, ClassMetrics] = {}
    for name in sorted(per_class):
        rs = sorted(per_class[name], key=lambda r: (r.image_label, r.image_score))
        img_scores = [r.image_score for r in rs]
        img_labels = [r.image_label for r in rs]
        pix_scores = np.concatenate([r.anomaly_map.ravel() for r in rs])
        pix_labels = np.concatenate([np.asarray(r.mask, bool).ravel() for r in rs]).astype(int)
        classes[name] = ClassMetrics(
            image_auroc=auroc(img_scores, img_labels),
            image_ap=average_precision(img_scores, img_labels),
            image_f1_max=f1_max(img_scores, img_labels),
            pixel_auroc=auroc(pix_scores, pix_labels),
            pixel_ap=average_precision(pix_scores, pix_labels),
            pixel_f1_max=f1_max(pix_scores, pix_labels),
            pixel_pro=pro([r.anomaly_map for r in rs], [r.mask for r in rs],
                          fpr_cap=fpr_cap, grid=pro_grid),
        )
    mean = ClassMetrics(*[float(np.mean([getattr(c, f.name) for c in classes.values()]))
                          for f in dataclasses.fields(ClassMetrics)])
    return MetricsReport(classes=classes, mean=mean, fpr_cap=fpr_cap, pro_grid=pro_grid)
