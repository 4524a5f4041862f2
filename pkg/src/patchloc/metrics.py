"""Localization evaluation: detected regions, overlap ratios, fold plans.

A detection is the set of patches whose refined score reaches 0.5. Overlap
against the ground-truth box mask is scored two ways: intersection over
union, and intersection over detected region (which forgives boxes that are
loose around the object). A localization counts as correct when the overlap
exceeds the acceptance ratio, 0.1 by default.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .losses import Annotation


class EvalError(ValueError):
    pass


@dataclass
class DetectedRegion:
    mask: np.ndarray  # (P,P) bool

    @property
    def empty(self) -> bool:
        return not self.mask.any()

    @property
    def patch_count(self) -> int:
        return int(self.mask.sum())


def detect_region(scores, k: Optional[int] = None, threshold: float = 0.5) -> DetectedRegion:
    """Patches at or above the detection threshold (inclusive).

    Accepts a (P,P) score plane directly, or a (P,P,K) stack / PatchScores
    together with a class index k.
    """
    values = getattr(scores, "values", scores)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        if k is None:
            raise EvalError("detect_region: class index required for a (P,P,K) stack")
        values = values[:, :, k]
    if values.ndim != 2:
        raise EvalError(f"detect_region expects a (P,P) score plane, got {values.shape}")
    return DetectedRegion(mask=values >= threshold)


def iou_ior(region, box: np.ndarray) -> Tuple[float, float]:
    """(intersection/union, intersection/region) for a detection vs a box mask.

    An empty detection scores (0, 0). An empty box is an evaluation bug and
    raises.
    """
    mask = region.mask if isinstance(region, DetectedRegion) else np.asarray(region, dtype=bool)
    box = np.asarray(box, dtype=bool)
    if mask.shape != box.shape:
        raise EvalError(f"region {mask.shape} and box {box.shape} shapes differ")
    nbox = int(box.sum())
    if nbox == 0:
        raise EvalError("iou_ior: empty ground-truth box")
    nregion = int(mask.sum())
    if nregion == 0:
        return 0.0, 0.0
    inter = int((mask & box).sum())
    union = nregion + nbox - inter
    return inter / union, inter / nregion


@dataclass
class LocalizationResult:
    iou_acc: np.ndarray        # (K,) per-class accuracy, IoU >= min_overlap; NaN if no samples
    ior_acc: np.ndarray        # (K,) same under IoR
    counts: np.ndarray         # (K,) boxes evaluated per class
    mean_iou: np.ndarray       # (K,) mean raw IoU; NaN if no samples
    mean_ior: np.ndarray

    @property
    def mean_iou_acc(self) -> float:
        live = self.counts > 0
        return float(self.iou_acc[live].mean()) if live.any() else float("nan")

    @property
    def mean_ior_acc(self) -> float:
        live = self.counts > 0
        return float(self.ior_acc[live].mean()) if live.any() else float("nan")


def localization_accuracy(overlaps: Sequence[float], min_overlap: float = 0.1) -> float:
    """Fraction of overlap values meeting the acceptance ratio (inclusive)."""
    if not (0.0 < min_overlap <= 1.0):
        raise EvalError(f"acceptance ratio must lie in (0,1], got {min_overlap}")
    arr = np.asarray(list(overlaps), dtype=np.float64)
    if arr.size == 0:
        return float("nan")
    return float(np.mean(arr >= min_overlap))


def evaluate_localization(score_list: Sequence[np.ndarray],
                          truth_list: Sequence[Annotation],
                          min_overlap: float = 0.1,
                          detection_threshold: float = 0.5) -> LocalizationResult:
    """Score refined patch grids against ground-truth boxes.

    Every (image, class) pair whose truth carries a box contributes one
    IoU/IoR sample; accuracy is the fraction at or above min_overlap.
    Classes with no samples report NaN (absent), never zero.
    """
    if len(score_list) != len(truth_list):
        raise EvalError("score and truth lists differ in length")
    if not truth_list:
        raise EvalError("nothing to evaluate")
    k = truth_list[0].classes
    hits_iou = np.zeros(k)
    hits_ior = np.zeros(k)
    counts = np.zeros(k)
    sum_iou = np.zeros(k)
    sum_ior = np.zeros(k)
    for scores, truth in zip(score_list, truth_list):
        values = np.asarray(getattr(scores, "values", scores), dtype=np.float64)
        for kk in range(k):
            if not truth.a[kk]:
                continue
            region = detect_region(values[:, :, kk], threshold=detection_threshold)
            iou, ior = iou_ior(region, truth.box_masks[kk])
            counts[kk] += 1
            sum_iou[kk] += iou
            sum_ior[kk] += ior
            hits_iou[kk] += iou >= min_overlap
            hits_ior[kk] += ior >= min_overlap
    absent = counts == 0
    safe = np.maximum(counts, 1.0)
    result = LocalizationResult(iou_acc=hits_iou / safe, ior_acc=hits_ior / safe,
                                counts=counts, mean_iou=sum_iou / safe,
                                mean_ior=sum_ior / safe)
    for arr in (result.iou_acc, result.ior_acc, result.mean_iou, result.mean_ior):
        arr[absent] = np.nan
    return result


# ---------------------------------------------------------------------------
# cross-validation folds


@dataclass
class FoldPlan:
    folds: List[np.ndarray]   # held-out ids per fold; disjoint partition
    seed: int

    @property
    def count(self) -> int:
        return len(self.folds)

    def train_ids(self, fold: int) -> np.ndarray:
        others = [f for i, f in enumerate(self.folds) if i != fold]
        return np.sort(np.concatenate(others)) if others else np.array([], dtype=np.int64)

    def val_ids(self, fold: int) -> np.ndarray:
        return self.folds[fold]


def make_folds(ids: Sequence, folds: int, seed: int) -> FoldPlan:
    """Deterministic seeded partition of ids into near-equal disjoint folds."""
    ids = np.asarray(ids)
    if ids.size == 0:
        raise EvalError("make_folds: no ids to split")
    if folds < 2 or folds > ids.size:
        raise EvalError(f"cannot split {ids.size} items into {folds} folds")
    perm = np.random.default_rng(seed).permutation(ids.size)
    return FoldPlan(folds=[np.sort(ids[part]) for part in np.array_split(perm, folds)],
                    seed=seed)


# ---------------------------------------------------------------------------
# pixel-space boxes to patch masks


def pixel_box_to_patch_mask(row0: int, col0: int, rows: int, cols: int,
                            input_side: int, grid: int) -> np.ndarray:
    """Patch-grid footprint of a pixel box.

    A patch joins the mask when the box covers more than half its area; the
    patch under the box center always joins, so thin boxes never vanish.
    """
    if rows < 1 or cols < 1 or row0 < 0 or col0 < 0 \
            or row0 + rows > input_side or col0 + cols > input_side:
        raise EvalError(f"pixel box ({row0},{col0},{rows},{cols}) outside {input_side}px image")
    psz = input_side // grid
    mask = np.zeros((grid, grid), dtype=bool)
    for pr in range(grid):
        top = pr * psz
        overlap_r = min(top + psz, row0 + rows) - max(top, row0)
        if overlap_r <= 0:
            continue
        for pc in range(grid):
            left = pc * psz
            overlap_c = min(left + psz, col0 + cols) - max(left, col0)
            if overlap_c > 0 and overlap_r * overlap_c > 0.5 * psz * psz:
                mask[pr, pc] = True
    cr = min((row0 + rows / 2.0) // psz, grid - 1)
    cc = min((col0 + cols / 2.0) // psz, grid - 1)
    mask[int(cr), int(cc)] = True
    return mask


# ---------------------------------------------------------------------------
# report emission


def write_metrics_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(header))
        for row in rows:
            w.writerow(list(row))


def accuracy_table_rows(result: LocalizationResult, min_overlap: float) -> List[List]:
    """Rows (class, criterion, T, accuracy, n); absent accuracies stay blank."""
    rows = []
    for criterion, acc in (("iou", result.iou_acc), ("ior", result.ior_acc)):
        for kk in range(acc.shape[0]):
            val = "" if np.isnan(acc[kk]) else f"{acc[kk]:.6f}"
            rows.append([kk, criterion, min_overlap, val, int(result.counts[kk])])
    return rows


def svg_bar_chart(path, group_labels: Sequence[str], series: Dict[str, Sequence[float]],
                  title: str = "", ylabel: str = "", ymax: Optional[float] = None) -> None:
    """Grouped bar chart as a small self-contained SVG file."""
    groups = len(group_labels)
    names = list(series)
    for name in names:
        if len(series[name]) != groups:
            raise EvalError(f"series {name!r} length != number of groups")
    if ymax is None:
        peak = max((max(v) for v in series.values() if len(v)), default=1.0)
        ymax = max(peak * 1.15, 1e-9)

    width, height = 640, 360
    left, right, top, bottom = 60, 20, 40, 60
    plot_w = width - left - right
    plot_h = height - top - bottom
    palette = ["#4878cf", "#e1812c", "#3a923a", "#c03d3e", "#9372b2", "#7f7f7f"]
    group_w = plot_w / groups
    bar_w = group_w * 0.8 / max(len(names), 1)

    def y_of(v):
        return top + plot_h * (1.0 - v / ymax)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        parts.append(f'<text x="{width / 2}" y="20" text-anchor="middle" '
                     f'font-size="15" font-family="sans-serif">{title}</text>')
    for i in range(5):
        v = ymax * i / 4
        yy = y_of(v)
        parts.append(f'<line x1="{left}" y1="{yy:.1f}" x2="{width - right}" y2="{yy:.1f}" '
                     f'stroke="#dddddd"/>')
        parts.append(f'<text x="{left - 6}" y="{yy + 4:.1f}" text-anchor="end" '
                     f'font-size="11" font-family="sans-serif">{v:.2f}</text>')
    for g, label in enumerate(group_labels):
        x0 = left + g * group_w + group_w * 0.1
        for si, name in enumerate(names):
            v = max(0.0, min(float(series[name][g]), ymax))
            x = x0 + si * bar_w
            parts.append(f'<rect x="{x:.1f}" y="{y_of(v):.1f}" width="{bar_w:.1f}" '
                         f'height="{plot_h * v / ymax:.1f}" fill="{palette[si % len(palette)]}"/>')
        parts.append(f'<text x="{left + (g + 0.5) * group_w:.1f}" y="{height - bottom + 16}" '
                     f'text-anchor="middle" font-size="11" font-family="sans-serif">{label}</text>')
    for si, name in enumerate(names):
        lx = left + 10 + si * 130
        ly = height - 18
        parts.append(f'<rect x="{lx}" y="{ly - 10}" width="12" height="12" '
                     f'fill="{palette[si % len(palette)]}"/>')
        parts.append(f'<text x="{lx + 16}" y="{ly}" font-size="11" '
                     f'font-family="sans-serif">{name}</text>')
    if ylabel:
        parts.append(f'<text x="14" y="{top + plot_h / 2}" font-size="12" '
                     f'font-family="sans-serif" transform="rotate(-90 14 {top + plot_h / 2})" '
                     f'text-anchor="middle">{ylabel}</text>')
    parts.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>')
    parts.append(f'<line x1="{left}" y1="{top + plot_h}" x2="{width - right}" '
                 f'y2="{top + plot_h}" stroke="black"/>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
