"""Mask evaluation: Hungarian-matched mIoU and centerline IoU.

Predicted cluster ids carry no meaning, so scoring first solves the
optimal one-to-one cluster/class assignment on the confusion matrix
(maximizing total intersection); with a declared background class,
clusters the assignment leaves out are remapped there many-to-one before
IoU. Thin structures get the skeleton-based centerline score instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation
from scipy.optimize import linear_sum_assignment

from ease.tensors import LabelMap


@dataclass(frozen=True)
class ConfusionMatrix:
    """Pixel counts indexed by (predicted cluster, ground-truth class)."""

    counts: np.ndarray  # (P, G) int64
    pred_ids: np.ndarray
    gt_ids: np.ndarray

    def __post_init__(self):
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(pred: LabelMap, gt: LabelMap, ignore=frozenset()) -> ConfusionMatrix:
    """Count label co-occurrences over pixels whose gt label is not ignored."""
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValueError(
            f"dimension mismatch: pred {(pred.height, pred.width)} vs gt {(gt.height, gt.width)}"
        )
    p = pred.labels.ravel().astype(np.int64)
    g = gt.labels.ravel().astype(np.int64)
    if ignore:
        keep = ~np.isin(g, list(ignore))
        p, g = p[keep], g[keep]
    pred_ids, p_idx = np.unique(p, return_inverse=True)
    gt_ids, g_idx = np.unique(g, return_inverse=True)
    counts = np.zeros((len(pred_ids), len(gt_ids)), dtype=np.int64)
    np.add.at(counts, (p_idx, g_idx), 1)
    return ConfusionMatrix(counts=counts, pred_ids=pred_ids, gt_ids=gt_ids)


def hungarian_miou(cm: ConfusionMatrix, background=None):
    """Optimal cluster-to-class matching, then per-class IoU.

    Returns (mapping, per-class IoU dict, mIoU). mapping sends each predicted
    cluster id to a gt class id (or None when unmatched and no background is
    declared). IoU of class c is TP/(TP+FP+FN) after the remap; mIoU averages
    the gt classes present, unweighted.
    """
    counts = cm.counts
    if counts.size == 0:
        raise ValueError("empty confusion matrix")
    # canonicalize row order by content so tied optima resolve identically
    # no matter how the caller numbered or ordered the clusters
    order = np.lexsort(counts.T[::-1])
    rows, cols = linear_sum_assignment(-counts[order])
    assigned = {int(order[r]): int(c) for r, c in zip(rows, cols)}

    bg_col = None
    if background is not None:
        hits = np.flatnonzero(cm.gt_ids == background)
        if len(hits) == 0:
            raise ValueError(f"background class {background} not present in gt")
        bg_col = int(hits[0])

    mapping = {}
    col_of = np.full(len(cm.pred_ids), -1, dtype=np.int64)
    for r in range(len(cm.pred_ids)):
        if r in assigned:
            col_of[r] = assigned[r]
        elif bg_col is not None:
            col_of[r] = bg_col  # many-to-one background remap
        mapping[int(cm.pred_ids[r])] = (
            int(cm.gt_ids[col_of[r]]) if col_of[r] >= 0 else None
        )

    per_class = {}
    ious = []
    col_sums = counts.sum(axis=0)
    for c in range(len(cm.gt_ids)):
        if col_sums[c] == 0:
            continue
        mine = col_of == c
        tp = int(counts[mine, c].sum())
        fp = int(counts[mine].sum()) - tp
        fn = int(col_sums[c]) - tp
        iou = tp / (tp + fp + fn) if tp + fp + fn > 0 else 0.0
        per_class[int(cm.gt_ids[c])] = iou
        ious.append(iou)
    miou = float(np.mean(ious)) if ious else 0.0
    return mapping, per_class, miou


def pixel_accuracy(cm: ConfusionMatrix, background=None) -> float:
    """Fraction of pixels landing in their matched class after the remap."""
    mapping, _, _ = hungarian_miou(cm, background)
    correct = 0
    for r, pid in enumerate(cm.pred_ids):
        target = mapping[int(pid)]
        if target is None:
            continue
        c = int(np.flatnonzero(cm.gt_ids == target)[0])
        correct += int(cm.counts[r, c])
    return correct / cm.total if cm.total else 0.0


_ZS_NEIGHBORS = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen iterative thinning to a 1-px-wide skeleton."""
    img = np.asarray(mask).astype(bool)
    if img.ndim != 2:
        raise ValueError("mask must be 2-D")
    img = np.pad(img, 1, constant_values=False)
    changed = True
    while changed:
        changed = False
        for phase in (0, 1):
            p = [img[1 + dy : img.shape[0] - 1 + dy, 1 + dx : img.shape[1] - 1 + dx].astype(np.int8)
                 for dy, dx in _ZS_NEIGHBORS]
            p2, p3, p4, p5, p6, p7, p8, p9 = p
            core = img[1:-1, 1:-1]
            b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9
            seq = [p2, p3, p4, p5, p6, p7, p8, p9, p2]
            a = sum((seq[i] == 0) & (seq[i + 1] == 1) for i in range(8))
            if phase == 0:
                cond = (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
            else:
                cond = (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
            kill = core & (b >= 2) & (b <= 6) & (a == 1) & cond
            if kill.any():
                core[kill] = False
                changed = True
    return img[1:-1, 1:-1]


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    # Chebyshev ball: a (2r+1) x (2r+1) square structuring element
    size = 2 * radius + 1
    return binary_dilation(mask, structure=np.ones((size, size), dtype=bool))


def cl_iou(pred: np.ndarray, gt: np.ndarray, tolerance: int = 4) -> float:
    """Centerline overlap of two binary maps with a pixel tolerance.

    Skeletonizes both maps; counts predicted skeleton pixels inside the
    dilated gt region and gt skeleton pixels inside the dilated predicted
    skeleton, over the total skeleton mass. Both maps empty scores 1; one
    empty scores 0.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"dimension mismatch: {pred.shape} vs {gt.shape}")
    if not pred.any() and not gt.any():
        return 1.0
    skel_p = skeletonize(pred)
    skel_g = skeletonize(gt)
    denom = int(skel_p.sum()) + int(skel_g.sum())
    if denom == 0:
        return 1.0
    hits = int((skel_p & _dilate(gt, tolerance)).sum())
    hits += int((skel_g & _dilate(skel_p, tolerance)).sum())
    return hits / denom
