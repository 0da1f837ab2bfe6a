"""Granularity calibration: fit a target from annotated maps, pick the
matching hierarchy level, and sweep the boundary penalty.

The target is the mean granularity of ground-truth maps over images whose
annotation has more than two segments; level selection minimizes the
Euclidean distance to that target in (scale, semantic) space.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ease.evalx import confusion, hungarian_miou
from ease.hmerge import HierarchyLevel, HmConfig, build_hierarchy, granularity_scores
from ease.tensors import FeatureMap, LabelMap


class CalibrationFailed(RuntimeError):
    """No calibration image had a usable (K > 2) annotation."""


class SweepFailed(RuntimeError):
    """Every boundary-penalty candidate failed to produce a score."""


@dataclass(frozen=True)
class GranularityTarget:
    g_scale: float
    g_sem: float
    samples: int

    def __post_init__(self):
        if not (0.0 <= self.g_scale <= 1.0 and 0.0 <= self.g_sem <= 1.0):
            raise ValueError("granularity targets must lie in [0, 1]")


def calibrate_target(
    gt_maps: list[LabelMap],
    features: list[FeatureMap],
    use_median: bool = False,
) -> GranularityTarget:
    """Mean (or median) granularity of the annotated maps with K > 2."""
    if len(gt_maps) != len(features):
        raise ValueError("gt and feature lists are not aligned")
    scores = []
    for gt, f in zip(gt_maps, features):
        g = granularity_scores(gt, f)
        if g is not None:
            scores.append(g)
    if not scores:
        raise CalibrationFailed("no image with more than two annotated segments")
    arr = np.asarray(scores, dtype=np.float64)
    agg = np.median(arr, axis=0) if use_median else arr.mean(axis=0)
    return GranularityTarget(float(agg[0]), float(agg[1]), samples=len(scores))


def select_level(
    hierarchy: list[HierarchyLevel],
    target: GranularityTarget,
    weights: tuple[float, float] = (1.0, 1.0),
) -> int:
    """Index of the level closest to the target in (scale, semantic) space.

    Levels without granularity (K <= 2) are skipped; if none carry scores the
    finest level wins. Distance ties go to the finer level, then the higher
    producing threshold, making the choice independent of list order.
    """
    if not hierarchy:
        raise ValueError("empty hierarchy")
    scored = [(i, lv) for i, lv in enumerate(hierarchy) if lv.granularity is not None]
    if not scored:
        finest = max(
            range(len(hierarchy)),
            key=lambda i: (hierarchy[i].k, hierarchy[i].snapshot.tau, -i),
        )
        return finest
    wx, wy = weights

    def key(item):
        i, lv = item
        gs, gm = lv.granularity
        dist = np.hypot(wx * (gs - target.g_scale), wy * (gm - target.g_sem))
        return (dist, -lv.k, -lv.snapshot.tau, i)

    return min(scored, key=key)[0]


@dataclass(frozen=True)
class BetaSweepResult:
    best_beta: float
    best_miou: float
    per_beta: dict  # beta -> mIoU (or None for failed settings)
    target: GranularityTarget


def beta_sweep(
    label_maps: list[LabelMap],
    features: list[FeatureMap],
    gt_maps: list[LabelMap],
    cfg: HmConfig = HmConfig(),
    betas=(0.0, 0.5, 1.0, 1.5, 2.0),
    background=None,
    ignore=frozenset(),
) -> BetaSweepResult:
    """Evaluate each boundary penalty on the calibration subset.

    Per beta: run the merge stage per image, pick the level matching the
    calibrated target, and score Hungarian mIoU against the annotation,
    averaged per image. Failed settings are skipped; the best beta wins,
    ties to the smaller value.
    """
    if not (len(label_maps) == len(features) == len(gt_maps)):
        raise ValueError("inputs are not aligned")
    if not betas:
        raise ValueError("no beta candidates")
    target = calibrate_target(gt_maps, features)
    per_beta: dict = {}
    for beta in betas:
        try:
            per_beta[beta] = _score_beta(
                label_maps, features, gt_maps, replace(cfg, beta_bnd=beta), target, background, ignore
            )
        except (ValueError, RuntimeError):
            per_beta[beta] = None
    usable = [(b, m) for b, m in per_beta.items() if m is not None]
    if not usable:
        raise SweepFailed("all boundary penalty candidates failed")
    best_beta, best_miou = max(usable, key=lambda bm: (bm[1], -bm[0]))
    return BetaSweepResult(best_beta, best_miou, per_beta, target)


def _score_beta(label_maps, features, gt_maps, cfg, target, background, ignore):
    mious = []
    for l0, f, gt in zip(label_maps, features, gt_maps):
        levels = build_hierarchy(l0, f, cfg)
        if levels:
            chosen = levels[select_level(levels, target)]
            pred = chosen.labels
        else:
            pred = l0.compact()  # nothing merged: the input is the hierarchy
        _, _, miou = hungarian_miou(confusion(pred, gt, ignore), background)
        mious.append(miou)
    return float(np.mean(mious))


def write_report(path, result: BetaSweepResult) -> None:
    """Calibration report as key=value lines."""
    lines = [
        f"target_g_scale={result.target.g_scale:.9f}",
        f"target_g_sem={result.target.g_sem:.9f}",
        f"target_samples={result.target.samples}",
        f"chosen_beta={result.best_beta:g}",
        f"chosen_miou={result.best_miou:.9f}",
    ]
    for beta in sorted(result.per_beta):
        miou = result.per_beta[beta]
        lines.append(f"miou_beta_{beta:g}={'failed' if miou is None else f'{miou:.9f}'}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
