"""Stage 2: dense per-pixel assignment by blended feature/attention cost.

Each pixel takes the prototype minimizing alpha*(1 - cosine) plus
beta*(1 - pooled attention affinity), then an optional edge-aware pass
absorbs specks that a clear neighborhood majority disagrees with,
unless they sit on a strong feature gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ease.crs import PrototypeDict, quantize_labels
from ease.tensors import AttentionMap, FeatureMap, LabelMap, normalized_rows, spatial_gradient


@dataclass(frozen=True)
class AggConfig:
    alpha: float = 0.75
    beta: float = 0.25
    smoothing: bool = True
    majority_threshold: float = 5.0 / 8.0
    gradient_percentile: float = 75.0
    smooth_to_fixpoint: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("need alpha, beta >= 0 with alpha + beta > 0")
        if not 0.0 < self.majority_threshold <= 1.0:
            raise ValueError("majority threshold must lie in (0, 1]")
        if not 0.0 <= self.gradient_percentile <= 100.0:
            raise ValueError("gradient percentile must lie in [0, 100]")


def group_matrix(tokens: np.ndarray, d: PrototypeDict) -> np.ndarray:
    """One-hot N_lr x K assignment of each LR token to its nearest prototype."""
    labels = quantize_labels(np.asarray(tokens, dtype=np.float64), d)
    g = np.zeros((labels.shape[0], d.k))
    g[np.arange(labels.shape[0]), labels] = 1.0
    return g


def pool_attention(a: AttentionMap, g: np.ndarray) -> np.ndarray:
    """Pool attention columns per prototype group: rows stay stochastic."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != a.n_lr:
        raise ValueError(f"group matrix {g.shape} does not match {a.n_lr} attention columns")
    return a.rows.astype(np.float64) @ g


def assign_labels(
    f_hr: FeatureMap,
    d: PrototypeDict,
    a_m: np.ndarray,
    cfg: AggConfig = AggConfig(),
) -> LabelMap:
    """Per-pixel argmin of the blended cost; labels are offset by +1 so 0
    stays reserved for background."""
    pixels = f_hr.pixels()
    a_m = np.asarray(a_m, dtype=np.float64)
    if a_m.shape != (pixels.shape[0], d.k):
        raise ValueError(f"pooled affinity {a_m.shape} does not match ({pixels.shape[0]}, {d.k})")
    sims = normalized_rows(pixels) @ normalized_rows(d.vectors).T
    cost = cfg.alpha * (1.0 - sims) + cfg.beta * (1.0 - a_m)
    y = cost.argmin(axis=1).astype(np.uint32) + 1
    return LabelMap(y.reshape(f_hr.height, f_hr.width))


def edge_smooth(
    y: LabelMap,
    f_hr: FeatureMap,
    majority_threshold: float = 5.0 / 8.0,
    gradient_percentile: float = 75.0,
    to_fixpoint: bool = False,
) -> LabelMap:
    """Absorb pixels whose 8-neighborhood majority disagrees with them.

    A pixel is reassigned when at least majority_threshold of its existing
    neighbors carry one single different label, unless its own gradient
    magnitude exceeds the given percentile of the image's gradient
    distribution. One synchronous pass by default: every decision reads the
    input map, so results are order-independent.
    """
    if (y.height, y.width) != (f_hr.height, f_hr.width):
        raise ValueError("label map and feature map are not aligned")
    grad = spatial_gradient(f_hr).data[0]
    cutoff = float(np.percentile(grad, gradient_percentile))
    labels = y.labels
    while True:
        out = _smooth_pass(labels, grad, cutoff, majority_threshold)
        if not to_fixpoint or np.array_equal(out, labels):
            return LabelMap(out)
        labels = out


_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _smooth_pass(labels, grad, cutoff, majority_threshold):
    h, w = labels.shape
    ids, dense = np.unique(labels, return_inverse=True)
    dense = dense.reshape(h, w)
    out = labels.copy()
    counts = np.zeros((len(ids), h, w), dtype=np.int16)
    total = np.zeros((h, w), dtype=np.int16)
    onehot = np.zeros((len(ids), h, w), dtype=np.int16)
    np.put_along_axis(onehot, dense[None].astype(np.int64), 1, axis=0)
    for dy, dx in _OFFSETS:
        ys = slice(max(dy, 0), h + min(dy, 0))
        xs = slice(max(dx, 0), w + min(dx, 0))
        yd = slice(max(-dy, 0), h + min(-dy, 0))
        xd = slice(max(-dx, 0), w + min(-dx, 0))
        counts[:, yd, xd] += onehot[:, ys, xs]
        total[yd, xd] += 1
    winner = counts.argmax(axis=0)
    winner_count = np.take_along_axis(counts, winner[None], axis=0)[0]
    eligible = (
        (winner != dense)
        & (winner_count >= majority_threshold * total)
        & (grad <= cutoff)
    )
    out[eligible] = ids[winner[eligible]]
    return out
