"""Synthetic scenes with known partitions, for oracles and end-to-end tests.

All randomness comes from numpy's PCG64 generator (np.random.default_rng)
seeded from the spec, so every scene is reproducible byte for byte. Blob
scenes are Voronoi partitions with cosine-separated region prototypes;
crack scenes put a thin high-magnitude polyline on a homogeneous
background, with the direction separation held exactly at the margin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ease.tensors import AttentionMap, FeatureMap, LabelMap


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    channels: int = 8
    hr_shape: tuple[int, int] = (32, 32)
    lr_shape: tuple[int, int] = (4, 4)
    regions: int = 3
    noise: float = 0.0
    margin: float = 0.3  # min pairwise cosine separation (1 - cos) of means
    means: tuple | None = None  # explicit unit region means, row per region
    attn_sharpness: float = 24.0
    line_width: int = 1
    line_orientation: str = "diagonal"  # horizontal | vertical | diagonal
    contrast: float = 1.0  # crack feature magnitude multiplier

    def __post_init__(self):
        if self.regions < 1:
            raise ValueError("need at least one region")
        if self.hr_shape[0] % self.lr_shape[0] or self.hr_shape[1] % self.lr_shape[1]:
            raise ValueError("lr grid must divide the hr grid")
        if not 0.0 <= self.margin < 2.0:
            raise ValueError("margin must lie in [0, 2)")
        if self.line_width not in (1, 2):
            raise ValueError("line width must be 1 or 2 px")

    def mean_matrix(self, rng, n: int) -> np.ndarray:
        if self.means is not None:
            m = np.asarray(self.means, dtype=np.float64)
            if m.shape != (n, self.channels):
                raise ValueError(f"means must be {n} x {self.channels}, got {m.shape}")
            m = m / np.linalg.norm(m, axis=1, keepdims=True)
            sims = m @ m.T
            np.fill_diagonal(sims, -1.0)
            if sims.max() > 1.0 - self.margin + 1e-9:
                raise ValueError("provided means violate the separation margin")
            return m
        return _separated_means(rng, n, self.channels, self.margin)


def _separated_means(rng, n, c, margin):
    """Unit vectors with pairwise cosine similarity <= 1 - margin."""
    means = []
    for _ in range(10000):
        v = rng.normal(size=c)
        v /= np.linalg.norm(v)
        if all(float(v @ m) <= 1.0 - margin for m in means):
            means.append(v)
            if len(means) == n:
                return np.stack(means)
    raise ValueError(f"could not place {n} means with margin {margin} in {c} dims")


def _pool(f_hr: np.ndarray, lr_shape) -> np.ndarray:
    c, h, w = f_hr.shape
    lh, lw = lr_shape
    return f_hr.reshape(c, lh, h // lh, lw, w // lw).mean(axis=(2, 4))


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)


def gen_blob_scene(spec: SynthSpec):
    """Voronoi blob scene: (f_lr, f_hr, attention, gt label map).

    Per-pixel features are the region mean plus Gaussian noise; the low-res
    grid is the patch average of the high-res map; attention rows are the
    softmax of sharpened query/key cosines between each pixel and the pooled
    tokens. The gt map labels regions 1..R.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.hr_shape
    means = spec.mean_matrix(rng, spec.regions)

    sites = np.stack(
        [rng.uniform(0, h, size=spec.regions), rng.uniform(0, w, size=spec.regions)],
        axis=1,
    )
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    d2 = (ys[..., None] - sites[:, 0]) ** 2 + (xs[..., None] - sites[:, 1]) ** 2
    region = d2.argmin(axis=2)

    f_hr = means[region].transpose(2, 0, 1) + spec.noise * rng.normal(
        size=(spec.channels, h, w)
    )
    f_hr = f_hr.astype(np.float32)
    f_lr = _pool(f_hr.astype(np.float64), spec.lr_shape).astype(np.float32)

    hr_px = f_hr.reshape(spec.channels, -1).T.astype(np.float64)
    lr_tok = f_lr.reshape(spec.channels, -1).T.astype(np.float64)
    qn = hr_px / np.maximum(np.linalg.norm(hr_px, axis=1, keepdims=True), 1e-12)
    kn = lr_tok / np.maximum(np.linalg.norm(lr_tok, axis=1, keepdims=True), 1e-12)
    attn = _softmax_rows(spec.attn_sharpness * (qn @ kn.T))

    gt = LabelMap((region + 1).astype(np.uint32))
    return (
        FeatureMap(f_lr.reshape(spec.channels, *spec.lr_shape)),
        FeatureMap(f_hr),
        AttentionMap(attn.astype(np.float32)),
        gt,
    )


def _line_mask(spec: SynthSpec) -> np.ndarray:
    h, w = spec.hr_shape
    mask = np.zeros((h, w), dtype=bool)
    if spec.line_orientation == "horizontal":
        r = h // 2
        mask[r : r + spec.line_width, :] = True
    elif spec.line_orientation == "vertical":
        c = w // 2
        mask[:, c : c + spec.line_width] = True
    elif spec.line_orientation == "diagonal":
        for i in range(min(h, w)):
            mask[i, i : i + spec.line_width] = True
    else:
        raise ValueError(f"unknown orientation {spec.line_orientation!r}")
    return mask


def gen_crack_scene(spec: SynthSpec):
    """Thin-structure scene: (f_hr features, gt label map).

    The background (label 1) sits at a unit mean; the 1-2 px polyline
    (label 2) points along a direction whose cosine against the background
    equals 1 - margin exactly, scaled by the contrast knob so the crack
    border carries the dominant feature gradient. contrast = 0 produces pure
    background with an all-ones label map.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.hr_shape

    if spec.means is not None:
        pair = spec.mean_matrix(rng, 2)
        bg, crack_dir = pair[0], pair[1]
    else:
        bg = rng.normal(size=spec.channels)
        bg /= np.linalg.norm(bg)
        v = rng.normal(size=spec.channels)
        v -= (v @ bg) * bg
        v /= np.linalg.norm(v)
        cos = 1.0 - spec.margin
        crack_dir = cos * bg + np.sqrt(max(0.0, 1.0 - cos * cos)) * v

    if spec.contrast > 0:
        mask = _line_mask(spec)
    else:
        mask = np.zeros((h, w), dtype=bool)

    f = np.tile(bg[:, None, None], (1, h, w)).astype(np.float64)
    f[:, mask] = (spec.contrast * crack_dir)[:, None]
    f = f + spec.noise * rng.normal(size=f.shape)

    labels = np.ones((h, w), dtype=np.uint32)
    labels[mask] = 2
    return FeatureMap(f.astype(np.float32)), LabelMap(labels)
