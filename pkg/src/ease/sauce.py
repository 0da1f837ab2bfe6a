"""Numerical forward path of the feature upsampler.

Covers squeeze-excitation channel gating, scale/shift key modulation,
rotary position embedding, cross-attention upsampling, and the combined
cosine + MSE reconstruction loss. The image encoder that produces the
projected query/key embeddings is out of scope; everything here starts
from supplied grids and weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ease.tensors import AttentionMap, FeatureMap, read_bundle, write_bundle

ROPE_BASE = 10000.0


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class SEWeights:
    """Two-layer excitation bottleneck: C -> C/r -> C.

    Biases default to zero, in which case the gate reduces to the plain
    sigmoid(W2 silu(W1 gap(f))) form.
    """

    w1: np.ndarray  # (C/r, C)
    b1: np.ndarray  # (C/r,)
    w2: np.ndarray  # (C, C/r)
    b2: np.ndarray  # (C,)
    reduction: int = 2

    @property
    def channels(self) -> int:
        return self.w2.shape[0]

    def __post_init__(self):
        c = self.w2.shape[0]
        hidden = self.w1.shape[0]
        if self.reduction < 1 or c % self.reduction != 0:
            raise ValueError(f"reduction {self.reduction} must divide C={c}")
        if hidden != c // self.reduction:
            raise ValueError(f"w1 rows {hidden} != C/r = {c // self.reduction}")
        if self.w1.shape != (hidden, c) or self.w2.shape != (c, hidden):
            raise ValueError("inconsistent excitation weight shapes")
        if self.b1.shape != (hidden,) or self.b2.shape != (c,):
            raise ValueError("inconsistent excitation bias shapes")

    @classmethod
    def zeros(cls, channels: int, reduction: int = 2) -> "SEWeights":
        hidden = channels // reduction
        return cls(
            w1=np.zeros((hidden, channels)),
            b1=np.zeros(hidden),
            w2=np.zeros((channels, hidden)),
            b2=np.zeros(channels),
            reduction=reduction,
        )

    @classmethod
    def random(cls, channels: int, reduction: int = 2, seed: int = 0) -> "SEWeights":
        # seeded uniform in [-0.1, 0.1] for synthetic/test weights
        rng = np.random.default_rng(seed)
        hidden = channels // reduction
        u = lambda *s: rng.uniform(-0.1, 0.1, size=s)
        return cls(u(hidden, channels), u(hidden), u(channels, hidden), u(channels), reduction)

    @classmethod
    def from_bundle(cls, directory, reduction: int = 2) -> "SEWeights":
        t = read_bundle(directory)
        return cls(t["w1"], t["b1"], t["w2"], t["b2"], reduction)

    def to_bundle(self, directory) -> None:
        write_bundle(
            directory,
            {
                "w1": self.w1.astype(np.float32),
                "b1": self.b1.astype(np.float32),
                "w2": self.w2.astype(np.float32),
                "b2": self.b2.astype(np.float32),
            },
        )


@dataclass(frozen=True)
class AttnWeights:
    """Query/key projections plus the scale/shift conditioning matrices."""

    wq: np.ndarray  # (d_qk, d_img)
    wk: np.ndarray  # (d_qk, d_img)
    sft_scale: np.ndarray  # (d_img, C)
    sft_shift: np.ndarray  # (d_img, C)
    d_qk: int = 128

    def __post_init__(self):
        if self.d_qk < 1:
            raise ValueError("d_qk must be >= 1")
        if self.wq.shape[0] != self.d_qk or self.wk.shape[0] != self.d_qk:
            raise ValueError("projection rows must equal d_qk")
        if self.wq.shape != self.wk.shape or self.sft_scale.shape != self.sft_shift.shape:
            raise ValueError("mismatched attention weight shapes")
        for a in (self.wq, self.wk, self.sft_scale, self.sft_shift):
            if not np.all(np.isfinite(a)):
                raise ValueError("attention weights must be finite")

    @classmethod
    def random(cls, d_img: int, channels: int, d_qk: int = 128, seed: int = 0) -> "AttnWeights":
        rng = np.random.default_rng(seed)
        u = lambda *s: rng.uniform(-0.1, 0.1, size=s)
        return cls(u(d_qk, d_img), u(d_qk, d_img), u(d_img, channels), u(d_img, channels), d_qk)

    @classmethod
    def from_bundle(cls, directory) -> "AttnWeights":
        t = read_bundle(directory)
        return cls(t["wq"], t["wk"], t["sft_scale"], t["sft_shift"], d_qk=t["wq"].shape[0])

    def to_bundle(self, directory) -> None:
        write_bundle(
            directory,
            {
                "wq": self.wq.astype(np.float32),
                "wk": self.wk.astype(np.float32),
                "sft_scale": self.sft_scale.astype(np.float32),
                "sft_shift": self.sft_shift.astype(np.float32),
            },
        )


def se_excite(f_lr: FeatureMap, w: SEWeights) -> FeatureMap:
    """Gate channels by a squeezed global descriptor.

    out = f_lr * sigmoid(w2 silu(w1 gap(f_lr) + b1) + b2), the gate being one
    scalar per channel broadcast over all positions. Because the gate lies in
    (0, 1), outputs never exceed inputs in magnitude and keep their sign.
    """
    if f_lr.channels != w.channels:
        raise ValueError(f"channel mismatch: map has {f_lr.channels}, weights {w.channels}")
    squeezed = f_lr.data.astype(np.float64).mean(axis=(1, 2))
    hidden = _silu(w.w1 @ squeezed + w.b1)
    gate = _sigmoid(w.w2 @ hidden + w.b2)
    return FeatureMap((f_lr.data * gate[:, None, None].astype(np.float32)))


def sft_modulate(keys: np.ndarray, excited: FeatureMap, w: AttnWeights) -> np.ndarray:
    """Modulate a key grid with scale/shift conditioned on excited features.

    keys: (d_img, h, w) aligned with the excited map's patch grid.
    Returns keys * (1 + scale) + shift, elementwise per position.
    """
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 3:
        raise ValueError("keys must be d_img x h x w")
    if keys.shape[1:] != (excited.height, excited.width):
        raise ValueError(
            f"grid misalignment: keys {keys.shape[1:]}, excited {(excited.height, excited.width)}"
        )
    ex = excited.data.astype(np.float64)
    scale = np.einsum("dc,chw->dhw", w.sft_scale, ex)
    shift = np.einsum("dc,chw->dhw", w.sft_shift, ex)
    return keys * (1.0 + scale) + shift


def _rope_angles(dim: int, positions: np.ndarray) -> np.ndarray:
    """Per-pair rotation angles for 2-D rotary embedding.

    Pairs alternate between the two axes; pair 2j uses the y coordinate and
    pair 2j+1 the x coordinate, each scaled by a geometric frequency ladder.
    The angle is linear in the coordinate, so relative phase depends only on
    position differences.
    """
    n_pairs = dim // 2
    axis = np.arange(n_pairs) % 2  # 0 -> y, 1 -> x
    freq_idx = np.arange(n_pairs) // 2
    per_axis = np.maximum(1, (n_pairs + 1 - axis) // 2)
    freqs = ROPE_BASE ** (-(freq_idx / per_axis))
    coords = np.where(axis == 0, positions[..., :1], positions[..., 1:2])
    return coords * freqs  # (..., n_pairs)


def rope_embed(grid: np.ndarray, positions: np.ndarray | None = None) -> np.ndarray:
    """Rotate consecutive feature pairs by position-dependent angles.

    grid: (d, h, w) with even d. positions: (h, w, 2) as (y, x); defaults to
    grid coordinates normalized to [0, 1). Position (0, 0) is the identity
    and each pair's norm is preserved exactly.
    """
    grid = np.asarray(grid, dtype=np.float64)
    d, h, w = grid.shape
    if d % 2 != 0:
        raise ValueError(f"feature dim must be even for pair rotation, got {d}")
    if positions is None:
        ys, xs = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
        positions = np.stack([ys, xs], axis=-1)
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (h, w, 2):
        raise ValueError(f"positions must be (h, w, 2), got {positions.shape}")

    angles = _rope_angles(d, positions)  # (h, w, n_pairs)
    cos = np.cos(angles)
    sin = np.sin(angles)
    a = grid[0::2]  # (n_pairs, h, w)
    b = grid[1::2]
    cos = np.moveaxis(cos, -1, 0)
    sin = np.moveaxis(sin, -1, 0)
    out = np.empty_like(grid)
    out[0::2] = a * cos - b * sin
    out[1::2] = a * sin + b * cos
    return out


def cross_attention_upsample(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    hr_shape: tuple[int, int],
) -> tuple[FeatureMap, AttentionMap]:
    """Softmax attention from pixel queries onto token keys.

    queries: (N_hr, d_qk), keys: (N_lr, d_qk), values: (N_lr, C).
    Returns the upsampled map (C, H, W) with H*W = N_hr and the attention
    matrix whose rows sum to 1. Each output pixel is a convex combination of
    value rows.
    """
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    for name, a in (("queries", queries), ("keys", keys), ("values", values)):
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name} contain non-finite values")
    if queries.shape[1] != keys.shape[1]:
        raise ValueError("query/key dims differ")
    if keys.shape[0] != values.shape[0]:
        raise ValueError("key/value counts differ")
    h, w = hr_shape
    if h * w != queries.shape[0]:
        raise ValueError(f"hr_shape {hr_shape} does not cover {queries.shape[0]} queries")

    logits = queries @ keys.T / np.sqrt(keys.shape[1])
    logits -= logits.max(axis=1, keepdims=True)  # stability shift
    expd = np.exp(logits)
    attn = expd / expd.sum(axis=1, keepdims=True)
    f_hr = (attn @ values).T.reshape(values.shape[1], h, w)
    return FeatureMap(f_hr.astype(np.float32)), AttentionMap(attn.astype(np.float32))


def reconstruction_loss(pred: FeatureMap, target: FeatureMap) -> float:
    """Mean (1 - cosine) over pixels plus mean squared element error."""
    if pred.data.shape != target.data.shape:
        raise ValueError(f"shape mismatch: {pred.data.shape} vs {target.data.shape}")
    p = pred.pixels().astype(np.float64)
    t = target.pixels().astype(np.float64)
    np_norm = np.linalg.norm(p, axis=1)
    nt_norm = np.linalg.norm(t, axis=1)
    denom = np_norm * nt_norm
    cos = np.where(denom == 0.0, 0.0, (p * t).sum(axis=1) / np.where(denom == 0.0, 1.0, denom))
    cos = np.clip(cos, -1.0, 1.0)  # roundoff must not push the loss below 0
    cos_term = float(np.mean(1.0 - cos))
    mse = float(np.mean((p - t) ** 2))
    return cos_term + mse
