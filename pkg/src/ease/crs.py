"""Stage 1: prototype cue discovery by cross-resolution seeding.

Seeds one prototype per low-resolution token from its best-matching
high-resolution pixel, then iteratively shrinks the dictionary by
cross-tabulating attention groups against semantic assignments and
averaging near-duplicate prototypes within each group.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ease.tensors import AttentionMap, FeatureMap, normalized_rows


@dataclass(frozen=True)
class PrototypeDict:
    """K x C cue vectors plus liveness flags (compacted dictionaries are all live)."""

    vectors: np.ndarray
    alive: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"prototype matrix must be K x C with K >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("prototypes must be finite")
        alive = self.alive
        if alive is None:
            alive = np.ones(v.shape[0], dtype=bool)
        alive = np.ascontiguousarray(alive, dtype=bool)
        if alive.shape != (v.shape[0],):
            raise ValueError("alive flags must have one entry per prototype")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "alive", alive)

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    @property
    def channels(self) -> int:
        return self.vectors.shape[1]


def seed_dictionary(f_lr: FeatureMap, f_hr: FeatureMap) -> PrototypeDict:
    """One prototype per LR token: the HR pixel most cosine-similar to it."""
    if f_lr.channels != f_hr.channels:
        raise ValueError(f"channel mismatch: {f_lr.channels} vs {f_hr.channels}")
    tokens = f_lr.pixels()
    hr = f_hr.pixels()
    if tokens.shape[0] == 0 or hr.shape[0] == 0:
        raise ValueError("empty feature map")
    sims = normalized_rows(tokens) @ normalized_rows(hr).T
    best = sims.argmax(axis=1)
    return PrototypeDict(hr[best].astype(np.float64))


def quantize_scores(scores: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lowest index."""
    return np.asarray(scores).argmax(axis=1)


def quantize_labels(x, d: PrototypeDict) -> np.ndarray:
    """Assign each row of x to a prototype index.

    Feature input (N x C array): score = cosine against each prototype.
    Attention input (AttentionMap of per-prototype pooled columns): the row
    entries are the scores directly.
    """
    if d.k < 1:
        raise ValueError("empty dictionary")
    if isinstance(x, AttentionMap):
        if x.n_lr != d.k:
            raise ValueError(f"pooled attention has {x.n_lr} columns for {d.k} prototypes")
        return quantize_scores(x.rows)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != d.channels:
        raise ValueError(f"expected N x {d.channels} features, got {x.shape}")
    sims = normalized_rows(x) @ normalized_rows(d.vectors).T
    return quantize_scores(sims)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:  # path compression
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra  # keep the smaller index as root


def merge_prototypes(
    s_labels: np.ndarray,
    r_labels: np.ndarray,
    d: PrototypeDict,
    tau: float,
) -> PrototypeDict:
    """Shrink the dictionary using semantic (S) and attention (R) assignments.

    Drops prototypes with no pixels under S, maps each survivor to the mode
    of R over its pixels (ties to the smaller group id), and within each
    group merges prototypes whose pairwise cosine exceeds tau. Merging is
    transitively closed and each merged vector is the unweighted mean of its
    members; output order follows each group's smallest original index.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    s = np.asarray(s_labels).ravel()
    r = np.asarray(r_labels).ravel()
    if s.shape != r.shape:
        raise ValueError(f"S/R shape mismatch: {s.shape} vs {r.shape}")
    if s.size and (s.max() >= d.k or r.max() >= d.k):
        raise ValueError("label id exceeds dictionary size")

    counts = np.bincount(s, minlength=d.k)
    survivors = np.flatnonzero(counts > 0)
    if survivors.size == 0:
        raise ValueError("no prototype received a pixel assignment")

    dominant = {}
    for k in survivors:
        groups = np.bincount(r[s == k], minlength=d.k)
        dominant[int(k)] = int(groups.argmax())  # argmax tie -> smaller id

    uf = _UnionFind(d.k)
    normed = normalized_rows(d.vectors)
    for gi, a in enumerate(survivors):
        for b in survivors[gi + 1 :]:
            if dominant[int(a)] != dominant[int(b)]:
                continue
            if float(normed[a] @ normed[b]) > tau:
                uf.union(int(a), int(b))

    groups: dict[int, list[int]] = {}
    for k in survivors:
        groups.setdefault(uf.find(int(k)), []).append(int(k))
    ordered = sorted(groups.values(), key=min)
    merged = np.stack([d.vectors[members].mean(axis=0) for members in ordered])
    return PrototypeDict(merged)


def crs_refine(
    f_lr: FeatureMap,
    f_hr: FeatureMap,
    a: AttentionMap,
    tau: float = 0.97,
    max_iters: int | None = None,
) -> PrototypeDict:
    """Iterate seed/quantize/merge until the dictionary stops shrinking.

    Each round recomputes the attention grouping R (argmax over per-prototype
    pooled attention columns), the semantic grouping S (nearest prototype of
    each HR pixel), and merges. Stops as soon as a round fails to strictly
    shrink the dictionary, returning the last strictly-smaller one; the size
    is a strictly decreasing positive integer, so at most N_lr rounds run.
    """
    tokens = f_lr.pixels()
    if a.n_lr != tokens.shape[0]:
        raise ValueError(f"attention has {a.n_lr} columns for {tokens.shape[0]} tokens")
    d = seed_dictionary(f_lr, f_hr)
    hr = f_hr.pixels()
    it = 0
    while max_iters is None or it < max_iters:
        token_groups = quantize_labels(tokens, d)
        onehot = np.zeros((tokens.shape[0], d.k))
        onehot[np.arange(tokens.shape[0]), token_groups] = 1.0
        pooled = a.rows.astype(np.float64) @ onehot
        r = quantize_scores(pooled)
        s = quantize_labels(hr, d)
        d_next = merge_prototypes(s, r, d, tau)
        if d_next.k >= d.k:
            return d
        d = d_next
        it += 1
    return d
