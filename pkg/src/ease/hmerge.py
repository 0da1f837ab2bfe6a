"""Stage 3: hierarchical agglomerative merging over a segment graph.

A descending threshold sweep batch-merges adjacent segments whose
boundary-gated prototype similarity clears the current threshold,
absorbing undersized segments along the way and recording a snapshot
whenever the partition changes. Snapshots are scored by a blend of
next-merge cost and the Calinski-Harabasz index plus a persistence-gap
bonus, the best N are retained, and each retained level gets a global
(non-adjacent) merge at its own similarity floor plus granularity scores.

The sweep skips threshold steps that provably cannot merge anything
(no current edge similarity reaches them); this is decision-identical
to stepping every value of the grid because batch decisions only read
the step-start graph, and absorption can only trigger on the first step
or after a merge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ease.tensors import FeatureMap, LabelMap, l2_normalize, read_label_map, spatial_gradient, write_array


class UndefinedIndexError(ValueError):
    """Cluster validity index asked for outside its 2 <= K < n domain."""


@dataclass(frozen=True)
class HmConfig:
    theta_hi: float = 0.99
    theta_lo: float = 0.30
    delta: float = 0.001
    beta_bnd: float = 0.0
    min_segment: int = 50
    top_n: int = 40
    level_lambda: float = 0.25
    gap_on_merge_cost: bool = False  # treat 1 - tau as the inter-level cost

    def __post_init__(self):
        if not self.theta_lo < self.theta_hi:
            raise ValueError("need theta_lo < theta_hi")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.min_segment < 1 or self.top_n < 1:
            raise ValueError("min_segment and top_n must be >= 1")

    def taus(self) -> np.ndarray:
        n = int(math.floor((self.theta_hi - self.theta_lo) / self.delta + 1e-9)) + 1
        return self.theta_hi - self.delta * np.arange(n)


@dataclass(frozen=True)
class SegmentGraph:
    """Region adjacency graph: prototypes, areas, and border statistics.

    Edges map (i, j) with i < j (compact 1-based ids) to the accumulated
    (gradient sum, border pair count); boundary strength divides the mean
    by the global gradient maximum, or is 0 everywhere when that maximum
    is 0.
    """

    ids: np.ndarray
    prototypes: np.ndarray
    areas: np.ndarray
    edges: dict
    grad_max: float

    def adjacent(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.edges

    def boundary_strength(self, i: int, j: int) -> float:
        key = (min(i, j), max(i, j))
        if key not in self.edges:
            raise KeyError(f"segments {i} and {j} are not adjacent")
        gsum, count = self.edges[key]
        if self.grad_max == 0.0:
            return 0.0
        return gsum / count / self.grad_max

    def _index(self, i: int) -> int:
        idx = int(np.searchsorted(self.ids, i))
        if idx >= len(self.ids) or self.ids[idx] != i:
            raise KeyError(f"unknown segment id {i}")
        return idx


def build_graph(l: LabelMap, f: FeatureMap, grad) -> SegmentGraph:
    """Adjacency, boundary strength, prototypes, and areas from a label map.

    The map must be compact (foreground ids exactly 1..K); label 0 pixels
    are background and take no part. Boundary strength of an edge is the
    mean over 4-connected border pixel pairs of the pair's mean gradient
    magnitude, normalized by the global maximum magnitude.
    """
    labels = l.labels.astype(np.int64)
    ids = np.unique(labels)
    ids = ids[ids > 0]
    if ids.size == 0:
        raise ValueError("empty foreground")
    if ids[0] != 1 or ids[-1] != len(ids):
        raise ValueError("label map is not compact (expected ids 1..K)")
    if (l.height, l.width) != (f.height, f.width):
        raise ValueError("label map and feature map are not aligned")
    gm = grad.data[0] if isinstance(grad, FeatureMap) else np.asarray(grad, dtype=np.float64)
    if gm.shape != (l.height, l.width):
        raise ValueError("gradient map is not aligned")

    k = len(ids)
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=k + 1)[1:].astype(np.float64)
    protos = np.zeros((k, f.channels))
    for c in range(f.channels):
        protos[:, c] = np.bincount(flat, weights=f.data[c].ravel().astype(np.float64), minlength=k + 1)[1:]
    protos /= areas[:, None]

    edges = _border_stats(labels, gm.astype(np.float64), k)
    return SegmentGraph(
        ids=ids.astype(np.int64),
        prototypes=protos,
        areas=areas,
        edges=edges,
        grad_max=float(gm.max()),
    )


def _border_stats(labels: np.ndarray, gm: np.ndarray, k: int) -> dict:
    """Accumulate (gradient sum, pair count) for 4-connected label borders."""
    all_keys = []
    all_grads = []
    for axis in (0, 1):
        a = labels[:, :-1] if axis == 1 else labels[:-1, :]
        b = labels[:, 1:] if axis == 1 else labels[1:, :]
        ga = gm[:, :-1] if axis == 1 else gm[:-1, :]
        gb = gm[:, 1:] if axis == 1 else gm[1:, :]
        mask = (a != b) & (a > 0) & (b > 0)
        if not mask.any():
            continue
        lo = np.minimum(a[mask], b[mask])
        hi = np.maximum(a[mask], b[mask])
        all_keys.append(lo * (k + 1) + hi)
        all_grads.append(0.5 * (ga[mask] + gb[mask]))
    edges: dict = {}
    if not all_keys:
        return edges
    keys = np.concatenate(all_keys)
    grads = np.concatenate(all_grads)
    uniq, inv = np.unique(keys, return_inverse=True)
    gsum = np.bincount(inv, weights=grads)
    cnt = np.bincount(inv)
    for key, s, c in zip(uniq, gsum, cnt):
        edges[(int(key // (k + 1)), int(key % (k + 1)))] = (float(s), int(c))
    return edges


def effective_similarity(g: SegmentGraph, i: int, j: int, beta_bnd: float) -> float:
    """Boundary-gated cosine of two segment prototypes; 0 when non-adjacent."""
    ia, ib = g._index(i), g._index(j)
    if not g.adjacent(i, j):
        return 0.0
    pa, pb = g.prototypes[ia], g.prototypes[ib]
    na, nb = np.linalg.norm(pa), np.linalg.norm(pb)
    cos = 0.0 if na == 0.0 or nb == 0.0 else float(pa @ pb / (na * nb))
    return cos - beta_bnd * g.boundary_strength(i, j)


@dataclass(frozen=True)
class HierarchySnapshot:
    labels: LabelMap
    tau: float  # threshold that produced this level (its inter-level cost)
    k: int
    tau_floor: float  # min pairwise similarity among this level's merges
    gap: bool = False


@dataclass
class HierarchyLevel:
    snapshot: HierarchySnapshot
    score: float
    cost_hat: float
    ch_hat: float
    bonus: float
    merged: LabelMap | None = None  # labels after the per-level global merge
    granularity: tuple[float, float] | None = None

    @property
    def labels(self) -> LabelMap:
        return self.merged if self.merged is not None else self.snapshot.labels

    @property
    def k(self) -> int:
        return len(self.labels.segment_ids())


class _Roots:
    """Union-find whose root is always the smallest member index."""

    def __init__(self, n: int):
        self.parent = np.arange(n)

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return int(root)

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


class _SweepState:
    """Contracted segment graph maintained across threshold steps."""

    def __init__(self, graph: SegmentGraph):
        self.uf = _Roots(len(graph.ids) + 1)  # index by 1-based segment id
        self.area = {int(i): float(a) for i, a in zip(graph.ids, graph.areas)}
        self.proto = {int(i): graph.prototypes[n].copy() for n, i in enumerate(graph.ids)}
        self.edges = {k: list(v) for k, v in graph.edges.items()}
        self.grad_max = graph.grad_max
        self.k0 = len(graph.ids)

    def roots(self):
        return sorted(self.area)

    def cosines(self):
        """Raw prototype cosine per edge, zero-norm guarded."""
        out = {}
        for (a, b) in self.edges:
            pa, pb = self.proto[a], self.proto[b]
            na, nb = np.linalg.norm(pa), np.linalg.norm(pb)
            out[(a, b)] = 0.0 if na == 0.0 or nb == 0.0 else float(pa @ pb / (na * nb))
        return out

    def similarities(self, beta_bnd: float):
        cos = self.cosines()
        if beta_bnd == 0.0 or self.grad_max == 0.0:
            return cos  # gate contributes nothing (zero weight or zero max)
        out = {}
        for key, c in cos.items():
            gsum, count = self.edges[key]
            out[key] = c - beta_bnd * (gsum / count / self.grad_max)
        return out

    def _merge_groups(self, groups: list[list[int]]) -> None:
        """Union each group; prototypes become area-weighted means of the
        current members, accumulated in ascending id order."""
        for members in groups:
            members = sorted(members)
            root = members[0]
            for m in members[1:]:
                self.uf.union(root, m)
            root = self.uf.find(root)
            weights = np.array([self.area[m] for m in members])
            vecs = np.stack([self.proto[m] for m in members])
            total = weights.sum()
            merged = (weights[:, None] * vecs).sum(axis=0) / total
            for m in members:
                if m != root:
                    del self.area[m], self.proto[m]
            self.area[root] = float(total)
            self.proto[root] = merged
        self._contract_edges()

    def _contract_edges(self) -> None:
        new_edges: dict = {}
        for (a, b), (gsum, count) in self.edges.items():
            ra, rb = self.uf.find(a), self.uf.find(b)
            if ra == rb:
                continue
            key = (min(ra, rb), max(ra, rb))
            if key in new_edges:
                new_edges[key][0] += gsum
                new_edges[key][1] += count
            else:
                new_edges[key] = [gsum, count]
        self.edges = new_edges

    def batch_merge(self, tau: float, beta_bnd: float, sims=None):
        """Merge every adjacent pair whose similarity clears tau, in one batch."""
        if sims is None:
            sims = self.similarities(beta_bnd)
        hot = [(key, s) for key, s in sims.items() if s >= tau]
        if not hot:
            return False, None
        uf = _Roots(self.k0 + 1)
        for (a, b), _ in hot:
            uf.union(a, b)
        groups: dict[int, list[int]] = {}
        for (a, b), _ in hot:
            for m in (a, b):
                g = groups.setdefault(uf.find(m), [])
                if m not in g:
                    g.append(m)
        self._merge_groups(list(groups.values()))
        return True, min(s for _, s in hot)

    def absorb_small(self, m: int) -> bool:
        """Fold sub-m segments into their most cosine-similar neighbor.

        Smallest area first (ties to the smaller id); neighbor ties prefer
        the larger area, then the smaller id. Segments with no neighbors are
        left alone, as is a lone final segment.
        """
        changed = False
        while True:
            roots = self.roots()
            if len(roots) <= 1:
                break
            neighbors: dict[int, list[int]] = {}
            for (a, b) in self.edges:
                neighbors.setdefault(a, []).append(b)
                neighbors.setdefault(b, []).append(a)
            small = [r for r in roots if self.area[r] < m and r in neighbors]
            if not small:
                break
            small.sort(key=lambda r: (self.area[r], r))
            r = small[0]
            best, best_key = None, None
            pr = self.proto[r]
            nr = np.linalg.norm(pr)
            for nb in neighbors[r]:
                pn = self.proto[nb]
                nn = np.linalg.norm(pn)
                cos = 0.0 if nr == 0.0 or nn == 0.0 else float(pr @ pn / (nr * nn))
                key = (cos, self.area[nb], -nb)
                if best_key is None or key > best_key:
                    best, best_key = nb, key
            self._merge_groups([[r, best]])
            changed = True
        return changed

    def count(self) -> int:
        return len(self.area)

    def label_map(self, base: LabelMap) -> LabelMap:
        """Current partition as a compact map (new ids rank the min member)."""
        roots = self.roots()
        rank = {r: n + 1 for n, r in enumerate(roots)}
        lut = np.zeros(self.k0 + 1, dtype=np.uint32)
        for i in range(1, self.k0 + 1):
            lut[i] = rank[self.uf.find(i)]
        return LabelMap(lut[base.labels])


def persistence_gap_flags(costs, on_merge_cost: bool = False) -> list[bool]:
    """Flag levels whose inter-level cost exceeds 3x the running average
    of all preceding levels' costs. The first level is never a gap."""
    flags = []
    seen: list[float] = []
    for tau in costs:
        cost = 1.0 - tau if on_merge_cost else tau
        flags.append(bool(seen) and cost > 3.0 * (sum(seen) / len(seen)))
        seen.append(cost)
    return flags


def sweep_merge(
    l0: LabelMap,
    f: FeatureMap,
    cfg: HmConfig = HmConfig(),
    grad=None,
) -> list[HierarchySnapshot]:
    """Run the descending-threshold batch merge, fine to coarse.

    Returns one snapshot per threshold step that changed the partition.
    tau_floor records the minimum similarity among that step's threshold
    merges (absorptions are cleanup and excluded; an absorption-only step
    falls back to the producing tau). A single-segment input yields an
    empty history.
    """
    base = l0.compact()
    ids = base.segment_ids()
    if len(ids) <= 1:
        return []
    if grad is None:
        grad = spatial_gradient(f)
    graph = build_graph(base, f, grad)
    state = _SweepState(graph)

    taus = cfg.taus()
    neg_taus = -taus  # ascending, for exact grid search
    history: list[HierarchySnapshot] = []
    recorded_taus: list[float] = []
    t = 0
    first = True
    sims = None
    while t < len(taus):
        if not first:
            if not state.edges or state.count() <= 1:
                break
            sims = state.similarities(cfg.beta_bnd)
            max_s = max(sims.values())
            jump = int(np.searchsorted(neg_taus, -max_s, side="left"))
            if jump >= len(taus):  # nothing left in range can merge
                break
            t = max(t, jump)
            if t >= len(taus):
                break
        tau = float(taus[t])
        before = state.count()
        merged, floor = state.batch_merge(tau, cfg.beta_bnd, sims)
        state.absorb_small(cfg.min_segment)
        if state.count() != before:
            flags = persistence_gap_flags(recorded_taus + [tau], cfg.gap_on_merge_cost)
            history.append(
                HierarchySnapshot(
                    labels=state.label_map(base),
                    tau=tau,
                    k=state.count(),
                    tau_floor=float(floor) if floor is not None else tau,
                    gap=flags[-1],
                )
            )
            recorded_taus.append(tau)
        t += 1
        first = False
    return history


def ch_index(l: LabelMap, f_normed: FeatureMap) -> float:
    """Between/within dispersion ratio over foreground pixels.

    Expects unit-normalized pixel features. Defined for 2 <= K < n; perfect
    clusters (zero within-dispersion) return +inf, which ranks above every
    finite score.
    """
    mask = l.labels.ravel() > 0
    n = int(mask.sum())
    labels = l.labels.ravel()[mask].astype(np.int64)
    ids = np.unique(labels)
    k = len(ids)
    if k < 2 or k >= n:
        raise UndefinedIndexError(f"index needs 2 <= K < n, got K={k}, n={n}")
    x = f_normed.pixels().astype(np.float64)[mask]
    grand = x.mean(axis=0)
    between = 0.0
    within = 0.0
    for i in ids:
        pts = x[labels == i]
        c = pts.mean(axis=0)
        between += len(pts) * float(((c - grand) ** 2).sum())
        within += float(((pts - c) ** 2).sum())
    if within == 0.0:
        return float("inf")
    return (between / (k - 1)) / (within / (n - k))


def score_levels(
    history: list[HierarchySnapshot],
    f: FeatureMap,
    level_lambda: float = 0.25,
) -> list[HierarchyLevel]:
    """Blend normalized next-merge cost with the normalized validity index.

    The next-merge cost of level i is 1 - tau_{i+1} (the next recorded
    level's producing threshold); the coarsest level takes the maximum cost
    of the others, and a lone snapshot normalizes against itself. Undefined
    validity values contribute 0; +inf sentinels pin the normalized score of
    their level to 1 and every finite level to 0.
    """
    if not history:
        raise ValueError("empty history")
    fn = l2_normalize(f)
    raw_ch = []
    for snap in history:
        try:
            raw_ch.append(ch_index(snap.labels, fn))
        except UndefinedIndexError:
            raw_ch.append(0.0)
    ch_hat = _normalize_scores(raw_ch)

    m = len(history)
    if m == 1:
        costs = [1.0]
    else:
        costs = [1.0 - history[i + 1].tau for i in range(m - 1)]
        costs.append(max(costs))
    cmax = max(costs)
    cost_hat = [c / cmax if cmax > 0 else 0.0 for c in costs]

    levels = []
    for snap, c_hat, v_hat in zip(history, cost_hat, ch_hat):
        bonus = 0.2 if snap.gap else 0.0
        s = (1.0 - level_lambda) * c_hat + level_lambda * v_hat + bonus
        levels.append(HierarchyLevel(snapshot=snap, score=s, cost_hat=c_hat, ch_hat=v_hat, bonus=bonus))
    return levels


def _normalize_scores(raw: list[float]) -> list[float]:
    if any(math.isinf(v) for v in raw):
        return [1.0 if math.isinf(v) else 0.0 for v in raw]
    top = max(raw)
    if top <= 0.0:
        return [0.0 for _ in raw]
    return [v / top for v in raw]


def select_top_n(levels: list[HierarchyLevel], n: int) -> list[HierarchyLevel]:
    """Best-scoring levels, ties broken toward the finer partition."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ranked = sorted(levels, key=lambda lv: (-lv.score, -lv.snapshot.k))
    return ranked[:n]


def global_merge(l: LabelMap, f: FeatureMap, tau_floor: float) -> LabelMap:
    """Union non-adjacent segment pairs whose prototype cosine reaches the
    floor; relabel by union roots.

    Adjacent pairs are excluded: the threshold sweep already decided those
    under the boundary gate, and re-merging them on raw cosine would undo
    the gating. This step only unifies spatially disconnected segments the
    sweep could never reach.
    """
    labels = l.labels.astype(np.int64)
    ids = np.unique(labels)
    ids = ids[ids > 0]
    if len(ids) <= 1:
        return l
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=int(ids[-1]) + 1).astype(np.float64)
    protos = np.zeros((int(ids[-1]) + 1, f.channels))
    for c in range(f.channels):
        protos[:, c] = np.bincount(flat, weights=f.data[c].ravel().astype(np.float64), minlength=int(ids[-1]) + 1)
    protos[ids] /= areas[ids, None]

    normed = protos[ids]
    norms = np.linalg.norm(normed, axis=1, keepdims=True)
    normed = normed / np.where(norms == 0.0, 1.0, norms)
    sims = normed @ normed.T

    adjacent = set()
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        mask = (a != b) & (a > 0) & (b > 0)
        if mask.any():
            lo = np.minimum(a[mask], b[mask])
            hi = np.maximum(a[mask], b[mask])
            adjacent.update(zip(lo.tolist(), hi.tolist()))

    uf = _Roots(int(ids[-1]) + 1)
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            if (int(ids[a]), int(ids[b])) in adjacent:
                continue
            if sims[a, b] >= tau_floor:
                uf.union(int(ids[a]), int(ids[b]))
    roots = sorted({uf.find(int(i)) for i in ids})
    rank = {r: n + 1 for n, r in enumerate(roots)}
    lut = np.zeros(int(ids[-1]) + 1, dtype=np.uint32)
    for i in ids:
        lut[int(i)] = rank[uf.find(int(i))]
    return LabelMap(lut[labels])


def granularity_scores(l: LabelMap, f: FeatureMap):
    """Level-wise (G_scale, G_sem); None when K <= 2 (not computed).

    G_scale is the mean segment-area share. G_sem averages each segment's
    capped feature-range ratio: the mean per-channel (max - min) inside the
    segment over the same spread across all foreground, clipped at 1. A zero
    foreground spread gives G_sem = 0.
    """
    labels = l.labels
    ids = np.unique(labels)
    ids = ids[ids > 0]
    k = len(ids)
    if k <= 2:
        return None
    mask = labels > 0
    pixels = f.pixels().astype(np.float64)
    fg = pixels[mask.ravel()]
    psi_fg = float((fg.max(axis=0) - fg.min(axis=0)).mean())
    areas = np.array([(labels == i).sum() for i in ids], dtype=np.float64)
    total = areas.sum()
    g_scale = float(np.mean(areas / total))
    if psi_fg == 0.0:
        return g_scale, 0.0
    ratios = []
    for i in ids:
        seg = pixels[(labels == i).ravel()]
        psi = float((seg.max(axis=0) - seg.min(axis=0)).mean())
        ratios.append(min(psi / psi_fg, 1.0))
    return g_scale, float(np.mean(ratios))


def build_hierarchy(
    l0: LabelMap,
    f: FeatureMap,
    cfg: HmConfig = HmConfig(),
) -> list[HierarchyLevel]:
    """Full stage: sweep, score, retain top N, per-level global merge,
    granularity annotation. Empty when the input has a single segment."""
    history = sweep_merge(l0, f, cfg)
    if not history:
        return []
    levels = select_top_n(score_levels(history, f, cfg.level_lambda), cfg.top_n)
    for lv in levels:
        lv.merged = global_merge(lv.snapshot.labels, f, lv.snapshot.tau_floor)
        lv.granularity = granularity_scores(lv.merged, f)
    return levels


def write_hierarchy(directory, levels: list[HierarchyLevel]) -> None:
    """One label-map tensor per level plus a key=value manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, lv in enumerate(levels):
        fname = f"level_{i:03d}.tns"
        write_array(directory / fname, lv.labels.labels)
        g_scale, g_sem = lv.granularity if lv.granularity is not None else (None, None)
        parts = [
            f"level={i:03d}",
            f"file={fname}",
            f"tau={lv.snapshot.tau:.6f}",
            f"k={lv.k}",
            f"score={lv.score:.9f}",
            f"tau_floor={lv.snapshot.tau_floor:.9f}",
            f"g_scale={'none' if g_scale is None else f'{g_scale:.9f}'}",
            f"g_sem={'none' if g_sem is None else f'{g_sem:.9f}'}",
            f"gap={int(lv.snapshot.gap)}",
        ]
        lines.append(" ".join(parts))
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_hierarchy(directory) -> list[HierarchyLevel]:
    directory = Path(directory)
    levels = []
    for line in (directory / "manifest.txt").read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        kv = dict(part.split("=", 1) for part in line.split())
        labels = read_label_map(directory / kv["file"])
        snap = HierarchySnapshot(
            labels=labels,
            tau=float(kv["tau"]),
            k=int(kv["k"]),
            tau_floor=float(kv["tau_floor"]),
            gap=bool(int(kv["gap"])),
        )
        gran = None
        if kv["g_scale"] != "none":
            gran = (float(kv["g_scale"]), float(kv["g_sem"]))
        levels.append(
            HierarchyLevel(
                snapshot=snap,
                score=float(kv["score"]),
                cost_hat=0.0,
                ch_hat=0.0,
                bonus=0.0,
                merged=labels,
                granularity=gran,
            )
        )
    return levels
