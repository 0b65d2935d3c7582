"""Affinity-based instance segmentation: affinity construction from labels,
seeded watershed over the affinity graph, and hierarchical agglomeration.

An affinity map has shape (3, D, H, W): channel c holds the affinity between
each voxel and its negative-direction neighbor along axis c (z, y, x), so
entries on the low-index face of each axis are fixed to zero. Flood ordering
and all tie-breaks are fully pinned to keep outputs bit-reproducible.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .volume import LabelVolume, Volume3D


@dataclass
class AffinityMap:
    """Neighbor affinities in [0, 1], shape (3, D, H, W)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise ValueError(f"affinity map must be (3, D, H, W), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("affinity map contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("affinities must lie in [0, 1]")

    @property
    def vol_shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def to_volume(self) -> Volume3D:
        """Channel-last volume view for `.vol` round-trips."""
        return Volume3D(np.moveaxis(self.data, 0, -1))

    @classmethod
    def from_volume(cls, vol: Volume3D) -> "AffinityMap":
        if vol.channels != 3:
            raise ValueError(f"affinity volume needs 3 channels, got {vol.channels}")
        return cls(np.moveaxis(vol.data, -1, 0))


@dataclass
class Segmentation:
    labels: LabelVolume
    merge_history: list[tuple[int, int, float]]


def affinity_from_labels(labels: LabelVolume) -> AffinityMap:
    """Binary ground-truth affinities: 1 iff both voxels share a nonzero label."""
    lab = labels.data
    aff = np.zeros((3,) + lab.shape, dtype=np.float64)
    for c in range(3):
        sl_hi = [slice(None)] * 3
        sl_lo = [slice(None)] * 3
        sl_hi[c] = slice(1, None)
        sl_lo[c] = slice(None, -1)
        hi, lo = lab[tuple(sl_hi)], lab[tuple(sl_lo)]
        same = (hi == lo) & (hi > 0)
        aff[(c,) + tuple(sl_hi)] = same.astype(np.float64)
    return AffinityMap(aff)


def _edge_arrays(aff: AffinityMap) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All graph edges as (voxel_index, neighbor_index, weight) flat arrays.

    The edge for channel c at voxel v connects v to its neighbor at v - 1
    along axis c; voxels on the low face contribute no edge for that axis.
    """
    d, h, w = aff.vol_shape
    strides = np.array([h * w, w, 1], dtype=np.int64)
    us, vs, ws = [], [], []
    idx = np.arange(d * h * w, dtype=np.int64).reshape(d, h, w)
    for c in range(3):
        sl = [slice(None)] * 3
        sl[c] = slice(1, None)
        hi = idx[tuple(sl)].ravel()
        us.append(hi)
        vs.append(hi - strides[c])
        ws.append(aff.data[(c,) + tuple(sl)].ravel())
    return np.concatenate(us), np.concatenate(vs), np.concatenate(ws)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the smaller index as root for deterministic ids
            if ra < rb:
                self.parent[rb] = ra
            else:
                self.parent[ra] = rb


def watershed_fragments(aff: AffinityMap, seed_threshold: float,
                        bias: float) -> LabelVolume:
    """Seeded watershed: strong-edge components seed, the rest floods downhill.

    Seeds are the connected components of edges with affinity >= seed_threshold.
    Unseeded voxels are attached by a max-affinity priority flood (ties broken
    by lower voxel linear index, then lower source index). A voxel whose
    maximum incident affinity is below `bias` stays background.
    """
    if not (0.0 <= seed_threshold <= 1.0 and 0.0 <= bias <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    shape = aff.vol_shape
    n = int(np.prod(shape))
    us, vs, ws = _edge_arrays(aff)

    max_aff = np.zeros(n)
    np.maximum.at(max_aff, us, ws)
    np.maximum.at(max_aff, vs, ws)

    uf = _UnionFind(n)
    strong = ws >= seed_threshold
    for u, v in zip(us[strong], vs[strong]):
        uf.union(int(u), int(v))

    labels = np.zeros(n, dtype=np.int64)
    seeded = np.zeros(n, dtype=bool)
    seed_voxels = np.unique(np.concatenate([us[strong], vs[strong]])) \
        if strong.any() else np.array([], dtype=np.int64)
    root_to_id: dict[int, int] = {}
    for v in seed_voxels:  # ascending order -> component ids follow min index
        root = uf.find(int(v))
        if root not in root_to_id:
            root_to_id[root] = len(root_to_id) + 1
        labels[v] = root_to_id[root]
        seeded[v] = True

    # adjacency as CSR-style arrays for the flood
    deg = np.zeros(n, dtype=np.int64)
    np.add.at(deg, us, 1)
    np.add.at(deg, vs, 1)
    starts = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(deg, out=starts[1:])
    nbr = np.empty(starts[-1], dtype=np.int64)
    nbr_w = np.empty(starts[-1])
    cursor = starts[:-1].copy()
    for u, v, w in zip(us, vs, ws):
        nbr[cursor[u]] = v
        nbr_w[cursor[u]] = w
        cursor[u] += 1
        nbr[cursor[v]] = u
        nbr_w[cursor[v]] = w
        cursor[v] += 1

    heap: list[tuple[float, int, int]] = []
    for v in seed_voxels:
        for j in range(starts[v], starts[v + 1]):
            t = nbr[j]
            if not seeded[t]:
                heapq.heappush(heap, (-nbr_w[j], int(t), int(v)))
    assigned = seeded.copy()
    while heap:
        neg_w, target, source = heapq.heappop(heap)
        if assigned[target]:
            continue
        if max_aff[target] < bias:
            continue
        labels[target] = labels[source]
        assigned[target] = True
        for j in range(starts[target], starts[target + 1]):
            t = nbr[j]
            if not assigned[t]:
                heapq.heappush(heap, (-nbr_w[j], int(t), target))
    return LabelVolume(labels.reshape(shape))


def agglomerate(fragments: LabelVolume, aff: AffinityMap, threshold: float,
                *, quantile: float | None = None) -> Segmentation:
    """Hierarchical agglomeration of watershed fragments on the affinity graph.

    Region pairs are scored by the mean affinity over their contact surface
    (or by the `quantile` of contact affinities when given). The best pair
    merges while its score >= threshold; the merged region keeps the smaller
    id and its contacts are rescored from the pooled edge set. Equal scores
    break toward the smaller (id_a, id_b).
    """
    frag = fragments.data.ravel()
    us, vs, ws = _edge_arrays(aff)
    la, lb = frag[us], frag[vs]
    inter = (la > 0) & (lb > 0) & (la != lb)

    contacts: dict[tuple[int, int], list[float]] = {}
    for a, b, w in zip(la[inter], lb[inter], ws[inter]):
        key = (int(min(a, b)), int(max(a, b)))
        contacts.setdefault(key, []).append(float(w))

    def score(values: list[float]) -> float:
        if quantile is None:
            return float(np.mean(values))
        return float(np.quantile(values, quantile))

    ids = {int(i) for i in np.unique(frag) if i > 0}
    parent = {i: i for i in ids}

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    neighbors: dict[int, set[int]] = {i: set() for i in ids}
    scores: dict[tuple[int, int], float] = {}
    heap: list[tuple[float, int, int]] = []
    for (a, b), vals in sorted(contacts.items()):
        s = score(vals)
        scores[(a, b)] = s
        neighbors[a].add(b)
        neighbors[b].add(a)
        heapq.heappush(heap, (-s, a, b))

    history: list[tuple[int, int, float]] = []
    while heap:
        neg_s, a, b = heapq.heappop(heap)
        s = -neg_s
        if s < threshold:
            break
        key = (a, b)
        if find(a) != a or find(b) != b or key not in scores:
            continue  # stale entry
        if scores[key] != s:
            continue
        history.append((a, b, s))
        keep, drop = (a, b) if a < b else (b, a)
        parent[drop] = keep
        del scores[key]
        neighbors[keep].discard(drop)
        neighbors[drop].discard(keep)
        for other in sorted(neighbors[drop]):
            neighbors[other].discard(drop)
            old = (min(drop, other), max(drop, other))
            vals = contacts.pop(old)
            new = (min(keep, other), max(keep, other))
            scores.pop(old, None)
            if new in contacts:
                contacts[new] = contacts[new] + vals
            else:
                contacts[new] = vals
                neighbors[keep].add(other)
                neighbors[other].add(keep)
            s_new = score(contacts[new])
            scores[new] = s_new
            heapq.heappush(heap, (-s_new, new[0], new[1]))
        neighbors[drop] = set()

    root = {i: find(i) for i in ids}
    lut = np.zeros(int(frag.max()) + 1 if frag.size else 1, dtype=np.int64)
    for i, r in root.items():
        lut[i] = r
    merged = lut[frag].reshape(fragments.shape)
    return Segmentation(LabelVolume(merged), history)
