"""Layered neighbor sampling producing source-sorted mini-batches.

A mini-batch is the layered computational graph for one training step:
``layer_vertices[L]`` are the target vertices, ``layer_vertices[0]`` the
outermost frontier, and ``layer_edges[l]`` connects layer ``l`` sources to
layer ``l+1`` destinations in local ids, sorted by source.

Fanouts are ordered target-outward: ``fanouts[0]`` is the number of
in-neighbors each *target* draws, ``fanouts[1]`` the next hop, and so on.

Neighbor draws use a counter-based generator keyed by
(seed, nonce, layer, vertex), so a vertex samples the same neighbors in a
given iteration no matter which worker processes it or what batch it lands
in. This is what makes parallel samplers and re-partitioned batches agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Graph

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(x: int) -> int:
    """splitmix64 finalizer."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def _stream_key(seed: int, nonce: int, layer: int, vertex: int) -> int:
    k = _mix64((seed & _MASK64) ^ 0xD1B54A32D192ED03)
    k = _mix64(k ^ (nonce & _MASK64))
    k = _mix64(k ^ (layer & _MASK64))
    return _mix64(k ^ (vertex & _MASK64))


def _stream_draw(key: int, j: int) -> int:
    return _mix64((key + (j + 1) * _GOLDEN) & _MASK64)


def _choose_without_replacement(key: int, population: int, k: int) -> list[int]:
    # Partial Fisher-Yates over an implicit range, sparse swap table.
    swapped: dict[int, int] = {}
    picked = []
    for j in range(k):
        r = j + _stream_draw(key, j) % (population - j)
        vj = swapped.get(j, j)
        picked.append(swapped.get(r, r))
        swapped[r] = vj
    return picked


@dataclass
class SamplerConfig:
    fanouts: list[int]
    batch_size: int
    seed: int = 0

    def __post_init__(self):
        if not self.fanouts or any(f <= 0 for f in self.fanouts):
            raise ValueError("fanouts must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class MiniBatch:
    """Layered sampled topology with local<->global maps and sorted edges."""

    num_layers: int
    layer_vertices: list[np.ndarray]  # [L+1]; position = local id, value = global id
    layer_edges: list[np.ndarray]  # [L]; (E,2) int64 [src_local, dst_local], src-sorted
    gcn_norms: list[np.ndarray]  # [L]; per-edge 1/sqrt(D(src)*D(dst)), D = in-degree+1
    self_src: list[np.ndarray]  # [L]; each dst's own local id in the previous layer
    target_labels: np.ndarray

    @property
    def num_targets(self) -> int:
        return int(self.layer_vertices[self.num_layers].size)

    def num_vertices_at(self, layer: int) -> int:
        return int(self.layer_vertices[layer].size)

    def total_edges(self) -> int:
        return int(sum(e.shape[0] for e in self.layer_edges))

    def validate(self) -> None:
        L = self.num_layers
        if len(self.layer_vertices) != L + 1 or len(self.layer_edges) != L:
            raise ValueError("layer array lengths inconsistent with num_layers")
        for l in range(L):
            edges = self.layer_edges[l]
            n_src = self.layer_vertices[l].size
            n_dst = self.layer_vertices[l + 1].size
            if edges.size:
                if edges[:, 0].min() < 0 or edges[:, 0].max() >= n_src:
                    raise ValueError(f"layer {l} edge source out of range")
                if edges[:, 1].min() < 0 or edges[:, 1].max() >= n_dst:
                    raise ValueError(f"layer {l} edge destination out of range")
                if np.any(np.diff(edges[:, 0]) < 0):
                    raise ValueError(f"layer {l} edges not sorted by source")
            if not np.isin(self.layer_vertices[l + 1], self.layer_vertices[l]).all():
                raise ValueError(f"layer {l + 1} vertices not a subset of layer {l}")
            # every destination carries its self-edge
            has_self = np.zeros(n_dst, dtype=bool)
            self_mask = edges[:, 0] == self.self_src[l][edges[:, 1]]
            has_self[edges[self_mask, 1]] = True
            if not has_self.all():
                raise ValueError(f"layer {l} missing self-edges")


def _sample_in_neighbors(g: Graph, vertex: int, fanout: int, seed: int,
                         nonce: int, layer: int) -> np.ndarray:
    """Draw min(fanout, in-degree) distinct in-neighbors of one vertex.

    Parallel edges collapse to one candidate; draws are uniform without
    replacement over the distinct neighbor values.
    """
    row = g.in_neighbors(vertex)
    candidates = np.unique(row)
    if candidates.size <= fanout:
        return candidates
    key = _stream_key(seed, nonce, layer, vertex)
    picks = _choose_without_replacement(key, int(candidates.size), fanout)
    return candidates[np.asarray(picks, dtype=np.int64)]


def sample_minibatch(g: Graph, targets, cfg: SamplerConfig, iteration_nonce: int) -> MiniBatch:
    """Sample the layered neighborhood of the target vertices.

    Layer l-1 vertices are laid out with layer l's vertices as a prefix in
    the same order, followed by newly discovered vertices sorted by global
    id. Each destination gets a self-edge (deduplicated against a sampled
    graph self-loop) so the aggregation kernels see N(v) plus v explicitly.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("targets must be non-empty")
    if targets.min() < 0 or targets.max() >= g.num_vertices:
        raise ValueError("target id out of range")
    if np.unique(targets).size != targets.size:
        raise ValueError("targets must be distinct")

    L = len(cfg.fanouts)
    in_deg = g.in_degrees()
    layer_vertices: list[np.ndarray] = [np.empty(0, np.int64)] * (L + 1)
    layer_edges: list[np.ndarray] = [np.empty((0, 2), np.int64)] * L
    gcn_norms: list[np.ndarray] = [np.empty(0, np.float64)] * L
    self_src: list[np.ndarray] = [np.empty(0, np.int64)] * L

    layer_vertices[L] = targets.copy()
    cur = targets
    for hop in range(1, L + 1):
        layer = L - hop + 1  # edges built here feed GNN layer `layer`
        fanout = cfg.fanouts[hop - 1]

        sampled = [_sample_in_neighbors(g, int(v), fanout, cfg.seed, iteration_nonce, layer)
                   for v in cur]
        lengths = np.fromiter((s.size for s in sampled), dtype=np.int64, count=len(sampled))
        src_global = np.concatenate(sampled) if lengths.sum() else np.empty(0, np.int64)
        dst_local = np.repeat(np.arange(cur.size, dtype=np.int64), lengths)

        new_vertices = np.setdiff1d(src_global, cur)  # unique + sorted
        prev = np.concatenate([cur, new_vertices])

        order = np.argsort(prev, kind="stable")
        src_local = order[np.searchsorted(prev[order], src_global)]

        # inject missing self-edges (prefix layout: dst's previous-layer copy is itself)
        has_self = np.zeros(cur.size, dtype=bool)
        self_hits = src_local == dst_local
        has_self[dst_local[self_hits]] = True
        missing = np.nonzero(~has_self)[0]
        src_all = np.concatenate([src_local, missing])
        dst_all = np.concatenate([dst_local, missing])

        edge_order = np.lexsort((dst_all, src_all))
        edges = np.stack([src_all[edge_order], dst_all[edge_order]], axis=1)

        src_deg = in_deg[prev[edges[:, 0]]].astype(np.float64)
        dst_deg = in_deg[cur[edges[:, 1]]].astype(np.float64)
        norms = 1.0 / np.sqrt((src_deg + 1.0) * (dst_deg + 1.0))

        layer_edges[layer - 1] = edges
        gcn_norms[layer - 1] = norms
        self_src[layer - 1] = np.arange(cur.size, dtype=np.int64)
        layer_vertices[layer - 1] = prev
        cur = prev

    return MiniBatch(
        num_layers=L,
        layer_vertices=layer_vertices,
        layer_edges=layer_edges,
        gcn_norms=gcn_norms,
        self_src=self_src,
        target_labels=g.labels[targets].copy(),
    )


def partition_targets(all_train_ids, num_trainers: int, batch_sizes, epoch_seed: int,
                      offset: int = 0) -> list[np.ndarray]:
    """Slice the epoch permutation into per-trainer target arrays.

    The concatenation of the returned arrays equals the permutation entries
    ``[offset, offset + sum(batch_sizes))`` — the property that makes
    multi-trainer synchronous SGD equivalent to one large batch.
    """
    ids = np.asarray(all_train_ids, dtype=np.int64)
    batch_sizes = list(batch_sizes)
    if len(batch_sizes) != num_trainers:
        raise ValueError("batch_sizes length must equal num_trainers")
    if any(b <= 0 for b in batch_sizes):
        raise ValueError("batch size zero for an active trainer")
    total = sum(batch_sizes)
    if offset + total > ids.size:
        raise ValueError("not enough target ids left in the epoch")

    perm = np.random.default_rng(epoch_seed).permutation(ids)
    slices = []
    pos = offset
    for b in batch_sizes:
        slices.append(perm[pos : pos + b].copy())
        pos += b
    return slices
