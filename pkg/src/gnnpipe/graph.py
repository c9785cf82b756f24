"""Graph storage: in-neighbor CSR topology, dense features, labels, ingestion.

The graph is the host-memory resident dataset. The CSR rows list the
*in*-neighbors of each vertex (aggregation reads the sources of incoming
edges); out-degrees are kept separately for normalization and reuse
accounting. Features are stored single-precision; numeric kernels may
upcast, but all traffic accounting assumes ``S_FEAT_BYTES`` per element.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Bytes per feature element for traffic accounting (single precision).
S_FEAT_BYTES = 4

_MAGIC = b"HSGN"
_VERSION = 1
_HEADER = struct.Struct("<4sIQQII")


class GraphFormatError(ValueError):
    """An on-disk graph file could not be decoded."""


@dataclass(frozen=True)
class DatasetDescriptor:
    """Static statistics of a dataset plus the layer widths used with it."""

    name: str
    num_vertices: int
    num_edges: int
    f0: int
    f1: int
    f2: int
    num_classes: int

    def __post_init__(self):
        for field_name in ("num_vertices", "num_edges", "f0", "f1", "f2", "num_classes"):
            if getattr(self, field_name) <= 0:
                raise ValueError(f"DatasetDescriptor.{field_name} must be positive")


# Reference descriptors for the standard benchmark graphs. Only used for
# config validation and sizing examples; the graphs themselves are not shipped.
DATASET_PRESETS: dict[str, DatasetDescriptor] = {
    "ogbn-products": DatasetDescriptor("ogbn-products", 2_449_029, 61_859_140, 100, 256, 47, 47),
    "ogbn-papers100M": DatasetDescriptor(
        "ogbn-papers100M", 111_059_956, 1_615_685_872, 128, 256, 172, 172
    ),
    "MAG240M-homo": DatasetDescriptor(
        "MAG240M-homo", 121_751_666, 1_297_748_926, 756, 256, 153, 153
    ),
}


@dataclass(eq=False)
class Graph:
    """Immutable in-memory graph. Safe to share across workers once built."""

    num_vertices: int
    num_edges: int
    row_offsets: np.ndarray  # int64, len V+1; in-edge slice boundaries per vertex
    col_indices: np.ndarray  # int64, len E; edge sources, ascending within a row
    out_degrees: np.ndarray  # int64, len V
    features: np.ndarray  # float32, V x f0
    labels: np.ndarray  # int64, len V
    num_classes: int

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def in_degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def in_neighbors(self, v: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[v] : self.row_offsets[v + 1]]

    def validate(self) -> None:
        ro = self.row_offsets
        if ro.shape != (self.num_vertices + 1,):
            raise ValueError("row_offsets length mismatch")
        if ro[0] != 0 or ro[-1] != self.num_edges:
            raise ValueError("row_offsets endpoints inconsistent with edge count")
        if np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if self.col_indices.shape != (self.num_edges,):
            raise ValueError("col_indices length mismatch")
        if self.num_edges and (self.col_indices.min() < 0 or self.col_indices.max() >= self.num_vertices):
            raise ValueError("col_indices entry out of range")
        if self.features.shape[0] != self.num_vertices:
            raise ValueError("feature row count must equal num_vertices")
        if self.labels.shape != (self.num_vertices,):
            raise ValueError("labels length mismatch")

    def equals(self, other: "Graph") -> bool:
        return (
            self.num_vertices == other.num_vertices
            and self.num_edges == other.num_edges
            and self.num_classes == other.num_classes
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and np.array_equal(self.out_degrees, other.out_degrees)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


def build_csr(edge_list, num_vertices: int, features=None, labels=None, num_classes=None) -> Graph:
    """Build a Graph from (src, dst) pairs.

    In-neighbor lists are sorted ascending per destination; duplicate edges
    and self-loops are preserved as-is.
    """
    edges = np.asarray(list(edge_list) if not isinstance(edge_list, np.ndarray) else edge_list,
                       dtype=np.int64).reshape(-1, 2)
    if num_vertices < 0:
        raise ValueError("num_vertices must be non-negative")
    if edges.size and (edges.min() < 0 or edges.max() >= num_vertices):
        raise ValueError("edge endpoint out of range")

    src, dst = edges[:, 0], edges[:, 1]
    order = np.lexsort((src, dst))
    col_indices = src[order].copy()
    counts = np.bincount(dst, minlength=num_vertices) if edges.size else np.zeros(num_vertices, np.int64)
    row_offsets = np.zeros(num_vertices + 1, dtype=np.int64)
    np.cumsum(counts, out=row_offsets[1:])
    out_degrees = (np.bincount(src, minlength=num_vertices) if edges.size
                   else np.zeros(num_vertices, np.int64)).astype(np.int64)

    if features is None:
        features = np.zeros((num_vertices, 0), dtype=np.float32)
    features = np.ascontiguousarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[0] != num_vertices:
        raise ValueError("feature row count must equal num_vertices")

    if labels is None:
        labels = np.zeros(num_vertices, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (num_vertices,):
        raise ValueError("labels length must equal num_vertices")

    if num_classes is None:
        num_classes = int(labels.max()) + 1 if num_vertices else 1

    return Graph(
        num_vertices=num_vertices,
        num_edges=int(edges.shape[0]),
        row_offsets=row_offsets,
        col_indices=col_indices,
        out_degrees=out_degrees,
        features=features,
        labels=labels,
        num_classes=int(num_classes),
    )


def gather_features(g: Graph, vertex_ids) -> tuple[np.ndarray, int]:
    """Extract feature rows for the given vertices (the Feature Loader).

    Returns the gathered matrix and the number of bytes read from host
    memory: ``len(ids) * f0 * S_FEAT_BYTES``.
    """
    ids = np.asarray(vertex_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= g.num_vertices):
        raise ValueError("vertex id out of range")
    rows = g.features[ids]
    bytes_read = int(ids.size) * g.feature_dim * S_FEAT_BYTES
    return rows, bytes_read


def generate_synthetic(num_vertices: int, avg_degree: float, num_classes: int,
                       f0: int, seed: int) -> Graph:
    """Generate a planted-partition graph with learnable class-mean features.

    Vertices are split evenly into communities (vertex v belongs to class
    v mod num_classes); an in-edge lands inside the community with 10x the
    per-pair probability of crossing it. Deterministic for a fixed seed.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if num_vertices < num_classes:
        raise ValueError("num_vertices must be >= num_classes")

    rng = np.random.default_rng(seed)
    labels = np.arange(num_vertices, dtype=np.int64) % num_classes
    class_sizes = np.bincount(labels, minlength=num_classes)

    # Per-vertex in-degree draws; neighbor picked same-class with probability
    # q chosen so the per-pair intra rate is 10x the inter rate.
    k = rng.poisson(avg_degree, num_vertices)
    dst = np.repeat(np.arange(num_vertices, dtype=np.int64), k)
    q = 10.0 / (num_classes - 1 + 10.0)
    same = rng.random(dst.size) < q
    dst_class = labels[dst]

    src = np.empty(dst.size, dtype=np.int64)
    same_classes = dst_class[same]
    src[same] = rng.integers(0, class_sizes[same_classes]) * num_classes + same_classes
    diff_count = int((~same).sum())
    offs = rng.integers(1, num_classes, size=diff_count)
    other_classes = (dst_class[~same] + offs) % num_classes
    src[~same] = rng.integers(0, class_sizes[other_classes]) * num_classes + other_classes

    keep = src != dst
    pairs = np.unique(np.stack([src[keep], dst[keep]], axis=1), axis=0)

    means = rng.normal(0.0, 1.0, (num_classes, f0))
    features = (means[labels] + 0.5 * rng.standard_normal((num_vertices, f0))).astype(np.float32)
    return build_csr(pairs, num_vertices, features, labels, num_classes)


def save_binary_csr(g: Graph, path) -> None:
    """Write the little-endian binary-csr layout (magic "HSGN", version 1)."""
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, g.num_vertices, g.num_edges,
                             g.feature_dim, g.num_classes))
        f.write(g.row_offsets.astype("<u8").tobytes())
        f.write(g.col_indices.astype("<u4").tobytes())
        f.write(g.out_degrees.astype("<u4").tobytes())
        f.write(np.ascontiguousarray(g.features, dtype="<f4").tobytes())
        f.write(g.labels.astype("<u4").tobytes())


def load_binary_csr(path) -> Graph:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise GraphFormatError(f"{path}: file too short for header")
    magic, version, num_vertices, num_edges, f0, num_classes = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise GraphFormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise GraphFormatError(f"{path}: unsupported version {version}")

    expected = (_HEADER.size + 8 * (num_vertices + 1) + 4 * num_edges
                + 4 * num_vertices + 4 * num_vertices * f0 + 4 * num_vertices)
    if len(data) != expected:
        raise GraphFormatError(
            f"{path}: size {len(data)} inconsistent with header counts (expected {expected})"
        )

    off = _HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    row_offsets = take("<u8", num_vertices + 1).astype(np.int64)
    col_indices = take("<u4", num_edges).astype(np.int64)
    out_degrees = take("<u4", num_vertices).astype(np.int64)
    features = take("<f4", num_vertices * f0).astype(np.float32).reshape(num_vertices, f0)
    labels = take("<u4", num_vertices).astype(np.int64)

    g = Graph(num_vertices, num_edges, row_offsets, col_indices, out_degrees,
              features, labels, int(num_classes))
    try:
        g.validate()
    except ValueError as e:
        raise GraphFormatError(f"{path}: {e}") from e
    return g


def load_edge_list_file(path, format: str = "text-pairs", num_vertices=None,
                        features=None, labels=None) -> Graph:
    """Load a graph from a text edge list or the binary-csr format.

    Text format: one "src dst" decimal pair per line, '#' comments skipped;
    the vertex count is inferred from the largest endpoint unless given.
    """
    if format == "binary-csr":
        return load_binary_csr(path)
    if format != "text-pairs":
        raise ValueError(f"unknown format {format!r}")

    edges = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path}: line {lineno}: expected 'src dst', got {line!r}")
            try:
                s, d = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(
                    f"{path}: line {lineno}: non-integer endpoint in {line!r}"
                ) from None
            if s < 0 or d < 0:
                raise GraphFormatError(f"{path}: line {lineno}: negative vertex id")
            edges.append((s, d))

    if num_vertices is None:
        num_vertices = (max(max(s, d) for s, d in edges) + 1) if edges else 0
    return build_csr(edges, num_vertices, features, labels)
