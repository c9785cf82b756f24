"""GCN and GraphSAGE kernels in the aggregate-update form, with hand-derived
backward passes and memory-traffic accounting.

The aggregation engine is a pure edge processor over source-sorted edge
lists: each distinct source feature is fetched once and reused for all of
its consecutive edges, so reuse-aware reads scale with distinct sources
while the naive per-edge counter scales with the edge count. Intermediates
stay on the tape (fused datapath); only the final logits count as written.

Kernels compute in float64 regardless of the float32 feature storage;
traffic accounting always assumes S_FEAT_BYTES per element.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .graph import S_FEAT_BYTES
from .sampling import MiniBatch

GCN = "gcn"
SAGE = "sage"

AGG_GCN_WEIGHTED_SUM = "gcn_weighted_sum"
AGG_SAGE_MEAN_CONCAT = "sage_mean_with_concat"

_AGG_MODE_FOR_KIND = {GCN: AGG_GCN_WEIGHTED_SUM, SAGE: AGG_SAGE_MEAN_CONCAT}


class ContractViolation(RuntimeError):
    """A caller handed the kernel data that breaks its preconditions."""


@dataclass
class TrafficCounters:
    """External-memory traffic tallies for one device's propagation pass."""

    feature_reads: int = 0  # reuse-aware: one fetch per distinct source
    edge_feature_reads: int = 0  # naive: one fetch per edge
    bytes_read: int = 0
    bytes_written: int = 0

    def as_dict(self) -> dict:
        return {
            "feature_reads": self.feature_reads,
            "edge_feature_reads": self.edge_feature_reads,
            "bytes_read": self.bytes_read,
            "bytes_written": self.bytes_written,
        }


@dataclass
class GnnModel:
    """Layer dimensions plus weights; GraphSAGE doubles each layer's input
    width because of the self/neighbor concatenation."""

    kind: str
    dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if self.kind not in (GCN, SAGE):
            raise ValueError(f"unknown model kind {self.kind!r}")
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) < 2:
            raise ValueError("need at least one layer (two dims)")
        if len(self.weights) != self.num_layers or len(self.biases) != self.num_layers:
            raise ValueError("weights/biases length must equal layer count")
        for l in range(1, self.num_layers + 1):
            expect = (self.layer_input_dim(l), self.dims[l])
            if self.weights[l - 1].shape != expect:
                raise ValueError(f"W^{l} shape {self.weights[l - 1].shape} != {expect}")
            if self.biases[l - 1].shape != (self.dims[l],):
                raise ValueError(f"b^{l} shape mismatch")

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    def layer_input_dim(self, layer: int) -> int:
        width = self.dims[layer - 1]
        return 2 * width if self.kind == SAGE else width

    @classmethod
    def create(cls, kind: str, dims, seed: int = 0) -> "GnnModel":
        """Glorot-normal initialized model, deterministic for a fixed seed."""
        dims = tuple(int(d) for d in dims)
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        mult = 2 if kind == SAGE else 1
        for l in range(1, len(dims)):
            fan_in = mult * dims[l - 1]
            scale = np.sqrt(2.0 / (fan_in + dims[l]))
            weights.append(rng.normal(0.0, scale, (fan_in, dims[l])))
            biases.append(np.zeros(dims[l]))
        return cls(kind, dims, weights, biases)

    def copy(self) -> "GnnModel":
        return GnnModel(self.kind, self.dims,
                        [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])

    def equals(self, other: "GnnModel") -> bool:
        return (self.kind == other.kind and self.dims == other.dims
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases)))


@dataclass
class ForwardTape:
    """Per-layer intermediates retained for the hand-derived backward pass."""

    batch: MiniBatch
    mode: str
    inputs: np.ndarray
    aggregated: list[np.ndarray] = field(default_factory=list)
    preactivations: list[np.ndarray] = field(default_factory=list)
    activations: list[np.ndarray] = field(default_factory=list)


@dataclass
class Gradients:
    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]


def _count_distinct_sorted(src: np.ndarray) -> int:
    if src.size == 0:
        return 0
    return int((np.diff(src) > 0).sum()) + 1


def aggregate_layer(edges: np.ndarray, src_features: np.ndarray, mode: str,
                    norms=None, counters: TrafficCounters | None = None,
                    num_dst: int | None = None, self_src=None) -> np.ndarray:
    """Aggregate source features along a source-sorted edge list.

    GCN mode sums norm-weighted source features into each destination (the
    self-edge is just another edge). SAGE mode concatenates each
    destination's own feature (delivered by its self-edge) with the mean of
    its non-self neighbors; an empty neighbor set contributes zeros.
    """
    edges = np.asarray(edges)
    if edges.ndim != 2 or edges.shape[1] != 2:
        raise ValueError("edges must be an (E, 2) array")
    src, dst = edges[:, 0], edges[:, 1]
    if src.size and np.any(np.diff(src) < 0):
        raise ContractViolation("edge list not sorted by source")

    if num_dst is None:
        num_dst = int(dst.max()) + 1 if dst.size else 0
    width = src_features.shape[1]

    if counters is not None:
        distinct = _count_distinct_sorted(src)
        counters.feature_reads += distinct
        counters.edge_feature_reads += int(src.size)
        counters.bytes_read += distinct * width * S_FEAT_BYTES

    feats = src_features.astype(np.float64, copy=False)

    if mode == AGG_GCN_WEIGHTED_SUM:
        if norms is None:
            raise ValueError("GCN aggregation requires per-edge norms")
        out = np.zeros((num_dst, width))
        np.add.at(out, dst, np.asarray(norms)[:, None] * feats[src])
        return out

    if mode == AGG_SAGE_MEAN_CONCAT:
        if self_src is None:
            raise ValueError("SAGE aggregation requires self_src")
        self_src = np.asarray(self_src)
        is_self = src == self_src[dst]
        own = np.zeros((num_dst, width))
        own[dst[is_self]] = feats[src[is_self]]
        sums = np.zeros((num_dst, width))
        np.add.at(sums, dst[~is_self], feats[src[~is_self]])
        counts = np.bincount(dst[~is_self], minlength=num_dst).astype(np.float64)
        mean = sums / np.maximum(counts, 1.0)[:, None]
        return np.hstack([own, mean])

    raise ValueError(f"unknown aggregation mode {mode!r}")


def update_layer(a: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                 apply_relu: bool) -> np.ndarray:
    """Dense transform with optional ReLU: h = phi(a W + b)."""
    if a.shape[1] != weight.shape[0]:
        raise ValueError(f"shape mismatch: a {a.shape} @ W {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError("bias shape mismatch")
    z = a @ weight + bias
    return np.maximum(z, 0.0) if apply_relu else z


def forward(model: GnnModel, batch: MiniBatch, x0: np.ndarray,
            counters: TrafficCounters | None = None) -> tuple[np.ndarray, ForwardTape]:
    """Run L aggregate/update rounds; only the final logits count as written."""
    if batch.num_layers != model.num_layers:
        raise ValueError("batch layer count does not match model")
    if x0.shape[0] != batch.num_vertices_at(0):
        raise ValueError("X' rows must align with layer-0 local ids")
    if x0.shape[1] != model.dims[0]:
        raise ValueError("X' width must equal f^0")

    mode = _AGG_MODE_FOR_KIND[model.kind]
    h = x0.astype(np.float64, copy=True)
    tape = ForwardTape(batch=batch, mode=mode, inputs=h)
    L = model.num_layers
    for l in range(1, L + 1):
        a = aggregate_layer(
            batch.layer_edges[l - 1], h, mode,
            norms=batch.gcn_norms[l - 1], counters=counters,
            num_dst=batch.num_vertices_at(l), self_src=batch.self_src[l - 1],
        )
        z = a @ model.weights[l - 1] + model.biases[l - 1]
        h = np.maximum(z, 0.0) if l < L else z
        tape.aggregated.append(a)
        tape.preactivations.append(z)
        tape.activations.append(h)

    if counters is not None:
        counters.bytes_written += batch.num_targets * model.dims[L] * S_FEAT_BYTES
    return h, tape


def loss_and_grad(logits: np.ndarray, target_labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(target_labels, dtype=np.int64)
    n, num_classes = logits.shape
    if labels.shape != (n,):
        raise ValueError("one label per logit row required")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label out of range")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = float(-log_probs[np.arange(n), labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def _aggregate_backward(edges: np.ndarray, d_agg: np.ndarray, mode: str, norms,
                        num_src: int, self_src) -> np.ndarray:
    """Transpose of aggregate_layer: route output grads back to sources."""
    src, dst = edges[:, 0], edges[:, 1]
    if mode == AGG_GCN_WEIGHTED_SUM:
        out = np.zeros((num_src, d_agg.shape[1]))
        np.add.at(out, src, np.asarray(norms)[:, None] * d_agg[dst])
        return out

    width = d_agg.shape[1] // 2
    d_own, d_mean = d_agg[:, :width], d_agg[:, width:]
    is_self = src == np.asarray(self_src)[dst]
    out = np.zeros((num_src, width))
    np.add.at(out, src[is_self], d_own[dst[is_self]])
    num_dst = d_agg.shape[0]
    counts = np.bincount(dst[~is_self], minlength=num_dst).astype(np.float64)
    inv = 1.0 / np.maximum(counts, 1.0)
    nb_src, nb_dst = src[~is_self], dst[~is_self]
    np.add.at(out, nb_src, d_mean[nb_dst] * inv[nb_dst, None])
    return out


def backward(model: GnnModel, tape: ForwardTape, dlogits: np.ndarray,
             counters: TrafficCounters | None = None) -> Gradients:
    """Exact analytic gradients for the composed model."""
    L = model.num_layers
    if len(tape.aggregated) != L:
        raise ValueError("tape does not match model")
    if dlogits.shape != tape.preactivations[-1].shape:
        raise ValueError("dlogits shape mismatch")

    batch = tape.batch
    weight_grads: list[np.ndarray] = [np.empty(0)] * L
    bias_grads: list[np.ndarray] = [np.empty(0)] * L

    dz = dlogits
    for l in range(L, 0, -1):
        weight_grads[l - 1] = tape.aggregated[l - 1].T @ dz
        bias_grads[l - 1] = dz.sum(axis=0)
        if l == 1:
            break
        da = dz @ model.weights[l - 1].T
        dh = _aggregate_backward(
            batch.layer_edges[l - 1], da, tape.mode, batch.gcn_norms[l - 1],
            num_src=batch.num_vertices_at(l - 1), self_src=batch.self_src[l - 1],
        )
        dz = dh * (tape.preactivations[l - 2] > 0)
    return Gradients(weight_grads, bias_grads)


def sgd_step(model: GnnModel, grads: Gradients, lr: float) -> GnnModel:
    """In-place SGD update: W <- W - lr * dW, b <- b - lr * db."""
    for w, dw in zip(model.weights, grads.weight_grads):
        if w.shape != dw.shape:
            raise ValueError("gradient shape mismatch")
        w -= lr * dw
    for b, db in zip(model.biases, grads.bias_grads):
        b -= lr * db
    return model


# --- checkpoint format --------------------------------------------------

_MODEL_MAGIC = b"GNNM"
_MODEL_VERSION = 1
_KIND_CODES = {GCN: 0, SAGE: 1}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def save_model(model: GnnModel, path) -> None:
    """Versioned binary checkpoint (f64 little-endian) plus a JSON sidecar."""
    path = str(path)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIBI", _MODEL_MAGIC, _MODEL_VERSION,
                            _KIND_CODES[model.kind], model.num_layers))
        f.write(np.asarray(model.dims, dtype="<u4").tobytes())
        for w, b in zip(model.weights, model.biases):
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    meta = {"format_version": _MODEL_VERSION, "kind": model.kind, "dims": list(model.dims)}
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")


def load_model(path) -> GnnModel:
    data = open(path, "rb").read()
    header = struct.Struct("<4sIBI")
    magic, version, kind_code, num_layers = header.unpack_from(data, 0)
    if magic != _MODEL_MAGIC or version != _MODEL_VERSION:
        raise ValueError(f"{path}: not a model checkpoint")
    kind = _CODE_KINDS[kind_code]
    off = header.size
    dims = np.frombuffer(data, "<u4", num_layers + 1, off)
    off += dims.nbytes
    dims = tuple(int(d) for d in dims)
    mult = 2 if kind == SAGE else 1
    weights, biases = [], []
    for l in range(1, num_layers + 1):
        rows, cols = mult * dims[l - 1], dims[l]
        w = np.frombuffer(data, "<f8", rows * cols, off).reshape(rows, cols).copy()
        off += w.nbytes
        b = np.frombuffer(data, "<f8", cols, off).copy()
        off += b.nbytes
        weights.append(w)
        biases.append(b)
    return GnnModel(kind, dims, weights, biases)
