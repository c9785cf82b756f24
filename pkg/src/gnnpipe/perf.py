"""Analytical performance model: per-stage cost formulas, iteration
prediction, the profiled sampling-time table, and design-time task mapping.

Index conventions (documented once, used everywhere):

* ``BatchShape.edge_counts[m]`` counts the edges whose *sources* live in
  layer ``m`` (the edge set feeding layer ``m+1``); entry ``L`` is always 0.
  The layer-l aggregation cost therefore reads ``edge_counts[l-1]`` paired
  with the width ``dims[l]``.
* ``t_update`` pairs the vertex count and both feature widths at the same
  index: cost(l) = V[l] * f[l] * f[l+1] / (N * freq), valid for l in
  [0, L). Inside ``t_trainer`` the layer-l update term is cost(l-1), the
  unique in-range instantiation across l = 1..L.

Design-time shapes are fanout-derived upper bounds: every sampled neighbor
distinct, plus the self-edge, so V[l-1] = E_feeding[l] = V[l]*(fanout+1).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .drm import Assignment, StageTimes, TASK_SC
from .sampling import MiniBatch

DEFAULT_S_FEAT = 4


@dataclass(frozen=True)
class DeviceSpec:
    """Static description of one trainer device for the cost formulas."""

    device_id: str
    kind: str  # "cpu" | "accelerator"
    mac_parallelism: int  # N
    frequency: float  # Hz
    mem_bandwidth: float  # bytes/s (CPU memory or accelerator device memory)
    pcie_bandwidth: float | None = None  # accelerators only
    pipelined_kernels: bool = False  # max-combine aggregate/update when True

    def __post_init__(self):
        if self.kind not in ("cpu", "accelerator"):
            raise ValueError(f"unknown device kind {self.kind!r}")
        if self.mac_parallelism <= 0 or self.frequency <= 0 or self.mem_bandwidth <= 0:
            raise ValueError("device quantities must be positive")
        if self.kind == "accelerator":
            if not self.pcie_bandwidth or self.pcie_bandwidth <= 0:
                raise ValueError("accelerator requires a positive pcie_bandwidth")
        elif self.pcie_bandwidth is not None:
            raise ValueError("pcie_bandwidth only applies to accelerators")

    @property
    def is_accelerator(self) -> bool:
        return self.kind == "accelerator"


# Table-style presets for the reference hardware (effective burst bandwidths;
# MAC parallelism derived from peak MAC throughput / frequency).
DEVICE_PRESETS: dict[str, dict] = {
    "epyc-7763": dict(kind="cpu", mac_parallelism=734, frequency=2.45e9,
                      mem_bandwidth=205e9),
    "rtx-a5000": dict(kind="accelerator", mac_parallelism=6950, frequency=2.0e9,
                      mem_bandwidth=768e9, pcie_bandwidth=16e9, pipelined_kernels=False),
    "alveo-u250": dict(kind="accelerator", mac_parallelism=2048, frequency=3.0e8,
                       mem_bandwidth=77e9, pcie_bandwidth=16e9, pipelined_kernels=True),
}


@dataclass(frozen=True)
class BatchShape:
    """Per-layer cardinalities plus feature widths for the cost formulas."""

    vertex_counts: tuple[int, ...]  # V[0..L]
    edge_counts: tuple[int, ...]  # edges by source layer, [0..L]; [L] == 0
    dims: tuple[int, ...]  # f[0..L]

    def __post_init__(self):
        L = len(self.dims) - 1
        if len(self.vertex_counts) != L + 1 or len(self.edge_counts) != L + 1:
            raise ValueError("vertex/edge count arrays must have L+1 entries")
        if any(v < 0 for v in self.vertex_counts) or any(e < 0 for e in self.edge_counts):
            raise ValueError("counts must be non-negative")

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    def total_edges(self) -> int:
        return int(sum(self.edge_counts))

    @classmethod
    def from_minibatch(cls, batch: MiniBatch, dims) -> "BatchShape":
        L = batch.num_layers
        vertex_counts = tuple(batch.num_vertices_at(l) for l in range(L + 1))
        edge_counts = tuple(int(batch.layer_edges[m].shape[0]) for m in range(L)) + (0,)
        return cls(vertex_counts, edge_counts, tuple(int(d) for d in dims))

    @classmethod
    def expected(cls, batch_size: int, fanouts, dims) -> "BatchShape":
        """Design-time upper bound derived from the fanout schedule."""
        dims = tuple(int(d) for d in dims)
        L = len(dims) - 1
        if len(fanouts) != L:
            raise ValueError("fanout count must equal layer count")
        v = [0] * (L + 1)
        e = [0] * (L + 1)
        v[L] = int(batch_size)
        for hop in range(1, L + 1):
            layer = L - hop + 1
            width = fanouts[hop - 1] + 1
            e[layer - 1] = v[layer] * width
            v[layer - 1] = v[layer] * width
        return cls(tuple(v), tuple(e), dims)


class SamplingProfile:
    """Measured sampling times on a (worker_count, batch_size) grid.

    Lookups interpolate bilinearly between grid points and clamp outside
    the grid. Times are measured, not modeled: no monotonicity is assumed.
    """

    def __init__(self, worker_counts, batch_sizes, seconds):
        self.worker_counts = np.asarray(worker_counts, dtype=np.float64)
        self.batch_sizes = np.asarray(batch_sizes, dtype=np.float64)
        self.seconds = np.asarray(seconds, dtype=np.float64)
        if self.seconds.shape != (self.worker_counts.size, self.batch_sizes.size):
            raise ValueError("seconds grid shape mismatch")
        if np.any(np.diff(self.worker_counts) <= 0) or np.any(np.diff(self.batch_sizes) <= 0):
            raise ValueError("grid axes must be strictly increasing")
        if np.any(self.seconds < 0):
            raise ValueError("profile times must be non-negative")

    @classmethod
    def linear(cls, seconds_per_target: float = 2e-6,
               worker_counts=(1, 2, 4, 8, 16, 32, 64),
               batch_sizes=(1, 64, 256, 1024, 4096, 16384, 65536)) -> "SamplingProfile":
        """Synthetic profile t = batch * seconds_per_target / workers."""
        w = np.asarray(worker_counts, dtype=np.float64)
        b = np.asarray(batch_sizes, dtype=np.float64)
        grid = b[None, :] * seconds_per_target / w[:, None]
        return cls(w, b, grid)

    def time(self, worker_count: float, batch_size: float) -> float:
        def locate(axis, x):
            x = min(max(x, axis[0]), axis[-1])
            i = int(np.searchsorted(axis, x, side="right")) - 1
            i = min(max(i, 0), axis.size - 2) if axis.size > 1 else 0
            if axis.size == 1:
                return 0, 0, 0.0
            frac = (x - axis[i]) / (axis[i + 1] - axis[i])
            return i, i + 1, frac

        i0, i1, fw = locate(self.worker_counts, worker_count)
        j0, j1, fb = locate(self.batch_sizes, batch_size)
        s = self.seconds
        top = s[i0, j0] * (1 - fb) + s[i0, j1] * fb
        bot = s[i1, j0] * (1 - fb) + s[i1, j1] * fb
        return float(top * (1 - fw) + bot * fw)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["worker_count", "batch_size", "seconds"])
            for i, w in enumerate(self.worker_counts):
                for j, b in enumerate(self.batch_sizes):
                    writer.writerow([int(w), int(b), repr(float(self.seconds[i, j]))])

    @classmethod
    def from_csv(cls, path) -> "SamplingProfile":
        rows = []
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            for row in reader:
                rows.append((float(row["worker_count"]), float(row["batch_size"]),
                             float(row["seconds"])))
        if not rows:
            raise ValueError(f"{path}: empty sampling profile")
        workers = sorted({r[0] for r in rows})
        batches = sorted({r[1] for r in rows})
        grid = np.full((len(workers), len(batches)), np.nan)
        widx = {w: i for i, w in enumerate(workers)}
        bidx = {b: j for j, b in enumerate(batches)}
        for w, b, t in rows:
            grid[widx[w], bidx[b]] = t
        if np.isnan(grid).any():
            raise ValueError(f"{path}: sampling profile grid is incomplete")
        return cls(workers, batches, grid)


# --- stage cost formulas --------------------------------------------------


def t_load(shapes, s_feat: int, bw_ddr: float) -> float:
    """Host-memory feature loading time summed over all trainers."""
    if bw_ddr <= 0:
        raise ValueError("bw_ddr must be positive")
    total = sum(sh.vertex_counts[0] * sh.dims[0] for sh in shapes)
    return total * s_feat / bw_ddr


def t_trans(shape: BatchShape, s_feat: int, bw_pcie: float) -> float:
    """PCIe transfer time of one accelerator's mini-batch features."""
    if bw_pcie <= 0:
        raise ValueError("bw_pcie must be positive")
    return shape.vertex_counts[0] * shape.dims[0] * s_feat / bw_pcie


def t_aggregate(shape: BatchShape, layer: int, s_feat: int, bandwidth: float) -> float:
    """Feature-fetch traffic of the layer-l aggregation over its bandwidth."""
    if not 1 <= layer <= shape.num_layers:
        raise ValueError("aggregation layer out of range")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return shape.edge_counts[layer - 1] * shape.dims[layer] * s_feat / bandwidth


def t_update(shape: BatchShape, layer: int, parallelism: int, frequency: float) -> float:
    """MAC count V[l]*f[l]*f[l+1] over the trainer's compute rate."""
    if not 0 <= layer <= shape.num_layers - 1:
        raise ValueError("update layer out of range")
    if parallelism <= 0 or frequency <= 0:
        raise ValueError("parallelism and frequency must be positive")
    macs = shape.vertex_counts[layer] * shape.dims[layer] * shape.dims[layer + 1]
    return macs / (parallelism * frequency)


def t_trainer(device: DeviceSpec, shape: BatchShape, s_feat: int = DEFAULT_S_FEAT) -> float:
    """Forward plus backward propagation time of one trainer.

    Aggregate and update terms combine with max when the device pipelines
    its kernels, otherwise they add. Backward repeats the forward sum but
    starts from the layer-1 update (layer-1 aggregation has no gradient to
    push further back).
    """
    L = shape.num_layers
    agg = [t_aggregate(shape, l, s_feat, device.mem_bandwidth) for l in range(1, L + 1)]
    upd = [t_update(shape, l - 1, device.mac_parallelism, device.frequency)
           for l in range(1, L + 1)]
    combine = max if device.pipelined_kernels else (lambda a, b: a + b)
    forward = sum(combine(a, u) for a, u in zip(agg, upd))
    backward = upd[0] + sum(combine(agg[i], upd[i]) for i in range(1, L))
    return forward + backward


def t_sync(model_dims, s_feat: int, bw_pcie: float) -> float:
    """All-reduce time: the model crosses PCIe twice (gather, then scatter)."""
    if bw_pcie <= 0:
        raise ValueError("bw_pcie must be positive")
    dims = list(model_dims)
    size = sum(dims[l - 1] * dims[l] for l in range(1, len(dims)))
    return 2.0 * size * s_feat / bw_pcie


def t_prop(trainer_times, sync: float) -> float:
    """Slowest trainer plus synchronization (trainers run in parallel)."""
    times = list(trainer_times)
    if not times:
        raise ValueError("at least one trainer time required")
    return max(times) + sync


@dataclass(frozen=True)
class PredictedTimes:
    t_samp: float
    t_load: float
    t_trans: float | None
    t_prop: float
    t_execution: float
    throughput_mteps: float
    t_sync: float
    trainer_times: dict[str, float]
    stage_times: StageTimes

    def as_dict(self) -> dict:
        return {
            "t_samp": self.t_samp, "t_load": self.t_load, "t_trans": self.t_trans,
            "t_prop": self.t_prop, "t_execution": self.t_execution,
            "throughput_mteps": self.throughput_mteps, "t_sync": self.t_sync,
            "trainer_times": dict(self.trainer_times),
        }


def _host_device(platform) -> DeviceSpec:
    for dev in platform:
        if dev.kind == "cpu":
            return dev
    raise ValueError("platform needs at least one cpu device (host)")


def expected_shapes(assignment: Assignment, fanouts, dims) -> dict[str, BatchShape]:
    return {dev: BatchShape.expected(size, fanouts, dims)
            for dev, size in assignment.batch_sizes.items()}


def predict_iteration(platform, assignment: Assignment, shapes: dict[str, BatchShape],
                      profile: SamplingProfile, model_dims, s_feat: int = DEFAULT_S_FEAT,
                      overhead: float = 0.0) -> PredictedTimes:
    """Predict one iteration's stage times and MTEPS throughput.

    The iteration latency is the max of the four pipeline stages; kernel
    launch and pipeline-flush overheads are not modeled beyond the optional
    fixed `overhead` constant.
    """
    host = _host_device(platform)
    accels = [d for d in platform if d.is_accelerator]
    cpus = [d for d in platform if d.kind == "cpu"]

    sampler_workers = assignment.cpu_workers.get(TASK_SC, 1)
    samp = profile.time(sampler_workers, assignment.total_batch)

    load = t_load([shapes[d.device_id] for d in platform], s_feat, host.mem_bandwidth)

    trans = None
    if accels:
        trans = max(t_trans(shapes[d.device_id], s_feat, d.pcie_bandwidth) for d in accels)

    trainer_times = {d.device_id: t_trainer(d, shapes[d.device_id], s_feat) for d in platform}
    tc = max((trainer_times[d.device_id] for d in cpus), default=None)
    ta = max((trainer_times[d.device_id] for d in accels), default=None)

    sync = t_sync(model_dims, s_feat, accels[0].pcie_bandwidth) if accels else 0.0
    prop = t_prop(trainer_times.values(), sync)

    t_execution = max(samp, load, trans or 0.0, prop) + overhead
    total_edges = sum(shapes[d.device_id].total_edges() for d in platform)
    mteps = (total_edges / t_execution / 1e6) if t_execution > 0 else 0.0

    stage_times = StageTimes(t_sa=None, t_sc=samp, t_load=load, t_tran=trans,
                             t_tc=tc, t_ta=ta)
    return PredictedTimes(
        t_samp=samp, t_load=load, t_trans=trans, t_prop=prop,
        t_execution=t_execution, throughput_mteps=mteps, t_sync=sync,
        trainer_times=trainer_times, stage_times=stage_times,
    )


def default_worker_split(platform, cpu_workers: int) -> dict[str, int]:
    """One worker per active CPU task, remainder round-robin."""
    from .drm import TASK_LOAD, TASK_TC

    tasks = [TASK_SC, TASK_LOAD]
    if any(d.kind == "cpu" for d in platform):
        tasks.append(TASK_TC)
    if cpu_workers < len(tasks):
        raise ValueError(f"cpu worker budget {cpu_workers} below active task count {len(tasks)}")
    split = {t: 1 for t in tasks}
    for i in range(cpu_workers - len(tasks)):
        split[tasks[i % len(tasks)]] += 1
    return split


def equal_split_assignment(platform, total_batch: int, cpu_workers: int,
                           granularity: int = 32) -> Assignment:
    """Near-equal split in granules; device 0 absorbs the remainder."""
    n = len(platform)
    units, rem = divmod(total_batch, granularity)
    per, extra = divmod(units, n)
    sizes = [per * granularity + (granularity if i < extra else 0) for i in range(n)]
    sizes[0] += rem
    return Assignment(
        batch_sizes={d.device_id: sizes[i] for i, d in enumerate(platform)},
        cpu_workers=default_worker_split(platform, cpu_workers),
        device_kinds={d.device_id: d.kind for d in platform},
    )


def _unit_compositions(total_units: int, parts: int):
    if parts == 1:
        yield (total_units,)
        return
    for first in range(total_units + 1):
        for rest in _unit_compositions(total_units - first, parts - 1):
            yield (first,) + rest


def initial_mapping(platform, total_batch: int, fanouts, model_dims,
                    profile: SamplingProfile, cpu_workers: int,
                    granularity: int = 32, min_share: int = 0,
                    s_feat: int = DEFAULT_S_FEAT, overhead: float = 0.0) -> Assignment:
    """Design-time batch split minimizing predicted iteration latency.

    Exhaustive search over per-device batch sizes in granules with the
    total fixed; ties break toward the most equal split, then
    lexicographically. Worker allocation uses the default split.
    """
    n = len(platform)
    if not n:
        raise ValueError("empty platform")
    if total_batch < n * min_share:
        raise ValueError("total_batch below the per-device minimum share")

    workers = default_worker_split(platform, cpu_workers)
    kinds = {d.device_id: d.kind for d in platform}
    units, rem = divmod(total_batch, granularity)
    target = total_batch / n

    best = None
    for combo in _unit_compositions(units, n):
        sizes = [u * granularity for u in combo]
        sizes[0] += rem
        if any(s < min_share for s in sizes):
            continue
        assignment = Assignment(
            batch_sizes={d.device_id: sizes[i] for i, d in enumerate(platform)},
            cpu_workers=dict(workers), device_kinds=dict(kinds),
        )
        shapes = expected_shapes(assignment, fanouts, model_dims)
        pred = predict_iteration(platform, assignment, shapes, profile, model_dims,
                                 s_feat=s_feat, overhead=overhead)
        imbalance = sum(abs(s - target) for s in sizes)
        key = (pred.t_execution, imbalance, tuple(sizes))
        if best is None or key < best[0]:
            best = (key, assignment)
    if best is None:
        raise ValueError("no feasible split (check min_share)")
    return best[1]
