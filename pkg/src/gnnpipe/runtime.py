"""Training runtime: the four-stage pipeline (sampling, feature loading,
data transfer, propagation) with synchronous SGD across device replicas,
simulated-clock accounting, and per-iteration dynamic resource management.

Numeric results are independent of the execution mode and of how the batch
is split across devices: every target's sampled tree depends only on
(seed, iteration, vertex), and gradient averaging is batch-size-weighted,
so the global update always equals the single-device update over the
concatenated batch. Timing is the only thing modes change: in pure_sim all
six stage times come from the analytical model evaluated on fanout-derived
shapes (a deterministic function of the assignment); in hybrid mode the
CPU tasks are wall-clock measured while accelerator times stay modeled.
"""

from __future__ import annotations

import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import perf
from .compute import (GnnModel, Gradients, TrafficCounters, backward, forward,
                      loss_and_grad, sgd_step)
from .drm import Assignment, DrmConfig, DrmDecision, StageTimes, drm_step
from .graph import Graph, gather_features
from .perf import BatchShape, DeviceSpec, SamplingProfile
from .pipeline import PipelineState
from .protocol import BroadcastBox, HandshakeProtocol
from .sampling import SamplerConfig, sample_minibatch, partition_targets, _mix64

PURE_SIM = "pure_sim"
HYBRID = "hybrid"

_STOP = object()


@dataclass
class RuntimeConfig:
    batch_size: int
    fanouts: list[int]
    learning_rate: float = 0.1
    seed: int = 0
    mode: str = PURE_SIM
    execution: str = "sequential"  # "sequential" | "threaded"
    drm_enabled: bool = True
    prefetch: bool = True
    cpu_workers: int = 8
    drm: DrmConfig = field(default_factory=DrmConfig)
    s_feat: int = 4
    overhead: float = 0.0
    handshake_timeout: float | None = None  # defaulted per mode
    check_replicas: bool = False

    def __post_init__(self):
        if self.mode not in (PURE_SIM, HYBRID):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.execution not in ("sequential", "threaded"):
            raise ValueError(f"unknown execution {self.execution!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def effective_timeout(self) -> float | None:
        if self.handshake_timeout is not None:
            return self.handshake_timeout
        return 30.0 if self.mode == HYBRID else None


@dataclass
class IterationTrace:
    iteration: int
    epoch: int
    stage_times: StageTimes
    durations: dict[str, float]  # sampling/loading/transfer/propagation
    intervals: dict[str, tuple[float, float]]
    t_execution: float
    latency: float
    loss: float
    throughput_mteps: float
    edges_traversed: int
    assignment: dict
    drm: dict | None

    def to_json_dict(self) -> dict:
        def clean(x):
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [clean(v) for v in x]
            if isinstance(x, (np.floating, np.integer)):
                return x.item()
            return x

        return clean({
            "iteration": self.iteration,
            "epoch": self.epoch,
            "stage_times": self.stage_times.as_dict(),
            "durations": self.durations,
            "intervals": self.intervals,
            "t_execution": self.t_execution,
            "latency": self.latency,
            "loss": self.loss,
            "throughput_mteps": self.throughput_mteps,
            "edges_traversed": self.edges_traversed,
            "assignment": self.assignment,
            "drm": self.drm,
        })


def synchronize(grads: list[Gradients], batch_sizes) -> Gradients:
    """Batch-size-weighted all-reduce of per-trainer gradients.

    With equal sizes this is the plain mean; with unequal sizes the
    weighting makes the result equal the gradient of the mean loss over
    the concatenated targets, so rebalancing never changes semantics.
    """
    if not grads:
        raise ValueError("no gradients to synchronize")
    sizes = np.asarray(list(batch_sizes), dtype=np.float64)
    if sizes.size != len(grads) or sizes.sum() <= 0:
        raise ValueError("batch_sizes must match gradients and sum to > 0")
    weights = sizes / sizes.sum()
    ref = grads[0]
    out_w = [w * weights[0] for w in ref.weight_grads]
    out_b = [b * weights[0] for b in ref.bias_grads]
    for g, wt in zip(grads[1:], weights[1:]):
        for i, dw in enumerate(g.weight_grads):
            if dw.shape != out_w[i].shape:
                raise ValueError("gradient shape mismatch across trainers")
            out_w[i] += wt * dw
        for i, db in enumerate(g.bias_grads):
            out_b[i] += wt * db
    return Gradients(out_w, out_b)


class TrainerFailure(RuntimeError):
    """A trainer raised during propagation; the epoch is aborted."""


@dataclass
class _Job:
    """One iteration's state as it flows through the pipeline stages."""

    iteration: int
    epoch: int
    assignment: Assignment
    targets: dict[str, np.ndarray]
    batches: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)
    losses: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    measured: dict = field(default_factory=dict)
    error: tuple | None = None
    protocol: HandshakeProtocol | None = None


class TrainingSession:
    """Owns the model replicas, the target-permutation cursor, the pipeline
    clock, and the DRM loop across iterations."""

    def __init__(self, graph: Graph, model: GnnModel, platform: list[DeviceSpec],
                 cfg: RuntimeConfig, assignment: Assignment | None = None,
                 profile: SamplingProfile | None = None, train_ids=None):
        if not platform:
            raise ValueError("platform must contain at least one device")
        if not any(d.kind == "cpu" for d in platform):
            raise ValueError("platform needs a cpu device to host loading and sync")
        if len(cfg.fanouts) != model.num_layers:
            raise ValueError("fanout count must equal the model layer count")
        if graph.feature_dim != model.dims[0]:
            raise ValueError("graph feature width must equal f^0")

        self.graph = graph
        self.platform = list(platform)
        self.cfg = cfg
        self.profile = profile if profile is not None else SamplingProfile.linear()
        self.assignment = assignment if assignment is not None else \
            perf.equal_split_assignment(platform, cfg.batch_size, cfg.cpu_workers,
                                        cfg.drm.granularity)
        if self.assignment.total_batch != cfg.batch_size:
            raise ValueError("assignment total batch must equal cfg.batch_size")

        self.train_ids = (np.asarray(train_ids, dtype=np.int64) if train_ids is not None
                          else np.arange(graph.num_vertices, dtype=np.int64))
        if self.train_ids.size < cfg.batch_size:
            raise ValueError("batch_size exceeds the training set")
        self.iterations_per_epoch = int(self.train_ids.size) // cfg.batch_size

        self.replicas: dict[str, GnnModel] = {}
        for i, dev in enumerate(self.platform):
            self.replicas[dev.device_id] = model if i == 0 else model.copy()
        self.model = model

        self.pipeline = PipelineState(overlap=cfg.prefetch)
        self.traces: list[IterationTrace] = []
        self.decision_log: list[dict] = []
        self.global_iter = 0
        self.epoch = 0
        self.cursor = 0

    # --- target partitioning -------------------------------------------

    def _epoch_seed(self, epoch: int) -> int:
        return _mix64(_mix64(self.cfg.seed) ^ epoch)

    def _make_job(self) -> _Job:
        total = self.assignment.total_batch
        if self.cursor + total > self.train_ids.size:
            self.epoch += 1
            self.cursor = 0
        active = [d.device_id for d in self.platform
                  if self.assignment.batch_sizes[d.device_id] > 0]
        sizes = [self.assignment.batch_sizes[d] for d in active]
        slices = partition_targets(self.train_ids, len(active), sizes,
                                   self._epoch_seed(self.epoch), offset=self.cursor)
        self.cursor += total
        targets = dict(zip(active, slices))
        job = _Job(iteration=self.global_iter, epoch=self.epoch,
                   assignment=self.assignment.copy(), targets=targets)
        self.global_iter += 1
        return job

    # --- pipeline stages ------------------------------------------------

    def _sample_stage(self, job: _Job) -> None:
        t0 = time.perf_counter()
        for dev_id, targets in job.targets.items():
            scfg = SamplerConfig(self.cfg.fanouts, targets.size, self.cfg.seed)
            job.batches[dev_id] = sample_minibatch(self.graph, targets, scfg, job.iteration)
        job.measured["sampling"] = time.perf_counter() - t0

    def _load_stage(self, job: _Job) -> None:
        t0 = time.perf_counter()
        for dev_id, batch in job.batches.items():
            job.features[dev_id] = gather_features(self.graph, batch.layer_vertices[0])[0]
        job.measured["loading"] = time.perf_counter() - t0

    def _train_device(self, job: _Job, dev_id: str) -> None:
        batch = job.batches.get(dev_id)
        if batch is None:
            return
        try:
            t0 = time.perf_counter()
            counters = TrafficCounters()
            replica = self.replicas[dev_id]
            logits, tape = forward(replica, batch, job.features[dev_id], counters)
            loss, dlogits = loss_and_grad(logits, batch.target_labels)
            job.grads[dev_id] = backward(replica, tape, dlogits, counters)
            job.losses[dev_id] = loss
            job.counters[dev_id] = counters
            job.measured.setdefault("train", {})[dev_id] = time.perf_counter() - t0
        except Exception as exc:  # propagate with device context
            job.error = (dev_id, exc)

    # --- timing -----------------------------------------------------------

    def _stage_numbers(self, job: _Job) -> tuple[StageTimes, dict[str, float]]:
        cfg = self.cfg
        asn = job.assignment
        if cfg.mode == PURE_SIM:
            shapes = perf.expected_shapes(asn, cfg.fanouts, self.model.dims)
            pred = perf.predict_iteration(self.platform, asn, shapes, self.profile,
                                          self.model.dims, s_feat=cfg.s_feat,
                                          overhead=cfg.overhead)
            st = pred.stage_times
            durations = {"sampling": pred.t_samp, "loading": pred.t_load,
                         "transfer": pred.t_trans or 0.0, "propagation": pred.t_prop}
            return st, durations

        # hybrid: CPU tasks measured, accelerator times modeled on the
        # realized shapes.
        accels = [d for d in self.platform if d.is_accelerator]
        cpus = [d for d in self.platform if d.kind == "cpu"]
        shapes = {dev_id: BatchShape.from_minibatch(b, self.model.dims)
                  for dev_id, b in job.batches.items()}
        t_sc = job.measured.get("sampling", 0.0)
        t_ld = job.measured.get("loading", 0.0)
        tran = None
        if accels:
            tran = max((perf.t_trans(shapes[d.device_id], cfg.s_feat, d.pcie_bandwidth)
                        for d in accels if d.device_id in shapes), default=0.0)
        train_walls = job.measured.get("train", {})
        tc = max((train_walls.get(d.device_id, 0.0) for d in cpus), default=None) if cpus else None
        ta = None
        if accels:
            ta = max((perf.t_trainer(d, shapes[d.device_id], cfg.s_feat)
                      for d in accels if d.device_id in shapes), default=0.0)
        sync = perf.t_sync(self.model.dims, cfg.s_feat, accels[0].pcie_bandwidth) if accels else 0.0
        trainer_times = [t for t in (tc, ta) if t is not None]
        prop = max(trainer_times) + sync if trainer_times else 0.0
        st = StageTimes(t_sa=None, t_sc=t_sc, t_load=t_ld, t_tran=tran, t_tc=tc, t_ta=ta)
        durations = {"sampling": t_sc, "loading": t_ld, "transfer": tran or 0.0,
                     "propagation": prop}
        return st, durations

    # --- iteration assembly ----------------------------------------------

    def _apply_updates(self, avg: Gradients) -> None:
        for dev in self.platform:
            sgd_step(self.replicas[dev.device_id], avg, self.cfg.learning_rate)
        if self.cfg.check_replicas:
            ref = self.replicas[self.platform[0].device_id]
            for dev in self.platform[1:]:
                if not ref.equals(self.replicas[dev.device_id]):
                    raise RuntimeError("model replicas diverged after synchronization")

    def _reduce(self, job: _Job) -> tuple[Gradients, float]:
        order = [d.device_id for d in self.platform if d.device_id in job.grads]
        grads = [job.grads[d] for d in order]
        sizes = [job.targets[d].size for d in order]
        avg = synchronize(grads, sizes)
        weights = np.asarray(sizes, dtype=np.float64)
        weights /= weights.sum()
        loss = float(sum(w * job.losses[d] for w, d in zip(weights, order)))
        return avg, loss

    def _finalize(self, job: _Job, loss: float) -> IterationTrace:
        stage_times, durations = self._stage_numbers(job)
        order = ("sampling", "loading", "transfer", "propagation")
        intervals = self.pipeline.push([durations[k] for k in order])
        ends = [e for _, e in intervals]
        prev_end = self.traces[-1].intervals["propagation"][1] if self.traces else 0.0
        latency = ends[3] - prev_end

        t_exec = max(durations.values()) + self.cfg.overhead
        edges = sum(b.total_edges() for b in job.batches.values())
        mteps = edges / t_exec / 1e6 if t_exec > 0 else 0.0

        drm_record = None
        if self.cfg.drm_enabled:
            entries = stage_times.entries()
            if len(entries) >= 2:
                decision, new_assignment = drm_step(stage_times, self.assignment, self.cfg.drm)
                bottleneck = sorted(entries.items(), key=lambda kv: -kv[1])[0][0]
                drm_record = {"iter": job.iteration, "times": stage_times.as_dict(),
                              "bottleneck": bottleneck, "action": decision.as_dict(),
                              "assignment": new_assignment.as_dict()}
                self.decision_log.append(drm_record)
                self.assignment = new_assignment

        trace = IterationTrace(
            iteration=job.iteration, epoch=job.epoch, stage_times=stage_times,
            durations=durations,
            intervals={k: intervals[i] for i, k in enumerate(order)},
            t_execution=t_exec, latency=latency, loss=loss,
            throughput_mteps=mteps, edges_traversed=edges,
            assignment=job.assignment.as_dict(), drm=drm_record,
        )
        self.traces.append(trace)
        return trace

    # --- sequential engine -------------------------------------------------

    def _run_one_sequential(self) -> IterationTrace:
        job = self._make_job()
        self._sample_stage(job)
        self._load_stage(job)
        for dev in self.platform:
            self._train_device(job, dev.device_id)
            if job.error is not None:
                dev_id, exc = job.error
                raise TrainerFailure(f"trainer {dev_id} failed at iteration "
                                     f"{job.iteration}: {exc}") from exc
        avg, loss = self._reduce(job)
        self._apply_updates(avg)
        return self._finalize(job, loss)

    # --- threaded engine ----------------------------------------------------

    def _run_threaded(self, num_iterations: int) -> list[IterationTrace]:
        cfg = self.cfg
        timeout = cfg.effective_timeout()
        sample_q: queue.Queue = queue.Queue(maxsize=2)
        load_q: queue.Queue = queue.Queue(maxsize=2)
        trans_q: queue.Queue = queue.Queue(maxsize=2)
        trainer_qs = {d.device_id: queue.Queue() for d in self.platform}
        broadcast = BroadcastBox()
        done_q: queue.Queue = queue.Queue()

        def stage_worker(inq, outq, fn):
            while True:
                job = inq.get()
                if job is _STOP:
                    outq.put(_STOP)
                    return
                if job.error is None:
                    try:
                        fn(job)
                    except Exception as exc:
                        job.error = ("stage", exc)
                outq.put(job)

        def dispatch_worker():
            while True:
                job = trans_q.get()
                if job is _STOP:
                    for q_ in trainer_qs.values():
                        q_.put(_STOP)
                    return
                # transfer stage: accelerator buffers become ready; ownership
                # of each mini-batch moves to its trainer.
                for dev in self.platform:
                    trainer_qs[dev.device_id].put(job)
                done_q.put(job)

        def trainer_worker(dev_id: str):
            while True:
                job = trainer_qs[dev_id].get()
                if job is _STOP:
                    return
                if job.error is None:
                    self._train_device(job, dev_id)
                job.protocol.signal_done(dev_id)
                try:
                    avg = broadcast.wait_for(job.iteration, timeout=timeout)
                except Exception:
                    return  # coordinator aborted
                if avg is not None:
                    sgd_step(self.replicas[dev_id], avg, cfg.learning_rate)
                job.protocol.signal_ack(dev_id)

        threads = [
            threading.Thread(target=stage_worker, args=(sample_q, load_q, self._sample_stage),
                             name="sampler", daemon=True),
            threading.Thread(target=stage_worker, args=(load_q, trans_q, self._load_stage),
                             name="loader", daemon=True),
            threading.Thread(target=dispatch_worker, name="transfer", daemon=True),
        ]
        threads += [threading.Thread(target=trainer_worker, args=(d.device_id,),
                                     name=f"trainer-{d.device_id}", daemon=True)
                    for d in self.platform]
        for t in threads:
            t.start()

        traces: list[IterationTrace] = []
        # DRM decisions feed the next iteration's partitioning, so the sampler
        # may only run ahead when the assignment cannot change.
        max_ahead = 1 if cfg.drm_enabled else 3
        trainer_ids = [d.device_id for d in self.platform]
        submitted = 0
        pending: deque[_Job] = deque()
        failure: TrainerFailure | None = None
        try:
            while len(traces) < num_iterations and failure is None:
                while submitted < num_iterations and len(pending) < max_ahead:
                    job = self._make_job()
                    job.protocol = HandshakeProtocol(trainer_ids, timeout=timeout)
                    sample_q.put(job)
                    pending.append(job)
                    submitted += 1
                job = pending.popleft()
                done_q.get()  # transfer stage has dispatched this job
                job.protocol.wait_all_done()
                if job.error is not None:
                    where, exc = job.error
                    broadcast.publish(job.iteration, None)
                    job.protocol.wait_all_acks()
                    failure = TrainerFailure(
                        f"trainer {where} failed at iteration {job.iteration}: {exc}")
                    failure.__cause__ = exc
                    break
                avg, loss = self._reduce(job)
                broadcast.publish(job.iteration, avg)
                job.protocol.wait_all_acks()
                if cfg.check_replicas:
                    ref = self.replicas[self.platform[0].device_id]
                    for dev in self.platform[1:]:
                        if not ref.equals(self.replicas[dev.device_id]):
                            raise RuntimeError("model replicas diverged")
                traces.append(self._finalize(job, loss))
        finally:
            sample_q.put(_STOP)
            for t in threads:
                t.join(timeout=10.0)
        if failure is not None:
            raise failure
        return traces

    # --- public drivers -----------------------------------------------------

    def run_iterations(self, num_iterations: int) -> list[IterationTrace]:
        if self.cfg.execution == "threaded":
            return self._run_threaded(num_iterations)
        return [self._run_one_sequential() for _ in range(num_iterations)]

    def run_epoch(self) -> list[IterationTrace]:
        return self.run_iterations(self.iterations_per_epoch)


def run_epoch(graph: Graph, model: GnnModel, platform: list[DeviceSpec],
              cfg: RuntimeConfig, mode: str | None = None,
              assignment: Assignment | None = None,
              profile: SamplingProfile | None = None,
              train_ids=None) -> tuple[GnnModel, list[IterationTrace]]:
    """Run one epoch (len(train_ids) // batch_size iterations)."""
    if mode is not None and mode != cfg.mode:
        cfg = RuntimeConfig(**{**cfg.__dict__, "mode": mode})
    session = TrainingSession(graph, model, platform, cfg, assignment=assignment,
                              profile=profile, train_ids=train_ids)
    traces = session.run_epoch()
    return session.model, traces


def training_accuracy(graph: Graph, model: GnnModel, vertex_ids=None,
                      seed: int = 0) -> float:
    """Classification accuracy with full (degree-capped) neighborhoods."""
    ids = (np.asarray(vertex_ids, dtype=np.int64) if vertex_ids is not None
           else np.arange(graph.num_vertices, dtype=np.int64))
    max_deg = int(graph.in_degrees().max()) if graph.num_edges else 1
    fanouts = [max(max_deg, 1)] * model.num_layers
    scfg = SamplerConfig(fanouts, ids.size, seed)
    batch = sample_minibatch(graph, ids, scfg, iteration_nonce=0)
    x0, _ = gather_features(graph, batch.layer_vertices[0])
    logits, _ = forward(model, batch, x0)
    predicted = logits.argmax(axis=1)
    return float((predicted == batch.target_labels).mean())
