"""Dynamic resource management: a bottleneck-guided optimizer that runs once
per iteration and either shifts mini-batch workload between the CPU and
accelerator device pools (balance_work) or moves CPU workers between CPU
tasks (balance_thread).

Data-transfer and accelerator-training times are bundled into one "accel"
entry before ranking because they move together with the accelerator's
workload. Total batch size and total worker count are conserved by every
action.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

TASK_SA = "accel_sampler"
TASK_SC = "cpu_sampler"
TASK_LOAD = "feature_loader"
TASK_TC = "cpu_trainer"
TASK_ACCEL = "accelerator"

CPU_TASKS = (TASK_SC, TASK_LOAD, TASK_TC)

# Stable ordering used to break ties when ranking stage times.
_SORT_ORDER = (TASK_SA, TASK_SC, TASK_LOAD, TASK_TC, TASK_ACCEL)
_CPU_SORT_ORDER = (TASK_SC, TASK_LOAD, TASK_TC)


@dataclass(frozen=True)
class StageTimes:
    """Per-iteration stage timings; None marks an unconfigured task."""

    t_sa: float | None = None
    t_sc: float | None = None
    t_load: float | None = None
    t_tran: float | None = None
    t_tc: float | None = None
    t_ta: float | None = None

    def __post_init__(self):
        for name in ("t_sa", "t_sc", "t_load", "t_tran", "t_tc", "t_ta"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")

    def accel_time(self) -> float | None:
        present = [t for t in (self.t_tran, self.t_ta) if t is not None]
        return max(present) if present else None

    def entries(self) -> dict[str, float]:
        """Present stages in stable order, transfer/accel-training bundled."""
        raw = {
            TASK_SA: self.t_sa,
            TASK_SC: self.t_sc,
            TASK_LOAD: self.t_load,
            TASK_TC: self.t_tc,
            TASK_ACCEL: self.accel_time(),
        }
        return {k: raw[k] for k in _SORT_ORDER if raw[k] is not None}

    def cpu_entries(self) -> dict[str, float]:
        raw = {TASK_SC: self.t_sc, TASK_LOAD: self.t_load, TASK_TC: self.t_tc}
        return {k: raw[k] for k in _CPU_SORT_ORDER if raw[k] is not None}

    def as_dict(self) -> dict:
        return {
            "t_sa": self.t_sa, "t_sc": self.t_sc, "t_load": self.t_load,
            "t_tran": self.t_tran, "t_tc": self.t_tc, "t_ta": self.t_ta,
        }


@dataclass
class Assignment:
    """Per-device mini-batch sizes plus CPU worker allocation per task."""

    batch_sizes: dict[str, int]
    cpu_workers: dict[str, int]
    device_kinds: dict[str, str]

    def __post_init__(self):
        if any(b < 0 for b in self.batch_sizes.values()):
            raise ValueError("batch sizes must be >= 0")
        if any(w < 0 for w in self.cpu_workers.values()):
            raise ValueError("worker counts must be >= 0")
        for dev in self.batch_sizes:
            if dev not in self.device_kinds:
                raise ValueError(f"device {dev!r} has no kind")

    @property
    def total_batch(self) -> int:
        return sum(self.batch_sizes.values())

    @property
    def total_workers(self) -> int:
        return sum(self.cpu_workers.values())

    def pool(self, kind: str) -> list[str]:
        return [d for d in self.batch_sizes if self.device_kinds[d] == kind]

    def pool_batch(self, kind: str) -> int:
        return sum(self.batch_sizes[d] for d in self.pool(kind))

    def copy(self) -> "Assignment":
        return Assignment(dict(self.batch_sizes), dict(self.cpu_workers),
                          dict(self.device_kinds))

    def as_dict(self) -> dict:
        return {"batch_sizes": dict(self.batch_sizes),
                "cpu_workers": dict(self.cpu_workers)}


@dataclass(frozen=True)
class DrmConfig:
    deadband: float = 0.05
    damping: float = 0.5
    granularity: int = 32
    thread_step: int = 1
    min_batch: int = 0
    min_workers: int = 1

    def __post_init__(self):
        if self.granularity < 1 or self.thread_step < 1:
            raise ValueError("granularity and thread_step must be >= 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must be in (0, 1]")


@dataclass(frozen=True)
class DrmDecision:
    action: str  # "none" | "balance_work" | "balance_thread"
    from_task: str | None = None
    to_task: str | None = None
    delta: int = 0
    rationale: str = ""

    def as_dict(self) -> dict:
        return {"action": self.action, "from_task": self.from_task,
                "to_task": self.to_task, "delta": self.delta,
                "rationale": self.rationale}


def balance_work(from_time: float, to_time: float, from_batch: int, to_batch: int,
                 cfg: DrmConfig) -> tuple[int, int]:
    """Move batch from the slower side toward the faster one.

    delta = round_to_granularity(damping * slow_batch * (slow-fast)/(slow+fast)),
    round-half-to-even in granules; a delta that rounds to zero or cannot be
    funded above min_batch moves nothing. The sum of the two batches is
    invariant.
    """
    if from_time >= to_time:
        slow_t, fast_t, slow_b = from_time, to_time, from_batch
        sign = +1  # donate from `from`
    else:
        slow_t, fast_t, slow_b = to_time, from_time, to_batch
        sign = -1
    if slow_t <= fast_t or slow_t + fast_t <= 0:
        return from_batch, to_batch

    raw = cfg.damping * slow_b * (slow_t - fast_t) / (slow_t + fast_t)
    delta = round(raw / cfg.granularity) * cfg.granularity
    cap = slow_b - cfg.min_batch
    if delta > cap:
        delta = (cap // cfg.granularity) * cfg.granularity
    if delta <= 0:
        return from_batch, to_batch
    if sign > 0:
        return from_batch - delta, to_batch + delta
    return from_batch + delta, to_batch - delta


def balance_thread(from_task: str, to_task: str, workers: dict[str, int],
                   cfg: DrmConfig) -> dict[str, int]:
    """Move up to thread_step workers; every task keeps >= min_workers."""
    new = dict(workers)
    if from_task not in new or to_task not in new:
        return new
    moved = min(cfg.thread_step, new[from_task] - cfg.min_workers)
    if moved <= 0:
        return new
    new[from_task] -= moved
    new[to_task] += moved
    return new


def _apply_pool_move(assignment: Assignment, donor_kind: str, receiver_kind: str,
                     delta: int) -> Assignment:
    """Shift `delta` targets between device pools: take from the largest
    donor batches first, give everything to the smallest receiver batch."""
    new = assignment.copy()
    remaining = delta
    for dev in sorted(new.pool(donor_kind), key=lambda d: (-new.batch_sizes[d], d)):
        take = min(remaining, new.batch_sizes[dev])
        new.batch_sizes[dev] -= take
        remaining -= take
        if remaining == 0:
            break
    receivers = sorted(new.pool(receiver_kind), key=lambda d: (new.batch_sizes[d], d))
    new.batch_sizes[receivers[0]] += delta
    return new


def drm_step(times: StageTimes, current: Assignment, cfg: DrmConfig) -> tuple[DrmDecision, Assignment]:
    """One bottleneck-guided adjustment.

    Ranks the present stages (descending, ties in SA/SC/Load/TC/Accel
    order), then dispatches on the bottleneck. `fastest` is the smallest
    entry and `second` the second-smallest; if the relative gap between the
    bottleneck and the second-fastest entry is inside the deadband, nothing
    moves.
    """
    entries = times.entries()
    if len(entries) < 2:
        raise ValueError("need at least two present stage entries")

    ranked = sorted(entries.items(), key=lambda kv: -kv[1])
    bottleneck, b_time = ranked[0]
    fastest, _ = ranked[-1]
    second, second_time = ranked[-2]

    if b_time <= 0 or (b_time - second_time) / b_time < cfg.deadband:
        return DrmDecision("none", rationale=f"deadband (bottleneck={bottleneck})"), current

    cpu_entries = times.cpu_entries()
    cpu_ranked = sorted(cpu_entries.items(), key=lambda kv: -kv[1])
    fastest_cpu = cpu_ranked[-1][0] if cpu_ranked else None

    def work(from_task: str, to_task: str, from_time, to_time):
        if from_time is None or to_time is None:
            return DrmDecision("none", rationale=f"{bottleneck}: counterpart absent"), current
        # Work always moves between the CPU and accelerator device pools;
        # from_task names the CPU side of the pair.
        cpu_b = current.pool_batch("cpu")
        accel_b = current.pool_batch("accelerator")
        if not current.pool("cpu") or not current.pool("accelerator"):
            return DrmDecision("none", rationale=f"{bottleneck}: pool missing"), current
        new_cpu, new_accel = balance_work(from_time, to_time, cpu_b, accel_b, cfg)
        if new_cpu == cpu_b:
            return DrmDecision("none", rationale=f"{bottleneck}: floor"), current
        if new_cpu < cpu_b:
            updated = _apply_pool_move(current, "cpu", "accelerator", cpu_b - new_cpu)
        else:
            updated = _apply_pool_move(current, "accelerator", "cpu", new_cpu - cpu_b)
        decision = DrmDecision("balance_work", from_task=from_task, to_task=to_task,
                               delta=abs(new_cpu - cpu_b), rationale=bottleneck)
        return decision, updated

    def thread(donor: str | None, receiver: str):
        if donor is None or donor == receiver:
            return DrmDecision("none", rationale=f"{bottleneck}: no donor task"), current
        new_workers = balance_thread(donor, receiver, current.cpu_workers, cfg)
        if new_workers == current.cpu_workers:
            return DrmDecision("none", rationale=f"{bottleneck}: floor"), current
        updated = current.copy()
        updated.cpu_workers = new_workers
        moved = current.cpu_workers[donor] - new_workers[donor]
        decision = DrmDecision("balance_thread", from_task=donor, to_task=receiver,
                               delta=moved, rationale=bottleneck)
        return decision, updated

    def thread_donor() -> str | None:
        donor = fastest if fastest in CPU_TASKS else fastest_cpu
        return None if donor == bottleneck else donor

    if bottleneck == TASK_SA:
        return work(TASK_SC, TASK_SA, times.t_sc, times.t_sa)
    if bottleneck == TASK_ACCEL:
        return work(TASK_TC, TASK_ACCEL, times.t_tc, entries[TASK_ACCEL])
    if bottleneck == TASK_LOAD:
        donor = fastest_cpu if fastest_cpu != TASK_LOAD else None
        return thread(donor, TASK_LOAD)
    if bottleneck == TASK_SC:
        if fastest == TASK_SA:
            return work(TASK_SC, TASK_SA, times.t_sc, times.t_sa)
        if fastest == TASK_ACCEL and second == TASK_SA:
            return work(TASK_SC, TASK_SA, times.t_sc, times.t_sa)
        return thread(thread_donor(), TASK_SC)
    if bottleneck == TASK_TC:
        if fastest == TASK_ACCEL:
            return work(TASK_TC, TASK_ACCEL, times.t_tc, entries[TASK_ACCEL])
        if fastest == TASK_SA and second == TASK_ACCEL:
            return work(TASK_TC, TASK_ACCEL, times.t_tc, entries[TASK_ACCEL])
        return thread(thread_donor(), TASK_TC)
    raise AssertionError(f"unhandled bottleneck {bottleneck!r}")
