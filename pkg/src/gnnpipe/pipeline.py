"""Simulated timeline for the four-stage training pipeline.

Each stage (sampling, loading, transfer, propagation) is one worker that
processes batches in order. Batch i's stage s starts once its own stage
s-1 output is ready and the stage worker is free; with prefetching on, a
stage also may not run more than one batch ahead of the next stage's
progress — loading batch i+2 and transferring batch i+1 overlap batch i's
propagation, which is exactly the two-stage prefetch structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

STAGES = ("sampling", "loading", "transfer", "propagation")
PREFETCH_DEPTH = 2  # extra in-flight batches (one loading, one transferring)


@dataclass
class PipelineState:
    """Incremental flow-shop recurrence; push one batch's durations at a time."""

    overlap: bool = True
    _prev_start: list[float] | None = None
    _prev_end: list[float] | None = None

    def push(self, durations) -> list[tuple[float, float]]:
        durations = [float(d) for d in durations]
        if len(durations) != 4 or any(d < 0 for d in durations):
            raise ValueError("need four non-negative stage durations")

        starts = [0.0] * 4
        ends = [0.0] * 4
        for s in range(4):
            t = 0.0
            if s > 0:
                t = max(t, ends[s - 1])
            if self._prev_end is not None:
                t = max(t, self._prev_end[s])
                if self.overlap:
                    if s < 3:
                        t = max(t, self._prev_start[s + 1])
                elif s == 0:
                    t = max(t, self._prev_end[3])
            starts[s] = t
            ends[s] = t + durations[s]
        self._prev_start, self._prev_end = starts, ends
        return list(zip(starts, ends))

    @property
    def makespan(self) -> float:
        return self._prev_end[3] if self._prev_end is not None else 0.0


@dataclass
class PipelineTimeline:
    intervals: list[list[tuple[float, float]]]
    makespan: float

    def propagation_ends(self) -> list[float]:
        return [batch[3][1] for batch in self.intervals]

    def iteration_latencies(self) -> list[float]:
        ends = self.propagation_ends()
        return [ends[0]] + [b - a for a, b in zip(ends, ends[1:])]

    def steady_state_latency(self) -> float:
        """Tail iteration latency; equals the bottleneck stage once filled."""
        lat = self.iteration_latencies()
        return lat[-1] if lat else 0.0


def schedule_pipeline(stage_durations, prefetch_depth: int = PREFETCH_DEPTH,
                      overlap: bool = True) -> PipelineTimeline:
    """Schedule a sequence of per-iteration (samp, load, trans, prop) durations."""
    if prefetch_depth != PREFETCH_DEPTH:
        raise ValueError(f"only prefetch depth {PREFETCH_DEPTH} is supported")
    state = PipelineState(overlap=overlap)
    intervals = [state.push(d) for d in stage_durations]
    return PipelineTimeline(intervals=intervals, makespan=state.makespan)
