"""Trainer/synchronizer handshake.

Mirrors the condition-variable protocol of the runtime: every trainer
signals DONE once its gradients are staged; the synchronizer proceeds only
when the DONE count matches the trainer set; after the averaged update is
broadcast, the next iteration starts only when every trainer acknowledged.
Deadlock-free for any completion order; a missing signal trips the timeout
and names the offenders.
"""

from __future__ import annotations

import threading


class HandshakeTimeout(RuntimeError):
    def __init__(self, phase: str, missing: set):
        self.phase = phase
        self.missing = set(missing)
        super().__init__(f"handshake timeout in {phase}: missing {sorted(self.missing)}")


class HandshakeProtocol:
    """One iteration's DONE/ACK barrier pair for a fixed trainer set."""

    def __init__(self, trainer_ids, timeout: float | None = None):
        self.trainer_ids = set(trainer_ids)
        if not self.trainer_ids:
            raise ValueError("need at least one trainer")
        self.timeout = timeout
        self._cond = threading.Condition()
        self._done: set = set()
        self._acked: set = set()

    def reset(self) -> None:
        with self._cond:
            self._done.clear()
            self._acked.clear()

    def _signal(self, bucket: set, trainer_id) -> None:
        if trainer_id not in self.trainer_ids:
            raise ValueError(f"unknown trainer {trainer_id!r}")
        with self._cond:
            bucket.add(trainer_id)
            self._cond.notify_all()

    def signal_done(self, trainer_id) -> None:
        self._signal(self._done, trainer_id)

    def signal_ack(self, trainer_id) -> None:
        self._signal(self._acked, trainer_id)

    def _wait(self, bucket: set, phase: str) -> None:
        with self._cond:
            ok = self._cond.wait_for(lambda: bucket >= self.trainer_ids,
                                     timeout=self.timeout)
            if not ok:
                raise HandshakeTimeout(phase, self.trainer_ids - bucket)

    def wait_all_done(self) -> None:
        self._wait(self._done, "DONE")

    def wait_all_acks(self) -> None:
        self._wait(self._acked, "ACK")


class BroadcastBox:
    """Single-slot broadcast of the averaged gradients to trainer threads."""

    def __init__(self):
        self._cond = threading.Condition()
        self._version = -1
        self._value = None

    def publish(self, version: int, value) -> None:
        with self._cond:
            self._version = version
            self._value = value
            self._cond.notify_all()

    def wait_for(self, version: int, timeout: float | None = None):
        with self._cond:
            ok = self._cond.wait_for(lambda: self._version >= version, timeout=timeout)
            if not ok:
                raise HandshakeTimeout("broadcast", {"synchronizer"})
            return self._value
