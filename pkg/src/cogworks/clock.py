"""Time and identifier sources shared by every platform module.

All business-level time (timestamps, TTLs, token-bucket refill, redelivery
deadlines, deadline arithmetic) flows through a Clock so scenario runs can be
pinned to a fixed instant or replayed against wall time. Thread waits and
polling sleeps stay on real time regardless of the clock in play.
"""

from __future__ import annotations

import hashlib
import threading
import time
from typing import Protocol


class Clock(Protocol):
    def now(self) -> float:
        """Current time as seconds since the Unix epoch."""
        ...


class SystemClock:
    """Wall-clock time."""

    def now(self) -> float:
        return time.time()


class TickingClock:
    """Advances with wall time but starts from a chosen epoch.

    Used by chaos scenario runs: redelivery timers need time to move, while
    deadline arithmetic still sees the scenario's fixed starting instant.
    """

    def __init__(self, start: float):
        self._start = start
        self._boot = time.perf_counter()

    def now(self) -> float:
        return self._start + (time.perf_counter() - self._boot)


class ManualClock:
    """Fully test-controlled clock; only advances when told to."""

    def __init__(self, start: float = 0.0):
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("clock cannot move backwards")
        with self._lock:
            self._now += seconds

    def set(self, instant: float) -> None:
        with self._lock:
            self._now = instant


class IdSource:
    """Deterministic, namespaced unique-id generator.

    Ids are derived from (seed, kind, per-kind counter), so two runs with the
    same seed assign the same ids to the same entities as long as each kind's
    creation order is stable -- concurrent draws of *different* kinds do not
    perturb each other.
    """

    def __init__(self, seed: int | None = None):
        self._seed = seed if seed is not None else time.time_ns()
        self._counters: dict[str, int] = {}
        self._lock = threading.Lock()

    def next(self, kind: str) -> str:
        with self._lock:
            n = self._counters.get(kind, 0)
            self._counters[kind] = n + 1
        digest = hashlib.blake2b(
            f"{self._seed}:{kind}:{n}".encode(), digest_size=8
        ).hexdigest()
        return f"{kind}-{digest}"
