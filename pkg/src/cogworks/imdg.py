"""In-memory data grid: shared key-value store with TTLs and atomic helpers.

Holds tokens, rulesets, decisions, dedup markers, rooms, and sessions. All
consumers in the process share one grid; atomic put-if-absent is what makes
trace deduplication and room-creation races safe.
"""

from __future__ import annotations

import threading
from typing import Any, Callable

from .clock import Clock, SystemClock

_ABSENT = object()


class Imdg:
    def __init__(self, clock: Clock | None = None):
        self._clock = clock or SystemClock()
        self._data: dict[str, tuple[Any, float | None]] = {}
        self._lock = threading.RLock()

    def put(self, key: str, value: Any, ttl: float | None = None) -> None:
        self._check_key(key)
        expiry = None if ttl is None else self._clock.now() + ttl
        with self._lock:
            self._data[key] = (value, expiry)

    def get(self, key: str, default: Any = None) -> Any:
        self._check_key(key)
        with self._lock:
            value = self._live_value(key)
            return default if value is _ABSENT else value

    def contains(self, key: str) -> bool:
        with self._lock:
            return self._live_value(key) is not _ABSENT

    def put_if_absent(self, key: str, value: Any, ttl: float | None = None) -> bool:
        """Store only when the key is absent/expired; True if we stored it."""
        self._check_key(key)
        with self._lock:
            if self._live_value(key) is not _ABSENT:
                return False
            expiry = None if ttl is None else self._clock.now() + ttl
            self._data[key] = (value, expiry)
            return True

    def delete(self, key: str) -> None:
        with self._lock:
            self._data.pop(key, None)

    def increment(self, key: str) -> int:
        """Atomic counter; first call yields 1."""
        with self._lock:
            current = self._live_value(key)
            value = (0 if current is _ABSENT else int(current)) + 1
            self._data[key] = (value, None)
            return value

    def update(self, key: str, fn: Callable[[Any], Any], default: Any = None) -> Any:
        """Atomic read-modify-write; fn sees the current (or default) value."""
        with self._lock:
            current = self._live_value(key)
            new = fn(default if current is _ABSENT else current)
            self._data[key] = (new, self._data.get(key, (None, None))[1])
            return new

    def keys(self, prefix: str = "") -> list[str]:
        with self._lock:
            return sorted(
                k for k in self._data if k.startswith(prefix)
                and self._live_value(k) is not _ABSENT
            )

    def _live_value(self, key: str) -> Any:
        entry = self._data.get(key)
        if entry is None:
            return _ABSENT
        value, expiry = entry
        if expiry is not None and self._clock.now() >= expiry:
            del self._data[key]
            return _ABSENT
        return value

    @staticmethod
    def _check_key(key: str) -> None:
        if not key:
            raise ValueError("empty imdg key")
