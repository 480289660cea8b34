"""Function-as-a-service engine: registration, triggering, scaling, benchmarks.

Functions run in-process as registered callables; the engine keeps the
scheduling semantics that matter -- a worker pool per function that scales
up while the queue outgrows it (one worker at a time, up to the ceiling),
drains back to the warm floor after the idle TTL, and is recycled when an
invocation overruns its timeout. Events arrive through the broker on
``faas/trigger/#`` (plus one extra subscription per function whose trigger
pattern lives outside that prefix); events matching no function are parked
on ``$dead/faas``. Every invocation leaves a log record the benchmark
reports are computed from (nearest-rank percentiles).

An event carrying a reply topic gets the function's return value published
back, which is how request-response flows through functions.

Shipped system functions (wired by the platform): ``answering-logic``
returns each answer to its originating channel; ``http-rest`` performs a
configured HTTP request bound to a micro-operation kind.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
import urllib.error
import urllib.request
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable

from .broker import Broker, Envelope, SubscriptionHandle
from .clock import Clock, IdSource, SystemClock

log = logging.getLogger(__name__)

TRIGGER_PREFIX = "faas/trigger"
DEAD_TOPIC = "$dead/faas"

LambdaBody = Callable[[dict[str, Any]], Any]


class FaasError(Exception):
    pass


class DuplicateRegistrationError(FaasError):
    pass


class UnknownLambdaError(FaasError):
    pass


class EmptyWindowError(FaasError):
    pass


@dataclass(frozen=True)
class LambdaDescriptor:
    name: str
    trigger_pattern: str
    version: str = "1"
    min_instances: int = 1
    max_instances: int = 2
    invocation_timeout: float = 5.0
    idle_ttl: float = 30.0

    def __post_init__(self) -> None:
        if self.min_instances < 0 or self.max_instances < 1:
            raise ValueError("min_instances >= 0 and max_instances >= 1 required")
        if self.min_instances > self.max_instances:
            raise ValueError("min_instances must not exceed max_instances")


@dataclass(frozen=True)
class Invocation:
    invocation_id: str
    name: str
    version: str
    topic: str
    start_ts: float
    end_ts: float
    outcome: str  # ok | error | timeout
    error: str | None = None

    @property
    def latency(self) -> float:
        return self.end_ts - self.start_ts


@dataclass(frozen=True)
class BenchmarkRecord:
    name: str
    window_start: float
    window_end: float
    count: int
    p50: float
    p95: float
    error_rate: float
    throughput: float


def nearest_rank(sorted_values: list[float], percentile: float) -> float:
    """Nearest-rank percentile over an already-sorted list."""
    if not sorted_values:
        raise ValueError("no values")
    rank = max(1, math.ceil(percentile / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


@dataclass
class _Task:
    invocation_id: str
    topic: str
    payload: dict[str, Any]
    reply_to: str | None
    correlation_id: str | None


class _Runtime:
    """One registered function: queue, workers, idle bookkeeping."""

    def __init__(self, engine: "FaasEngine", descriptor: LambdaDescriptor, body: LambdaBody):
        self.engine = engine
        self.descriptor = descriptor
        self.body = body
        self.queue: deque[_Task] = deque()
        self.cond = threading.Condition()
        self.workers: list[threading.Thread] = []
        self.active = 0
        self.peak_active = 0
        self.last_busy = time.monotonic()
        self.stopped = False
        self.extra_subscription: SubscriptionHandle | None = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.descriptor.name, self.descriptor.version)

    def enqueue(self, task: _Task) -> None:
        with self.cond:
            self.queue.append(task)
            self.last_busy = time.monotonic()
            if len(self.queue) > len(self.workers) and len(self.workers) < self.descriptor.max_instances:
                self._spawn_locked()
            self.cond.notify()

    def spawn_min(self) -> None:
        with self.cond:
            while len(self.workers) < self.descriptor.min_instances:
                self._spawn_locked()

    def _spawn_locked(self) -> None:
        worker = threading.Thread(target=self._worker_loop, daemon=True)
        self.workers.append(worker)
        worker.start()

    def stop(self, drain_timeout: float) -> None:
        with self.cond:
            self.stopped = True
            self.cond.notify_all()
        deadline = time.monotonic() + drain_timeout
        for worker in list(self.workers):
            worker.join(max(0.0, deadline - time.monotonic()))
        if self.extra_subscription is not None:
            self.extra_subscription.close()

    def _worker_loop(self) -> None:
        me = threading.current_thread()
        idle_poll = min(0.05, max(0.005, self.descriptor.idle_ttl / 4))
        while True:
            with self.cond:
                while not self.queue and not self.stopped:
                    self.cond.wait(idle_poll)
                    if self.queue or self.stopped:
                        break
                    idle_for = time.monotonic() - self.last_busy
                    if (
                        idle_for > self.descriptor.idle_ttl
                        and len(self.workers) > self.descriptor.min_instances
                    ):
                        self.workers.remove(me)
                        return
                if self.stopped and not self.queue:
                    if me in self.workers:
                        self.workers.remove(me)
                    return
                task = self.queue.popleft()
                self.active += 1
                self.peak_active = max(self.peak_active, self.active)
            recycle = False
            try:
                recycle = self.engine._execute(self, task)
            finally:
                with self.cond:
                    self.active -= 1
                    self.last_busy = time.monotonic()
                    if recycle:
                        if me in self.workers:
                            self.workers.remove(me)
                        if not self.stopped and len(self.workers) < self.descriptor.min_instances:
                            self._spawn_locked()
                        return


class FaasEngine:
    def __init__(
        self,
        broker: Broker,
        clock: Clock | None = None,
        ids: IdSource | None = None,
        consumer_group: str = "faas",
    ):
        self._broker = broker
        self._clock = clock or SystemClock()
        self._ids = ids or IdSource()
        self._group = consumer_group
        self._runtimes: dict[tuple[str, str], _Runtime] = {}
        self._log: list[Invocation] = []
        self._lock = threading.RLock()
        self._dispatcher: SubscriptionHandle | None = None
        self._dispatcher_thread: threading.Thread | None = None
        self._closed = False

    # -- lifecycle ------------------------------------------------------------

    def register(self, descriptor: LambdaDescriptor, body: LambdaBody) -> None:
        with self._lock:
            key = (descriptor.name, descriptor.version)
            if key in self._runtimes:
                raise DuplicateRegistrationError(f"{key} already registered")
            runtime = _Runtime(self, descriptor, body)
            self._runtimes[key] = runtime
            if not _covered_by_dispatcher(descriptor.trigger_pattern):
                runtime.extra_subscription = self._broker.subscribe(
                    descriptor.trigger_pattern,
                    group=self._group,
                    member_name=f"faas-{descriptor.name}",
                )
                thread = threading.Thread(
                    target=self._consume,
                    args=(runtime.extra_subscription, runtime),
                    daemon=True,
                )
                thread.start()
        runtime.spawn_min()

    def terminate(self, name: str, version: str = "1") -> None:
        with self._lock:
            runtime = self._runtimes.pop((name, version), None)
        if runtime is None:
            raise UnknownLambdaError(f"({name}, {version})")
        runtime.stop(drain_timeout=runtime.descriptor.invocation_timeout)

    def start_dispatcher(self) -> None:
        """Consume ``faas/trigger/#`` and route events to matching functions."""
        if self._dispatcher is not None:
            return
        self._dispatcher = self._broker.subscribe(
            f"{TRIGGER_PREFIX}/#", group=self._group, member_name="faas-dispatcher"
        )
        self._dispatcher_thread = threading.Thread(
            target=self._consume, args=(self._dispatcher,), daemon=True
        )
        self._dispatcher_thread.start()

    def close(self) -> None:
        self._closed = True
        if self._dispatcher is not None:
            self._dispatcher.close()
        with self._lock:
            runtimes = list(self._runtimes.values())
            self._runtimes.clear()
        for runtime in runtimes:
            runtime.stop(drain_timeout=0.5)

    # -- triggering --------------------------------------------------------------

    def trigger(
        self,
        topic: str,
        payload: dict[str, Any],
        reply_to: str | None = None,
        correlation_id: str | None = None,
    ) -> str | None:
        """Route one event; returns the first invocation id, or None on no match."""
        with self._lock:
            matches = [
                rt
                for rt in self._runtimes.values()
                if _pattern_matches(rt.descriptor.trigger_pattern, topic)
            ]
        if not matches:
            self._broker.publish(DEAD_TOPIC, {"topic": topic, "payload": payload})
            return None
        first_id = None
        for runtime in matches:
            invocation_id = self._ids.next("inv")
            first_id = first_id or invocation_id
            runtime.enqueue(
                _Task(
                    invocation_id=invocation_id,
                    topic=topic,
                    payload=payload,
                    reply_to=reply_to,
                    correlation_id=correlation_id,
                )
            )
        return first_id

    def _consume(self, handle: SubscriptionHandle, only: _Runtime | None = None) -> None:
        while not handle.closed and not self._closed:
            env = handle.get(timeout=0.05)
            if env is None:
                continue
            try:
                self._route_envelope(env, only)
            except Exception:
                log.exception("failed to route event on %s", env.topic)
            finally:
                handle.ack(env.message_id)

    def _route_envelope(self, env: Envelope, only: _Runtime | None = None) -> None:
        try:
            payload = env.json()
        except (ValueError, UnicodeDecodeError):
            payload = {"raw": env.payload.decode(errors="replace")}
        if only is not None:
            only.enqueue(
                _Task(
                    invocation_id=self._ids.next("inv"),
                    topic=env.topic,
                    payload=payload,
                    reply_to=env.reply_to,
                    correlation_id=env.correlation_id,
                )
            )
            return
        self.trigger(
            env.topic, payload, reply_to=env.reply_to, correlation_id=env.correlation_id
        )

    def _execute(self, runtime: _Runtime, task: _Task) -> bool:
        """Run one invocation; returns True when the worker must be recycled."""
        descriptor = runtime.descriptor
        start = self._clock.now()
        wall_start = time.monotonic()
        outcome, error, result = "ok", None, None
        try:
            result = runtime.body(task.payload)
        except Exception as exc:  # function bodies are foreign code
            outcome, error = "error", f"{type(exc).__name__}: {exc}"
        end = self._clock.now()
        if time.monotonic() - wall_start > descriptor.invocation_timeout:
            outcome, error = "timeout", f"exceeded {descriptor.invocation_timeout}s"
        record = Invocation(
            invocation_id=task.invocation_id,
            name=descriptor.name,
            version=descriptor.version,
            topic=task.topic,
            start_ts=start,
            end_ts=end,
            outcome=outcome,
            error=error,
        )
        with self._lock:
            self._log.append(record)
        if outcome == "ok" and task.reply_to:
            self._broker.publish(
                task.reply_to,
                result if result is not None else {},
                correlation_id=task.correlation_id,
            )
        elif outcome != "ok":
            self._broker.publish(
                f"$dead/faas/{descriptor.name}",
                {"topic": task.topic, "payload": task.payload, "error": error},
            )
        return outcome == "timeout"

    # -- observation ----------------------------------------------------------------

    def invocations(self, name: str | None = None) -> list[Invocation]:
        with self._lock:
            return [r for r in self._log if name is None or r.name == name]

    def benchmark(self, name: str, window: tuple[float, float]) -> BenchmarkRecord:
        start, end = window
        rows = [r for r in self.invocations(name) if start <= r.start_ts <= end]
        if not rows:
            raise EmptyWindowError(f"no {name!r} invocations in [{start}, {end}]")
        latencies = sorted(r.latency for r in rows)
        errors = sum(1 for r in rows if r.outcome != "ok")
        length = max(end - start, 1e-9)
        return BenchmarkRecord(
            name=name,
            window_start=start,
            window_end=end,
            count=len(rows),
            p50=nearest_rank(latencies, 50),
            p95=nearest_rank(latencies, 95),
            error_rate=errors / len(rows),
            throughput=len(rows) / length,
        )

    def stats(self) -> dict[str, Any]:
        with self._lock:
            per_lambda = {}
            for runtime in self._runtimes.values():
                d = runtime.descriptor
                rows = [r for r in self._log if r.name == d.name]
                with runtime.cond:
                    per_lambda[d.name] = {
                        "version": d.version,
                        "workers": len(runtime.workers),
                        "active": runtime.active,
                        "peak_active": runtime.peak_active,
                        "queue_depth": len(runtime.queue),
                        "invocations": len(rows),
                        "ok": sum(1 for r in rows if r.outcome == "ok"),
                        "error": sum(1 for r in rows if r.outcome == "error"),
                        "timeout": sum(1 for r in rows if r.outcome == "timeout"),
                    }
            return {"lambdas": per_lambda, "invocations_total": len(self._log)}

    def worker_count(self, name: str, version: str = "1") -> int:
        with self._lock:
            runtime = self._runtimes.get((name, version))
            if runtime is None:
                raise UnknownLambdaError(f"({name}, {version})")
            with runtime.cond:
                return len(runtime.workers)

    def wait_idle(self, timeout: float = 5.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                runtimes = list(self._runtimes.values())
            busy = any(len(rt.queue) > 0 or rt.active > 0 for rt in runtimes)
            if not busy:
                return True
            time.sleep(0.005)
        return False


def _covered_by_dispatcher(pattern: str) -> bool:
    return pattern.startswith(f"{TRIGGER_PREFIX}/") or pattern == f"{TRIGGER_PREFIX}/#"


def _pattern_matches(pattern: str, topic: str) -> bool:
    from .broker import topic_matches

    return topic_matches(pattern, topic)


# -- shipped system function bodies ------------------------------------------------


def make_answering_logic(ingestion, sessions) -> LambdaBody:
    """Return each answer to the channel the conversation came from."""

    def body(event: dict[str, Any]) -> dict[str, Any]:
        session_id = event.get("session_id")
        session = sessions.get_session(session_id) if session_id else None
        if session is None:
            raise FaasError(f"unknown session {session_id!r}")
        channel_id = event.get("channel_id") or session.channel_id
        record = ingestion.render_answer(
            event["text"],
            channel_id,
            session_id=session_id,
            trace_id=event.get("trace_id"),
            turn=event.get("turn"),
        )
        return record

    return body


def make_http_rest(imdg, http_timeout: float = 3.0) -> LambdaBody:
    """Perform a programmed HTTP request and attach the response to a decision."""

    def body(event: dict[str, Any]) -> dict[str, Any]:
        data = event.get("body")
        request = urllib.request.Request(
            event["url"],
            data=json.dumps(data).encode() if data is not None else None,
            headers=event.get("headers") or {},
            method=event.get("method", "GET"),
        )
        try:
            with urllib.request.urlopen(request, timeout=http_timeout) as response:
                result = {
                    "status": response.status,
                    "body": response.read().decode(errors="replace"),
                }
        except urllib.error.HTTPError as exc:
            result = {"status": exc.code, "body": exc.read().decode(errors="replace")}
        except (urllib.error.URLError, OSError) as exc:
            raise FaasError(f"network-error: {exc}") from exc
        key = event.get("decision_key")
        if key:
            imdg.put(f"{key}/http", result)
        return result

    return body
