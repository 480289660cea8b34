"""Embedded pub/sub message broker: the sole bus between platform modules.

Delivery semantics:

* at-least-once -- a delivered message is redelivered after ``ack_timeout``
  until acked, then dead-lettered on ``$dead/<topic>`` once it has been
  attempted ``max_redeliveries + 1`` times;
* shared subscriptions -- subscriptions sharing a non-empty group name and
  filter form one consumer group; each message is assigned to exactly one
  live member (round-robin by default, pluggable);
* request-response -- correlation ids plus ephemeral reply topics;
* MQTT-style filters -- ``+`` matches one segment, ``#`` (final only)
  matches any suffix including none.

Ordering is per-publisher per-topic FIFO for first attempts; redeliveries may
reorder. State is in-memory only.
"""

from __future__ import annotations

import json
import logging
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Protocol

from .clock import Clock, IdSource, SystemClock

log = logging.getLogger(__name__)

DEAD_LETTER_PREFIX = "$dead"
DEFAULT_ACK_TIMEOUT = 2.0
DEFAULT_MAX_REDELIVERIES = 5


class BrokerError(Exception):
    pass


class InvalidTopicError(BrokerError):
    """Publish topic is empty, has empty segments, or contains wildcards."""


class InvalidFilterError(BrokerError):
    """Subscription filter is syntactically invalid."""


class UnknownMemberError(BrokerError):
    """remove_member addressed a group member that does not exist."""


class RequestTimeoutError(BrokerError):
    """No correlated response arrived within the request deadline."""


class PublishRejectedError(BrokerError):
    """Transient publish refusal (raised only via the fault-injection hook)."""


def split_topic(topic: str) -> list[str]:
    return topic.split("/")


def validate_topic(topic: str) -> None:
    if not topic:
        raise InvalidTopicError("empty topic")
    for seg in split_topic(topic):
        if not seg:
            raise InvalidTopicError(f"empty segment in topic {topic!r}")
        if "+" in seg or "#" in seg:
            raise InvalidTopicError(f"wildcard in publish topic {topic!r}")


def validate_filter(topic_filter: str) -> None:
    if not topic_filter:
        raise InvalidFilterError("empty filter")
    segments = split_topic(topic_filter)
    for i, seg in enumerate(segments):
        if not seg:
            raise InvalidFilterError(f"empty segment in filter {topic_filter!r}")
        if seg == "#":
            if i != len(segments) - 1:
                raise InvalidFilterError(f"'#' must be final in {topic_filter!r}")
        elif seg != "+" and ("+" in seg or "#" in seg):
            raise InvalidFilterError(
                f"wildcard mixed into literal segment in {topic_filter!r}"
            )


def topic_matches(topic_filter: str, topic: str) -> bool:
    """Segment-wise filter match; assumes both sides already validated."""
    fparts = split_topic(topic_filter)
    tparts = split_topic(topic)
    for i, fseg in enumerate(fparts):
        if fseg == "#":
            return True
        if i >= len(tparts):
            return False
        if fseg != "+" and fseg != tparts[i]:
            return False
    return len(tparts) == len(fparts)


def encode_payload(payload: Any) -> bytes:
    """Payloads are opaque bytes on the wire; dicts/str encode as canonical JSON/UTF-8."""
    if isinstance(payload, bytes):
        return payload
    if isinstance(payload, str):
        return payload.encode()
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


@dataclass(frozen=True)
class Envelope:
    """One broker message as seen by a consumer."""

    message_id: str
    topic: str
    payload: bytes
    correlation_id: str | None = None
    reply_to: str | None = None
    publish_ts: float = 0.0
    redelivery_count: int = 0

    def json(self) -> Any:
        return json.loads(self.payload.decode())


class GroupPolicy(Protocol):
    """Chooses which live member a group message goes to."""

    def assign(self, members: list["SubscriptionHandle"]) -> "SubscriptionHandle":
        ...


class RoundRobinPolicy:
    def __init__(self) -> None:
        self._next = 0

    def assign(self, members: list["SubscriptionHandle"]) -> "SubscriptionHandle":
        member = members[self._next % len(members)]
        self._next += 1
        return member


class _Delivery:
    """Lifecycle of one (consumer queue, message) pair."""

    __slots__ = ("envelope", "attempts", "status", "deadline")

    def __init__(self, envelope: Envelope):
        self.envelope = envelope
        self.attempts = 0
        self.status = "pending"
        self.deadline: float | None = None


class SubscriptionHandle:
    """A consumer's view of one subscription (or one group membership).

    ``get`` blocks on real time; ``ack`` confirms processing. Handles are
    safe to share between a consumer thread and the broker's sweeper.
    """

    def __init__(
        self,
        broker: "Broker",
        subscription_id: str,
        topic_filter: str,
        group: str | None,
        member_name: str,
        ack_timeout: float,
        max_redeliveries: int,
    ):
        self.subscription_id = subscription_id
        self.filter = topic_filter
        self.group = group
        self.member_name = member_name
        self.ack_timeout = ack_timeout
        self.max_redeliveries = max_redeliveries
        self._broker = broker
        self._queue: deque[_Delivery] = deque()
        self._outstanding: dict[str, _Delivery] = {}
        self._cond = threading.Condition(broker._lock)
        self._closed = False

    @property
    def closed(self) -> bool:
        return self._closed

    def get(self, timeout: float | None = None) -> Envelope | None:
        """Next envelope for this handle, or None on timeout / after close."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                if self._closed:
                    return None
                if self._queue:
                    delivery = self._queue.popleft()
                    return self._broker._mark_delivered(self, delivery)
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return None
                    self._cond.wait(remaining)
                else:
                    self._cond.wait()

    def ack(self, message_id: str) -> bool:
        """Acknowledge a delivery. Unknown ids are logged, never fatal."""
        return self._broker._ack(self, message_id)

    def close(self) -> None:
        """Leave the subscription; pending group messages move to survivors."""
        self._broker._close_handle(self)

    def __iter__(self) -> Iterable[Envelope]:
        while True:
            env = self.get()
            if env is None:
                return
            yield env


class Broker:
    """In-memory at-least-once broker; see module docstring for semantics."""

    def __init__(
        self,
        clock: Clock | None = None,
        ids: IdSource | None = None,
        sweep_interval: float = 0.02,
        policy_factory: Callable[[], GroupPolicy] = RoundRobinPolicy,
    ):
        self._clock = clock or SystemClock()
        self._ids = ids or IdSource()
        self._lock = threading.RLock()
        self._subs: dict[str, SubscriptionHandle] = {}
        self._groups: dict[tuple[str, str], _Group] = {}
        self._policy_factory = policy_factory
        self._stats = {
            "published": 0,
            "delivered": 0,
            "redelivered": 0,
            "acked": 0,
            "dead_lettered": 0,
            "ack_dropped": 0,
        }
        self._ack_drop_prob = 0.0
        self._chaos_rng = random.Random()
        self._publish_failures_left = 0
        self._closed = False
        self._sweeper = threading.Thread(
            target=self._sweep_loop, args=(sweep_interval,), daemon=True
        )
        self._sweeper.start()

    # -- publishing ----------------------------------------------------------

    def publish(
        self,
        topic: str,
        payload: Any,
        reply_to: str | None = None,
        correlation_id: str | None = None,
    ) -> str:
        validate_topic(topic)
        envelope = Envelope(
            message_id=self._ids.next("msg"),
            topic=topic,
            payload=encode_payload(payload),
            correlation_id=correlation_id,
            reply_to=reply_to,
            publish_ts=self._clock.now(),
        )
        with self._lock:
            if self._publish_failures_left > 0:
                self._publish_failures_left -= 1
                raise PublishRejectedError("injected transient refusal")
            self._stats["published"] += 1
            for handle in self._subs.values():
                if handle.group is None and topic_matches(handle.filter, topic):
                    self._enqueue(handle, _Delivery(envelope))
            for grp in self._groups.values():
                if topic_matches(grp.filter, topic):
                    grp.dispatch(_Delivery(envelope))
        return envelope.message_id

    def request(self, topic: str, payload: Any, timeout: float) -> bytes:
        """Publish and wait for the first response carrying our correlation id."""
        reply_topic = f"$reply/{self._ids.next('reply')}"
        correlation_id = self._ids.next("corr")
        sub = self.subscribe(reply_topic)
        try:
            self.publish(topic, payload, reply_to=reply_topic, correlation_id=correlation_id)
            deadline = time.monotonic() + timeout
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise RequestTimeoutError(f"no response on {topic!r} within {timeout}s")
                env = sub.get(remaining)
                if env is None:
                    continue
                sub.ack(env.message_id)
                if env.correlation_id == correlation_id:
                    return env.payload
        finally:
            sub.close()

    # -- subscribing ---------------------------------------------------------

    def subscribe(
        self,
        topic_filter: str,
        group: str | None = None,
        ack_timeout: float = DEFAULT_ACK_TIMEOUT,
        max_redeliveries: int = DEFAULT_MAX_REDELIVERIES,
        member_name: str | None = None,
    ) -> SubscriptionHandle:
        validate_filter(topic_filter)
        if max_redeliveries < 1:
            raise ValueError("max_redeliveries must be positive")
        with self._lock:
            sub_id = self._ids.next("sub")
            handle = SubscriptionHandle(
                broker=self,
                subscription_id=sub_id,
                topic_filter=topic_filter,
                group=group or None,
                member_name=member_name or sub_id,
                ack_timeout=ack_timeout,
                max_redeliveries=max_redeliveries,
            )
            self._subs[sub_id] = handle
            if handle.group:
                grp = self._groups.get((handle.group, topic_filter))
                if grp is None:
                    grp = _Group(self, handle.group, topic_filter, self._policy_factory())
                    self._groups[(handle.group, topic_filter)] = grp
                grp.join(handle)
            return handle

    def remove_member(self, group: str, member_name: str) -> None:
        """Logically kill a group member; its pending messages are rescheduled."""
        with self._lock:
            for grp in self._groups.values():
                if grp.name != group:
                    continue
                for member in grp.members:
                    if member.member_name == member_name:
                        self._close_handle(member)
                        return
            raise UnknownMemberError(f"no member {member_name!r} in group {group!r}")

    # -- chaos / fault hooks ---------------------------------------------------

    def set_ack_drop(self, probability: float, seed: int | None = None) -> None:
        if not 0.0 <= probability <= 1.0:
            raise ValueError("probability must be in [0,1]")
        with self._lock:
            self._ack_drop_prob = probability
            if seed is not None:
                self._chaos_rng = random.Random(seed)

    def inject_publish_failures(self, count: int) -> None:
        """Make the next ``count`` publishes fail with PublishRejectedError."""
        with self._lock:
            self._publish_failures_left = count

    # -- observation -----------------------------------------------------------

    def stats(self) -> dict[str, int]:
        with self._lock:
            snapshot = dict(self._stats)
            snapshot["outstanding"] = sum(
                len(h._outstanding) for h in self._subs.values()
            )
            snapshot["queued"] = sum(len(h._queue) for h in self._subs.values()) + sum(
                len(g.backlog) for g in self._groups.values()
            )
            return snapshot

    def wait_idle(self, timeout: float = 5.0, settle: float = 0.0) -> bool:
        """Block until no message is queued or awaiting ack (real-time bound)."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            stats = self.stats()
            if stats["outstanding"] == 0 and stats["queued"] == 0:
                if settle:
                    time.sleep(settle)
                    stats = self.stats()
                    if stats["outstanding"] or stats["queued"]:
                        continue
                return True
            time.sleep(0.005)
        return False

    def sweep(self) -> None:
        """Run one redelivery sweep now (tests drive this with manual clocks)."""
        self._sweep(self._clock.now())

    def close(self) -> None:
        with self._lock:
            self._closed = True
            for handle in list(self._subs.values()):
                self._close_handle(handle)

    # -- internals -------------------------------------------------------------

    def _enqueue(self, handle: SubscriptionHandle, delivery: _Delivery) -> None:
        handle._queue.append(delivery)
        handle._cond.notify()

    def _mark_delivered(self, handle: SubscriptionHandle, delivery: _Delivery) -> Envelope:
        delivery.attempts += 1
        delivery.deadline = self._clock.now() + handle.ack_timeout
        env = replace(delivery.envelope, redelivery_count=delivery.attempts - 1)
        handle._outstanding[env.message_id] = delivery
        if delivery.attempts == 1:
            self._stats["delivered"] += 1
        else:
            self._stats["redelivered"] += 1
        return env

    def _ack(self, handle: SubscriptionHandle, message_id: str) -> bool:
        with self._lock:
            if self._ack_drop_prob and self._chaos_rng.random() < self._ack_drop_prob:
                self._stats["ack_dropped"] += 1
                return True
            delivery = handle._outstanding.pop(message_id, None)
            if delivery is None:
                log.warning(
                    "ack for unknown message %s on %s (already acked, dead, or not delivered here)",
                    message_id,
                    handle.member_name,
                )
                return False
            delivery.status = "acked"
            self._stats["acked"] += 1
            return True

    def _close_handle(self, handle: SubscriptionHandle) -> None:
        with self._lock:
            if handle._closed:
                return
            handle._closed = True
            self._subs.pop(handle.subscription_id, None)
            orphans = list(handle._queue) + list(handle._outstanding.values())
            handle._queue.clear()
            handle._outstanding.clear()
            handle._cond.notify_all()
            if handle.group:
                grp = self._groups.get((handle.group, handle.filter))
                if grp is not None:
                    grp.leave(handle, orphans)

    def _sweep_loop(self, interval: float) -> None:
        while not self._closed:
            time.sleep(interval)
            try:
                self._sweep(self._clock.now())
            except Exception:  # sweeper must never die
                log.exception("redelivery sweep failed")

    def _sweep(self, now: float) -> None:
        with self._lock:
            for handle in list(self._subs.values()):
                expired = [
                    (mid, d)
                    for mid, d in handle._outstanding.items()
                    if d.deadline is not None and d.deadline <= now
                ]
                for mid, delivery in expired:
                    del handle._outstanding[mid]
                    if delivery.attempts >= handle.max_redeliveries + 1:
                        self._dead_letter(delivery)
                    elif handle.group:
                        grp = self._groups.get((handle.group, handle.filter))
                        if grp is not None:
                            grp.dispatch(delivery)
                    else:
                        self._enqueue(handle, delivery)

    def _dead_letter(self, delivery: _Delivery) -> None:
        delivery.status = "dead"
        self._stats["dead_lettered"] += 1
        env = delivery.envelope
        dead_topic = f"{DEAD_LETTER_PREFIX}/{env.topic}"
        dead = Envelope(
            message_id=self._ids.next("msg"),
            topic=dead_topic,
            payload=env.payload,
            publish_ts=self._clock.now(),
        )
        self._stats["published"] += 1
        for handle in self._subs.values():
            if handle.group is None and topic_matches(handle.filter, dead_topic):
                self._enqueue(handle, _Delivery(dead))
        for grp in self._groups.values():
            if topic_matches(grp.filter, dead_topic):
                grp.dispatch(_Delivery(dead))


class _Group:
    """One consumer group: a (name, filter) pair with live members."""

    def __init__(self, broker: Broker, name: str, topic_filter: str, policy: GroupPolicy):
        self._broker = broker
        self.name = name
        self.filter = topic_filter
        self.policy = policy
        self.members: list[SubscriptionHandle] = []
        self.backlog: deque[_Delivery] = deque()

    def join(self, handle: SubscriptionHandle) -> None:
        self.members.append(handle)
        while self.backlog:
            self.dispatch(self.backlog.popleft())

    def leave(self, handle: SubscriptionHandle, orphans: list[_Delivery]) -> None:
        self.members = [m for m in self.members if m is not handle]
        for delivery in orphans:
            self.dispatch(delivery)

    def dispatch(self, delivery: _Delivery) -> None:
        if not self.members:
            self.backlog.append(delivery)
            return
        member = self.policy.assign(self.members)
        self._broker._enqueue(member, delivery)
