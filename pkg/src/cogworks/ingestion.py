"""Multi-channel data ingestion engine.

Front door of the platform: admits raw channel traffic through a per-channel
token bucket, translates every channel protocol to plain text (voice is
simulated as tagged transcripts), converts text into the common datagram
format, decides the dispatch topic, and publishes reliably to the broker.
On the way out it renders answers per channel modality (simulated speech for
voice channels).

Topic scheme: inbound ``ingest/<modality>/<channel_id>``, outbound
``egress/<channel_id>``.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any

from .broker import Broker, InvalidTopicError, PublishRejectedError
from .clock import Clock, IdSource, SystemClock

log = logging.getLogger(__name__)

TRANSCRIPT_TAG = "simulated-transcript:"
SPEECH_TAG = "simulated-speech:"
MODALITIES = ("voice", "text", "api")
DATAGRAM_VERSION = 1


class IngestionError(Exception):
    pass


class UnknownChannelError(IngestionError):
    pass


class RateLimitedError(IngestionError):
    pass


class EmptyTextError(IngestionError):
    pass


@dataclass(frozen=True)
class ChannelDescriptor:
    channel_id: str
    modality: str = "text"
    rate: float = 10.0  # tokens per second
    burst: int = 10
    tenant: str = "default"

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.rate <= 0 or self.burst < 1:
            raise ValueError("rate must be > 0 and burst >= 1")

    @property
    def ingress_topic(self) -> str:
        return f"ingest/{self.modality}/{self.channel_id}"

    @property
    def egress_topic(self) -> str:
        return f"egress/{self.channel_id}"


@dataclass(frozen=True)
class RawInput:
    channel_id: str
    body: str
    received_ts: float
    principal_hint: str | None = None


@dataclass(frozen=True)
class MetaDatagram:
    """Channel-independent record every inbound utterance is normalized to."""

    version: int
    trace_id: str
    channel_id: str
    modality: str
    text: str
    tenant: str
    timestamp: float
    session_hint: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, raw: str | bytes) -> "MetaDatagram":
        data = json.loads(raw)
        return cls(**data)


@dataclass(frozen=True)
class DispatchPlan:
    topic: str
    record: str


class TokenBucket:
    """Classic token bucket: refills at ``rate``/s up to ``burst``."""

    def __init__(self, rate: float, burst: int, now: float):
        self.rate = rate
        self.burst = burst
        self._tokens = float(burst)
        self._last = now

    def check(self, now: float) -> bool:
        elapsed = max(0.0, now - self._last)
        self._last = now
        self._tokens = min(float(self.burst), self._tokens + elapsed * self.rate)
        if self._tokens >= 1.0:
            self._tokens -= 1.0
            return True
        return False


@dataclass
class _ChannelState:
    descriptor: ChannelDescriptor
    bucket: TokenBucket
    bound_session: str | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)


class IngestionEngine:
    def __init__(self, broker: Broker, clock: Clock | None = None, ids: IdSource | None = None):
        self._broker = broker
        self._clock = clock or SystemClock()
        self._ids = ids or IdSource()
        self._channels: dict[str, _ChannelState] = {}
        self._lock = threading.Lock()

    # -- channel registry ------------------------------------------------------

    def register_channel(self, descriptor: ChannelDescriptor) -> None:
        with self._lock:
            self._channels[descriptor.channel_id] = _ChannelState(
                descriptor=descriptor,
                bucket=TokenBucket(descriptor.rate, descriptor.burst, self._clock.now()),
            )

    def channel(self, channel_id: str) -> ChannelDescriptor:
        return self._state(channel_id).descriptor

    def channels(self) -> list[ChannelDescriptor]:
        with self._lock:
            return [s.descriptor for s in self._channels.values()]

    def bind_session(self, channel_id: str, session_id: str) -> None:
        """Remember the session a channel's conversation is attached to."""
        self._state(channel_id).bound_session = session_id

    # -- inbound pipeline --------------------------------------------------------

    def rate_limit_check(self, channel_id: str, now: float | None = None) -> bool:
        state = self._state(channel_id)
        with state.lock:
            return state.bucket.check(self._clock.now() if now is None else now)

    def transcribe(self, raw: RawInput) -> str:
        """Voice bodies are tagged transcripts; text/api pass through unchanged."""
        state = self._state(raw.channel_id)
        if state.descriptor.modality == "voice" and raw.body.startswith(TRANSCRIPT_TAG):
            return raw.body[len(TRANSCRIPT_TAG):]
        return raw.body

    def to_meta(self, text: str, channel_id: str, now: float | None = None) -> MetaDatagram:
        if not text:
            raise EmptyTextError("datagram text must be non-empty")
        state = self._state(channel_id)
        return MetaDatagram(
            version=DATAGRAM_VERSION,
            trace_id=self._ids.next("trace"),
            channel_id=channel_id,
            modality=state.descriptor.modality,
            text=text,
            tenant=state.descriptor.tenant,
            timestamp=self._clock.now() if now is None else now,
            session_hint=state.bound_session,
        )

    @staticmethod
    def journalist_dispatch(datagram: MetaDatagram) -> DispatchPlan:
        """Pick the dispatch data model for a datagram (pure)."""
        topic = f"ingest/{datagram.modality}/{datagram.channel_id}"
        return DispatchPlan(topic=topic, record=datagram.to_json())

    def dispatch(self, plan: DispatchPlan, max_attempts: int = 50) -> str:
        """Reliable publish: retries transient broker refusals with backoff."""
        attempt = 0
        while True:
            try:
                return self._broker.publish(plan.topic, plan.record.encode())
            except PublishRejectedError:
                attempt += 1
                if attempt >= max_attempts:
                    raise
                time.sleep(min(0.1, 0.001 * (2 ** min(attempt, 6))))
            except InvalidTopicError:
                raise  # template topics make this unreachable in practice

    def ingest(self, channel_id: str, body: str, principal_hint: str | None = None) -> MetaDatagram:
        """Full front path: rate limit, transcribe, normalize, dispatch."""
        state = self._state(channel_id)
        if state.descriptor.modality == "voice" and not body.startswith(TRANSCRIPT_TAG):
            body = TRANSCRIPT_TAG + body
        raw = RawInput(
            channel_id=channel_id,
            body=body,
            received_ts=self._clock.now(),
            principal_hint=principal_hint,
        )
        if not self.rate_limit_check(channel_id):
            raise RateLimitedError(f"channel {channel_id!r} over its rate limit")
        text = self.transcribe(raw)
        datagram = self.to_meta(text, channel_id)
        self.dispatch(self.journalist_dispatch(datagram))
        return datagram

    # -- outbound ---------------------------------------------------------------

    def render_answer(
        self,
        text: str,
        channel_id: str,
        session_id: str | None = None,
        trace_id: str | None = None,
        turn: int | None = None,
    ) -> dict[str, Any]:
        """Render per channel modality and publish on the channel's egress topic."""
        state = self._state(channel_id)
        modality = state.descriptor.modality
        if modality == "voice":
            reply = f'{SPEECH_TAG}"{text}"'
        else:
            reply = text
        record = {
            "reply": reply,
            "text": text,
            "session": session_id,
            "modality": modality,
            "trace_id": trace_id,
            "turn": turn,
        }
        self._broker.publish(state.descriptor.egress_topic, record)
        return record

    def _state(self, channel_id: str) -> _ChannelState:
        with self._lock:
            state = self._channels.get(channel_id)
        if state is None:
            raise UnknownChannelError(f"channel {channel_id!r} is not registered")
        return state
