"""Core services: rooms, sessions, conversational context, the datagram
interpreter, the reasoning engine, and the authentication engine.

A consumer group of identical core workers pulls datagrams off the ingest
topics. Every piece of shared state (rooms, sessions, tokens, decisions,
dedup markers, the reasoning ruleset) lives in the data grid, so any worker
can pick up any turn; trace-id dedup turns broker at-least-once delivery
into effectively-once business actions.

Turn flow: dedup -> room/session -> route -> extract -> context update ->
interpret into micro-operations -> reason each op into one event. Data ops
(variable reads, actuations) are gated on a live access token.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

from .broker import Broker, RequestTimeoutError
from .clock import Clock, IdSource, SystemClock
from .imdg import Imdg
from .ingestion import MetaDatagram
from .nlu import (
    ENTITY_NONE,
    INTENT_LOGIN,
    INTENT_LOGOUT,
    INTENT_READ_OEE,
    INTENT_UNKNOWN,
    INTENT_WORK_ORDER,
    IntentResult,
    deadline_to_hours,
)

log = logging.getLogger(__name__)

AUTH_REQUEST_TOPIC = "auth/request"
JOURNAL_TOPIC = "journal/session"
FAAS_TRIGGER_PREFIX = "faas/trigger"
RULESET_KEY = "ruleset/reasoning"

OP_AUTHENTICATE = "AUTHENTICATE"
OP_QUERY_VAR = "QUERY_VAR"
OP_ACTUATE = "ACTUATE"
OP_RESPOND = "RESPOND"
OP_JOURNAL = "JOURNAL"
OP_KINDS = (OP_AUTHENTICATE, OP_QUERY_VAR, OP_ACTUATE, OP_RESPOND, OP_JOURNAL)
GATED_OPS = (OP_QUERY_VAR, OP_ACTUATE)

WELCOME_TEMPLATE = "Welcome, {principal}."
AUTH_FAILED_TEXT = "Authentication failed."
AUTH_REQUIRED_TEXT = "authentication required"
AUTH_UNAVAILABLE_TEXT = "Authentication service unavailable."
LOGOUT_TEXT = "Logged out. Goodbye."
HELP_TEXT = (
    "Sorry, I did not understand. You can log in with your secret, "
    "ask for the OEE, or dispatch a work order."
)
MACHINE_SILENT_TEXT = "The machine did not answer."


class CoreError(Exception):
    pass


class UnknownSessionError(CoreError):
    pass


class MalformedSlotsError(CoreError):
    pass


class MissingRulesetError(CoreError):
    pass


class AuthFailureError(CoreError):
    pass


class DirectoryUnavailableError(CoreError):
    pass


# -- domain types -------------------------------------------------------------


@dataclass
class Room:
    room_id: str
    channel_id: str
    created_ts: float


@dataclass
class Session:
    session_id: str
    room_id: str
    channel_id: str
    principal: str | None = None
    state_vars: dict[str, Any] = field(default_factory=dict)
    status: str = "active"
    last_activity_ts: float = 0.0


@dataclass(frozen=True)
class ContextFrame:
    active_intent: str | None = None
    active_entity: dict[str, Any] | None = None
    slot_memory: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class MicroOp:
    kind: str
    args: dict[str, Any]

    def __post_init__(self) -> None:
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown micro-op kind {self.kind!r}")
        required = {
            OP_AUTHENTICATE: ("secret", "entity"),
            OP_QUERY_VAR: ("device", "variable"),
            OP_ACTUATE: ("device", "order_units", "deadline_hours"),
            OP_RESPOND: (),
            OP_JOURNAL: ("record",),
        }[self.kind]
        missing = [k for k in required if k not in self.args]
        if missing:
            raise ValueError(f"{self.kind} missing args: {missing}")
        if self.kind == OP_RESPOND and not (
            self.args.get("text") or self.args.get("source")
        ):
            raise ValueError("RESPOND needs text or a turn-state source")


@dataclass(frozen=True)
class ReasoningRule:
    rule_id: str
    kind: str
    action: str
    priority: int
    requires_auth: bool = False
    event_topic: str | None = None  # default: faas/trigger/<action>

    def topic(self) -> str:
        return self.event_topic or f"{FAAS_TRIGGER_PREFIX}/{self.action}"


@dataclass(frozen=True)
class AccessToken:
    token_id: str
    principal: str
    issued_ts: float
    ttl: float
    roles: tuple[str, ...] = ()

    def valid(self, now: float) -> bool:
        return now < self.issued_ts + self.ttl


def default_ruleset() -> list[ReasoningRule]:
    return [
        ReasoningRule("authenticate", OP_AUTHENTICATE, "authenticator", 10),
        ReasoningRule("query", OP_QUERY_VAR, "oee-reader", 10, requires_auth=True),
        ReasoningRule("actuate", OP_ACTUATE, "order-dispatcher", 10, requires_auth=True),
        ReasoningRule("respond", OP_RESPOND, "answering-logic", 10),
        ReasoningRule("journal", OP_JOURNAL, "journal-writer", 10, event_topic=JOURNAL_TOPIC),
    ]


def ruleset_from_config(config: list[dict[str, Any]]) -> list[ReasoningRule]:
    return [ReasoningRule(**entry) for entry in config]


# -- rooms and sessions ---------------------------------------------------------


class SessionStore:
    """Room manager plus session manager, both backed by the data grid."""

    def __init__(
        self,
        imdg: Imdg,
        clock: Clock | None = None,
        ids: IdSource | None = None,
        autopark_after: float = 1800.0,
    ):
        self._imdg = imdg
        self._clock = clock or SystemClock()
        self._ids = ids or IdSource()
        self._autopark_after = autopark_after

    def get_or_create_room(self, channel_id: str) -> Room:
        key = f"room/{channel_id}"
        room = Room(
            room_id=self._ids.next("room"),
            channel_id=channel_id,
            created_ts=self._clock.now(),
        )
        if not self._imdg.put_if_absent(key, room):
            room = self._imdg.get(key)
        return room

    def get_or_create_session(self, room: Room, session_hint: str | None = None) -> Session:
        if session_hint:
            existing = self.get_session(session_hint)
            if existing is not None and existing.status in ("active", "parked"):
                if existing.status == "parked":
                    existing = self._mutate(
                        existing.session_id, lambda s: replace_status(s, "active")
                    )
                return existing
        session = Session(
            session_id=self._ids.next("session"),
            room_id=room.room_id,
            channel_id=room.channel_id,
            last_activity_ts=self._clock.now(),
        )
        self._imdg.put(f"session/{session.session_id}", session)
        return session

    def get_session(self, session_id: str) -> Session | None:
        session = self._imdg.get(f"session/{session_id}")
        if session is None:
            return None
        if (
            session.status == "active"
            and self._clock.now() - session.last_activity_ts > self._autopark_after
        ):
            session = self._mutate(session_id, lambda s: replace_status(s, "parked"))
        return session

    def park_session(self, session_id: str) -> None:
        session = self._imdg.get(f"session/{session_id}")
        if session is None:
            raise UnknownSessionError(session_id)
        if session.status != "parked":
            self._mutate(session_id, lambda s: replace_status(s, "parked"))

    def close_session(self, session_id: str) -> None:
        if self._imdg.get(f"session/{session_id}") is None:
            raise UnknownSessionError(session_id)
        self._mutate(session_id, lambda s: replace_status(s, "closed"))

    def set_state_var(self, session_id: str, name: str, value: Any) -> None:
        def apply(s: Session) -> Session:
            s.state_vars[name] = value
            return s

        self._mutate(session_id, apply)

    def set_principal(self, session_id: str, principal: str | None) -> None:
        def apply(s: Session) -> Session:
            s.principal = principal
            return s

        self._mutate(session_id, apply)

    def touch(self, session_id: str) -> None:
        def apply(s: Session) -> Session:
            s.last_activity_ts = self._clock.now()
            return s

        self._mutate(session_id, apply)

    def _mutate(self, session_id: str, fn: Callable[[Session], Session]) -> Session:
        def apply(current: Session | None) -> Session:
            if current is None:
                raise UnknownSessionError(session_id)
            return fn(current)

        return self._imdg.update(f"session/{session_id}", apply)


def replace_status(session: Session, status: str) -> Session:
    session.status = status
    return session


# -- context -----------------------------------------------------------------------


def context_update(frame: ContextFrame, result: IntentResult) -> ContextFrame:
    """Fold an extraction result into the conversation context.

    Explicit intents replace the active intent; an entity-only turn keeps the
    intent and swaps the entity; slots always merge into slot memory.
    """
    intent = frame.active_intent
    if result.explicit and result.intent != INTENT_UNKNOWN:
        intent = result.intent
    entity = frame.active_entity
    if result.entity != ENTITY_NONE:
        value = result.slots.get("device") or (frame.active_entity or {}).get("value")
        entity = {"type": result.entity, "value": value}
    return ContextFrame(
        active_intent=intent,
        active_entity=entity,
        slot_memory={**frame.slot_memory, **result.slots},
    )


# -- interpretation ------------------------------------------------------------------


class Interpreter:
    """Decodes one datagram + extraction result into micro-operations."""

    def __init__(
        self,
        clock: Clock | None = None,
        default_device: str = "press01",
        default_deadline_hours: float = 168.0,
    ):
        self._clock = clock or SystemClock()
        self.default_device = default_device
        self.default_deadline_hours = default_deadline_hours

    def interpret(
        self,
        datagram: MetaDatagram,
        result: IntentResult,
        session: Session,
        frame: ContextFrame | None = None,
    ) -> list[MicroOp]:
        frame = frame or ContextFrame()
        device = (
            result.slots.get("device")
            or frame.slot_memory.get("device")
            or (frame.active_entity or {}).get("value")
            or self.default_device
        )
        journal = MicroOp(
            OP_JOURNAL,
            {
                "record": {
                    "session_id": session.session_id,
                    "request": datagram.text,
                    "intent": result.intent,
                    "entity": result.entity,
                    "trace_id": datagram.trace_id,
                    "ts": self._clock.now(),
                }
            },
        )
        respond_from_turn = MicroOp(OP_RESPOND, {"source": "turn"})

        if result.intent == INTENT_LOGIN:
            return [
                MicroOp(
                    OP_AUTHENTICATE,
                    {"secret": result.slots["secret"], "entity": result.entity},
                ),
                respond_from_turn,
                journal,
            ]
        if result.intent == INTENT_READ_OEE:
            return [
                MicroOp(OP_QUERY_VAR, {"device": device, "variable": "oee"}),
                respond_from_turn,
                journal,
            ]
        if result.intent == INTENT_WORK_ORDER:
            units_raw = result.slots.get("units", "")
            if not (units_raw.isdigit() and int(units_raw) > 0):
                raise MalformedSlotsError(f"units {units_raw!r} is not a positive integer")
            hours = None
            phrase = result.slots.get("deadline")
            if phrase:
                hours = deadline_to_hours(phrase, self._clock.now())
            if hours is None:
                hours = self.default_deadline_hours
            return [
                MicroOp(
                    OP_ACTUATE,
                    {
                        "device": device,
                        "order_units": int(units_raw),
                        "deadline_hours": hours,
                    },
                ),
                respond_from_turn,
                journal,
            ]
        if result.intent == INTENT_LOGOUT:
            return [MicroOp(OP_RESPOND, {"text": LOGOUT_TEXT}), journal]
        return [MicroOp(OP_RESPOND, {"text": HELP_TEXT}), journal]


# -- authentication -------------------------------------------------------------------


class Directory:
    """In-process principal directory (secrets, roles); the query side of LDAP."""

    def __init__(self, principals: list[dict[str, Any]]):
        self._by_secret = {
            p["secret"]: (p["principal"], tuple(p.get("roles", ()))) for p in principals
        }
        self._available = True

    @classmethod
    def from_config(cls, config: dict[str, Any]) -> "Directory":
        return cls(config.get("principals", []))

    def set_available(self, available: bool) -> None:
        self._available = available

    def lookup_by_secret(self, secret: str) -> tuple[str, tuple[str, ...]] | None:
        if not self._available:
            raise DirectoryUnavailableError("directory outage (injected)")
        return self._by_secret.get(secret)


class AuthEngine:
    """Issues and validates access tokens; answers on the auth request topic."""

    def __init__(
        self,
        imdg: Imdg,
        directory: Directory,
        sessions: SessionStore,
        clock: Clock | None = None,
        ids: IdSource | None = None,
        token_ttl: float = 900.0,
    ):
        self._imdg = imdg
        self._directory = directory
        self._sessions = sessions
        self._clock = clock or SystemClock()
        self._ids = ids or IdSource()
        self.token_ttl = token_ttl

    def authenticate(self, secret: str, entity: str, session_id: str) -> AccessToken:
        hit = self._directory.lookup_by_secret(secret)
        if hit is None:
            raise AuthFailureError("no principal matches the supplied secret")
        principal, roles = hit
        token = AccessToken(
            token_id=self._ids.next("token"),
            principal=principal,
            issued_ts=self._clock.now(),
            ttl=self.token_ttl,
            roles=roles,
        )
        self._imdg.put(f"token/{session_id}", token, ttl=self.token_ttl)
        self._sessions.set_principal(session_id, principal)
        return token

    def token_for(self, session_id: str) -> AccessToken | None:
        token = self._imdg.get(f"token/{session_id}")
        if token is None or not token.valid(self._clock.now()):
            return None
        return token

    def revoke(self, session_id: str) -> None:
        self._imdg.delete(f"token/{session_id}")

    def handle_request(self, payload: dict[str, Any]) -> dict[str, Any]:
        """Responder body for the auth request topic."""
        try:
            token = self.authenticate(
                payload["secret"], payload.get("entity", ENTITY_NONE), payload["session_id"]
            )
            return {
                "ok": True,
                "principal": token.principal,
                "token_id": token.token_id,
                "message": WELCOME_TEMPLATE.format(principal=token.principal),
            }
        except AuthFailureError:
            return {"ok": False, "error": "auth-failure", "message": AUTH_FAILED_TEXT}
        except DirectoryUnavailableError:
            return {
                "ok": False,
                "error": "directory-unavailable",
                "message": AUTH_UNAVAILABLE_TEXT,
            }


# -- reasoning ----------------------------------------------------------------------


@dataclass
class TurnState:
    """Scratch state accumulated while reasoning over one turn's ops."""

    trace_id: str
    session_id: str
    channel_id: str
    intent: str
    entity: str
    request_text: str
    response: str | None = None
    response_emitted: bool = False
    turn_seq: int = 0


class ReasoningEngine:
    """Turns micro-operations into events that trigger platform functions.

    Data ops run as request-response against their function so the turn's
    answer can reflect the outcome; respond/journal ops are fire-and-forget.
    Every op leaves one decision record in the grid.
    """

    def __init__(
        self,
        broker: Broker,
        imdg: Imdg,
        auth: AuthEngine,
        clock: Clock | None = None,
        request_timeout: float = 5.0,
        http_bindings: list[dict[str, Any]] | None = None,
    ):
        self._broker = broker
        self._imdg = imdg
        self._auth = auth
        self._clock = clock or SystemClock()
        self._request_timeout = request_timeout
        self._http_bindings = list(http_bindings or ())

    def reason(self, ops: list[MicroOp], session: Session, turn: TurnState) -> list[dict[str, Any]]:
        rules = self._imdg.get(RULESET_KEY)
        if not rules:
            raise MissingRulesetError(f"no ruleset under {RULESET_KEY!r}")
        events = []
        for op in ops:
            effective = op
            if op.kind in GATED_OPS and self._auth.token_for(session.session_id) is None:
                effective = MicroOp(OP_RESPOND, {"text": AUTH_REQUIRED_TEXT})
            rule = self._select_rule(rules, effective.kind, session)
            outcome = self._fire(rule, effective, session, turn)
            seq = self._imdg.increment(f"decision_seq/{session.session_id}")
            decision_key = f"decision/{session.session_id}/{seq}"
            decision = {
                "seq": seq,
                "kind": op.kind,
                "executed_kind": effective.kind,
                "rule_id": rule.rule_id,
                "action": rule.action,
                "outcome": outcome,
                "trace_id": turn.trace_id,
                "ts": self._clock.now(),
            }
            self._imdg.put(decision_key, decision)
            self._fire_http_bindings(effective.kind, decision_key, session)
            events.append(
                {
                    "seq": seq,
                    "kind": effective.kind,
                    "action": rule.action,
                    "topic": rule.topic(),
                    "outcome": outcome,
                    "decision_key": decision_key,
                }
            )
        return events

    def _select_rule(
        self, rules: list[ReasoningRule], kind: str, session: Session
    ) -> ReasoningRule:
        authed = self._auth.token_for(session.session_id) is not None
        candidates = [
            r for r in rules if r.kind == kind and (not r.requires_auth or authed)
        ]
        if not candidates:
            raise MissingRulesetError(f"no reasoning rule for micro-op kind {kind!r}")
        return min(candidates, key=lambda r: r.priority)

    def _fire(
        self, rule: ReasoningRule, op: MicroOp, session: Session, turn: TurnState
    ) -> str:
        topic = rule.topic()
        if op.kind == OP_AUTHENTICATE:
            payload = {
                "secret": op.args["secret"],
                "entity": op.args["entity"],
                "session_id": session.session_id,
                "channel_id": turn.channel_id,
            }
            response = self._request(topic, payload, turn)
            if response is None:
                return "timeout"
            turn.response = response.get("message", AUTH_FAILED_TEXT)
            return "ok" if response.get("ok") else response.get("error", "auth-failure")
        if op.kind == OP_QUERY_VAR:
            payload = {
                "device": op.args["device"],
                "variable": op.args["variable"],
                "session_id": session.session_id,
            }
            response = self._request(topic, payload, turn)
            if response is None:
                return "timeout"
            if "error" in response:
                turn.response = f"Could not read {op.args['variable']}: {response['error']}"
                return "error"
            turn.response = (
                f"{op.args['variable'].upper()} is {_format_value(response['value'])}"
            )
            return "ok"
        if op.kind == OP_ACTUATE:
            payload = {
                "device": op.args["device"],
                "units": op.args["order_units"],
                "deadline_hours": op.args["deadline_hours"],
                "session_id": session.session_id,
                "trace_id": turn.trace_id,  # lets the dispatcher deduplicate
            }
            response = self._request(topic, payload, turn)
            if response is None:
                return "timeout"
            if "error" in response:
                turn.response = f"Work order failed: {response['error']}"
                return "error"
            if response["status"] == "accepted":
                turn.response = (
                    f"Work order {response['order_id']} accepted: "
                    f"{op.args['order_units']} units within "
                    f"{op.args['deadline_hours']:g} hours."
                )
                return "ok"
            turn.response = (
                f"Work order rejected: {response.get('reject_reason', 'REJECTED')} "
                f"(requested {op.args['order_units']}, capacity {response.get('capacity')})."
            )
            return "rejected"
        if op.kind == OP_RESPOND:
            text = op.args.get("text")
            if text is None:
                if turn.response is None or turn.response_emitted:
                    return "suppressed"
                text = turn.response
            self._broker.publish(
                topic,
                {
                    "channel_id": turn.channel_id,
                    "session_id": session.session_id,
                    "text": text,
                    "trace_id": turn.trace_id,
                    "turn": turn.turn_seq,
                },
            )
            turn.response = text
            turn.response_emitted = True
            return "ok"
        if op.kind == OP_JOURNAL:
            record = dict(op.args["record"])
            record["response"] = turn.response or ""
            self._broker.publish(topic, {"record": record})
            return "ok"
        raise AssertionError(f"unhandled op kind {op.kind}")

    def _request(self, topic: str, payload: dict[str, Any], turn: TurnState) -> dict[str, Any] | None:
        try:
            raw = self._broker.request(topic, payload, timeout=self._request_timeout)
            return json.loads(raw)
        except RequestTimeoutError:
            turn.response = MACHINE_SILENT_TEXT
            return None

    def _fire_http_bindings(self, kind: str, decision_key: str, session: Session) -> None:
        for binding in self._http_bindings:
            if binding.get("bind") != kind:
                continue
            self._broker.publish(
                f"{FAAS_TRIGGER_PREFIX}/http-rest",
                {
                    "method": binding.get("method", "GET"),
                    "url": binding["url"],
                    "headers": binding.get("headers", {}),
                    "body": binding.get("body"),
                    "bind": kind,
                    "decision_key": decision_key,
                    "session_id": session.session_id,
                },
            )


def _format_value(value):
    """Human-facing rendering of a read value; floats to 6 significant digits."""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


# -- the per-datagram pipeline -----------------------------------------------------------


class CorePipeline:
    """Everything that happens to one datagram inside a core worker."""

    def __init__(
        self,
        broker: Broker,
        imdg: Imdg,
        sessions: SessionStore,
        auth: AuthEngine,
        reasoning: ReasoningEngine,
        interpreter: Interpreter,
        router,
        engines: dict[str, Any],
        clock: Clock | None = None,
        dedup_ttl: float = 600.0,
    ):
        self._broker = broker
        self._imdg = imdg
        self._sessions = sessions
        self._auth = auth
        self._reasoning = reasoning
        self._interpreter = interpreter
        self._router = router
        self._engines = engines
        self._clock = clock or SystemClock()
        self._dedup_ttl = dedup_ttl

    def handle_datagram(self, datagram: MetaDatagram) -> dict[str, Any] | None:
        """Process one turn; returns the turn record, or None on a dedup skip."""
        if not self._imdg.put_if_absent(
            f"dedup/{datagram.trace_id}", True, ttl=self._dedup_ttl
        ):
            log.debug("duplicate datagram %s skipped", datagram.trace_id)
            return None
        room = self._sessions.get_or_create_room(datagram.channel_id)
        session = self._sessions.get_or_create_session(room, datagram.session_hint)
        frame = self._imdg.get(f"context/{session.session_id}") or ContextFrame()
        engine = self._engines[self._router.route(datagram)]
        result = engine.extract(datagram.text, context=frame)
        frame = context_update(frame, result)
        self._imdg.put(f"context/{session.session_id}", frame)
        if result.intent == INTENT_LOGOUT:
            self._auth.revoke(session.session_id)
        turn = TurnState(
            trace_id=datagram.trace_id,
            session_id=session.session_id,
            channel_id=datagram.channel_id,
            intent=result.intent,
            entity=result.entity,
            request_text=datagram.text,
            turn_seq=self._imdg.increment(f"turn_seq/{session.session_id}"),
        )
        try:
            ops = self._interpreter.interpret(datagram, result, session, frame)
        except MalformedSlotsError as exc:
            ops = [
                MicroOp(OP_RESPOND, {"text": f"That request was malformed: {exc}"}),
                MicroOp(
                    OP_JOURNAL,
                    {
                        "record": {
                            "session_id": session.session_id,
                            "request": datagram.text,
                            "intent": result.intent,
                            "entity": result.entity,
                            "trace_id": datagram.trace_id,
                            "ts": self._clock.now(),
                        }
                    },
                ),
            ]
        events = self._reasoning.reason(ops, session, turn)
        if result.intent == INTENT_LOGOUT:
            self._sessions.close_session(session.session_id)
        else:
            self._sessions.touch(session.session_id)
        record = {
            "trace_id": datagram.trace_id,
            "session_id": session.session_id,
            "channel_id": datagram.channel_id,
            "intent": result.intent,
            "entity": result.entity,
            "request": datagram.text,
            "response": turn.response,
            "decisions": [e["decision_key"] for e in events],
            "events": events,
            "turn": turn.turn_seq,
        }
        self._imdg.put(f"turn/{datagram.trace_id}", record)
        return record
