"""Deterministic intent/entity extraction and NLU-engine routing.

The internal engine works off a data-driven keyword grammar: intents are
keyed by trigger keywords, slot values are always verbatim substrings of the
input. When a turn carries no intent keyword but the conversation context
has an active intent, that intent is inherited so the dialog can continue
(entity switches, slot refinement) without restating it.

The routing layer picks which NLU engine serves a request from a priority
ruleset; the match-all default rule routes to the internal engine.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Any, Optional, Protocol

from .ingestion import MetaDatagram

INTENT_LOGIN = "#LOGIN"
INTENT_READ_OEE = "#READ_OEE"
INTENT_WORK_ORDER = "#WORK_ORDER"
INTENT_LOGOUT = "#LOGOUT"
INTENT_UNKNOWN = "#UNKNOWN"

ENTITY_MACHINE = "#MACHINE"
ENTITY_NONE = "#NONE"

INTERNAL_ENGINE = "internal"
HOURS_PER_WEEK = 168.0

_WORD = re.compile(r"[A-Za-z0-9_']+")
_DEADLINE = re.compile(r"\bby\s+(?:the\s+)?(.+?)[\s.!?]*$", re.IGNORECASE)


@dataclass(frozen=True)
class IntentResult:
    intent: str
    entity: str = ENTITY_NONE
    slots: dict[str, str] = field(default_factory=dict)
    confidence: float = 0.0
    explicit: bool = False  # intent came from a keyword hit, not inheritance

    def __post_init__(self) -> None:
        if self.intent == INTENT_LOGIN and "secret" not in self.slots:
            raise ValueError("#LOGIN requires a secret slot")
        if self.intent == INTENT_WORK_ORDER:
            units = self.slots.get("units", "")
            if not (units.isdigit() and int(units) > 0):
                raise ValueError("#WORK_ORDER requires positive integer units")


@dataclass(frozen=True)
class Grammar:
    """Keyword grammar; new intents are configuration, not code."""

    login_keywords: tuple[str, ...] = ("secret",)
    read_keywords: tuple[str, ...] = ("oee",)
    order_phrases: tuple[str, ...] = ("working order", "work order")
    logout_keywords: tuple[str, ...] = ("logout",)
    logout_phrases: tuple[str, ...] = ("log out",)
    machine_keywords: tuple[str, ...] = ("machine",)
    device_names: tuple[str, ...] = ("press01", "press02")

    @classmethod
    def from_config(cls, config: dict[str, Any]) -> "Grammar":
        fields = {k: tuple(v) for k, v in config.items()}
        return cls(**fields)


class NluEngine(Protocol):
    """Extraction interface; external engines plug in behind the router."""

    def extract(self, text: str, context: Optional[Any] = None) -> IntentResult:
        ...


class InternalNluEngine:
    def __init__(self, grammar: Grammar | None = None):
        self.grammar = grammar or Grammar()

    def extract(self, text: str, context: Optional[Any] = None) -> IntentResult:
        if not text:
            raise ValueError("text must be non-empty")
        g = self.grammar
        lower = text.lower()
        tokens = _WORD.findall(text)
        lower_tokens = [t.lower() for t in tokens]

        entity = ENTITY_NONE
        slots: dict[str, str] = {}
        for name in g.device_names:
            if name.lower() in lower_tokens:
                entity = ENTITY_MACHINE
                slots["device"] = tokens[lower_tokens.index(name.lower())]
                break
        else:
            if any(k in lower_tokens for k in g.machine_keywords):
                entity = ENTITY_MACHINE

        # an addressed entity carries over from context when this turn names none
        if entity == ENTITY_NONE and context is not None:
            carried = getattr(context, "active_entity", None)
            if carried:
                entity = carried.get("type", ENTITY_NONE)

        intent = self._match_intent(text, lower, tokens, lower_tokens, slots)
        if intent is not None:
            return IntentResult(intent, entity, slots, confidence=1.0, explicit=True)

        # no keyword hit: inherit the active intent when this turn still
        # contributes something (an entity or slots) and the merged slots
        # satisfy the inherited intent's requirements
        active = getattr(context, "active_intent", None) if context is not None else None
        if active and active != INTENT_UNKNOWN and (entity != ENTITY_NONE or slots):
            memory = dict(getattr(context, "slot_memory", {}) or {})
            merged = {**memory, **slots}
            try:
                return IntentResult(active, entity, merged, confidence=1.0, explicit=False)
            except ValueError:
                pass
        return IntentResult(INTENT_UNKNOWN, entity, slots, confidence=0.0, explicit=False)

    def _match_intent(
        self,
        text: str,
        lower: str,
        tokens: list[str],
        lower_tokens: list[str],
        slots: dict[str, str],
    ) -> str | None:
        g = self.grammar
        if any(k in lower_tokens for k in g.login_keywords):
            secret = self._trailing_value(tokens, lower_tokens, g.login_keywords)
            if secret is not None:
                slots["secret"] = secret
                return INTENT_LOGIN
        if any(p in lower for p in g.order_phrases):
            units = next((t for t in tokens if t.isdigit() and int(t) > 0), None)
            if units is not None:
                slots["units"] = units
                m = _DEADLINE.search(text)
                if m:
                    slots["deadline"] = m.group(1)
                return INTENT_WORK_ORDER
        if any(k in lower_tokens for k in g.read_keywords):
            return INTENT_READ_OEE
        if any(k in lower_tokens for k in g.logout_keywords) or any(
            p in lower for p in g.logout_phrases
        ):
            return INTENT_LOGOUT
        return None

    @staticmethod
    def _trailing_value(
        tokens: list[str], lower_tokens: list[str], keywords: tuple[str, ...]
    ) -> str | None:
        """The secret is the last token, provided it trails the keyword itself."""
        if not tokens:
            return None
        last = tokens[-1]
        if last.lower() in keywords or last.lower() == "is":
            return None
        return last


# -- routing ---------------------------------------------------------------------


@dataclass(frozen=True)
class RoutingRule:
    priority: int
    engine_id: str
    channel_id: str | None = None
    tenant: str | None = None
    text_pattern: str | None = None

    def matches(self, datagram: MetaDatagram) -> bool:
        if self.channel_id is not None and datagram.channel_id != self.channel_id:
            return False
        if self.tenant is not None and datagram.tenant != self.tenant:
            return False
        if self.text_pattern is not None and not re.search(self.text_pattern, datagram.text):
            return False
        return True


class Ruleset:
    """Priority-ordered routing rules; lower priority number wins."""

    DEFAULT_PRIORITY = 1_000_000

    def __init__(self, rules: list[RoutingRule]):
        priorities = [r.priority for r in rules]
        if len(set(priorities)) != len(priorities):
            raise ValueError("routing rule priorities must be unique")
        if not any(
            r.channel_id is None and r.tenant is None and r.text_pattern is None
            for r in rules
        ):
            raise ValueError("ruleset must contain a match-all default rule")
        self._rules = sorted(rules, key=lambda r: r.priority)

    @classmethod
    def default(cls) -> "Ruleset":
        return cls([RoutingRule(priority=cls.DEFAULT_PRIORITY, engine_id=INTERNAL_ENGINE)])

    @classmethod
    def from_config(cls, config: list[dict[str, Any]]) -> "Ruleset":
        return cls([RoutingRule(**entry) for entry in config])

    def route(self, datagram: MetaDatagram) -> str:
        for rule in self._rules:
            if rule.matches(datagram):
                return rule.engine_id
        raise AssertionError("unreachable: default rule always matches")


# -- deadline phrases --------------------------------------------------------------


def deadline_to_hours(phrase: str, now: float) -> float | None:
    """Horizon in hours for a known deadline phrase, None when unrecognized.

    "end of the following week" resolves to the first Sunday-24:00 boundary
    at least seven days out, so a run pinned to a Monday-00:00 clock sees
    exactly one week (168 h).
    """
    normalized = phrase.strip().lower().rstrip(".!?")
    moment = datetime.fromtimestamp(now, tz=timezone.utc)
    if normalized == "end of the following week":
        target = _next_week_boundary(moment, minimum=moment + timedelta(days=7))
    elif normalized == "end of the week":
        target = _next_week_boundary(moment, minimum=moment)
    elif normalized == "tomorrow":
        return 24.0
    elif normalized == "today":
        midnight = (moment + timedelta(days=1)).replace(
            hour=0, minute=0, second=0, microsecond=0
        )
        return (midnight - moment).total_seconds() / 3600.0
    else:
        return None
    return (target - moment).total_seconds() / 3600.0


def _next_week_boundary(moment: datetime, minimum: datetime) -> datetime:
    """First Monday 00:00 UTC at or after ``minimum`` and strictly after ``moment``."""
    candidate = minimum.replace(hour=0, minute=0, second=0, microsecond=0)
    if candidate < minimum:
        candidate += timedelta(days=1)
    while candidate.weekday() != 0 or candidate <= moment:
        candidate += timedelta(days=1)
    return candidate
