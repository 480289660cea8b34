"""Wire models for the gateway: WebSocket frames and HTTP bodies."""

from __future__ import annotations

from typing import Any

from pydantic import BaseModel, Field


class TurnFrame(BaseModel):
    """Client to server over the channel WebSocket."""

    text: str = Field(min_length=1)


class ReplyFrame(BaseModel):
    """Server to client: one platform answer."""

    reply: str
    text: str | None = None
    session: str | None = None
    modality: str | None = None
    trace_id: str | None = None
    turn: int | None = None


class ErrorFrame(BaseModel):
    error: str


class ChaosRequest(BaseModel):
    ack_drop_prob: float | None = Field(default=None, ge=0.0, le=1.0)
    kill_consumer: str | None = None
    kill_datanode: str | None = None
    seed: int | None = None


class ChaosResponse(BaseModel):
    applied: dict[str, Any]


class BenchmarkSummary(BaseModel):
    count: int
    p50: float
    p95: float
    error_rate: float


class MetricsResponse(BaseModel):
    broker: dict[str, int]
    faas: dict[str, Any]
    blockstore: dict[str, Any]
    benchmarks: dict[str, BenchmarkSummary]


class ContextView(BaseModel):
    active_intent: str | None = None
    active_entity: dict[str, Any] | None = None
    slot_memory: dict[str, Any] = {}


class SessionResponse(BaseModel):
    session_id: str
    room_id: str
    channel_id: str
    principal: str | None
    status: str
    state_vars: dict[str, Any]
    authenticated: bool
    context: ContextView
