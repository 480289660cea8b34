"""HTTP/WebSocket gateway over a booted platform.

Endpoints:

* ``WS /channel/{channel_id}`` -- bidirectional conversation: the client
  sends ``{"text": ...}`` frames, the gateway ingests them and forwards
  reply frames from the channel's egress topic. Unknown channels are
  registered on first connect (``?modality=text|voice|api``). Replies are
  deduplicated by trace id, so internal redelivery never produces a
  duplicate frame.
* ``GET /metrics`` -- broker counters, per-function stats, benchmarks.
* ``GET /sessions/{session_id}`` -- session state snapshot.
* ``POST /chaos`` -- flip fault switches (ack drops, consumer/datanode kills).
"""

from __future__ import annotations

import asyncio
import logging
from typing import Any

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.middleware.cors import CORSMiddleware
from pydantic import ValidationError

from ..broker import UnknownMemberError
from ..blockstore import UnknownNodeError
from ..ingestion import ChannelDescriptor, IngestionError, UnknownChannelError
from ..platform import Platform
from .models import (
    BenchmarkSummary,
    ChaosRequest,
    ChaosResponse,
    ErrorFrame,
    MetricsResponse,
    ReplyFrame,
    SessionResponse,
    TurnFrame,
)

log = logging.getLogger(__name__)


def create_app(platform: Platform) -> FastAPI:
    app = FastAPI(title="cogworks gateway", version="0.1.0")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.platform = platform

    @app.get("/metrics", response_model=MetricsResponse)
    def metrics() -> MetricsResponse:
        snapshot = platform.metrics()
        window = (0.0, platform.clock.now() + 1.0)
        benchmarks: dict[str, BenchmarkSummary] = {}
        for name in snapshot["faas"]["lambdas"]:
            try:
                record = platform.faas.benchmark(name, window)
            except Exception:
                continue
            benchmarks[name] = BenchmarkSummary(
                count=record.count,
                p50=record.p50,
                p95=record.p95,
                error_rate=record.error_rate,
            )
        return MetricsResponse(
            broker=snapshot["broker"],
            faas=snapshot["faas"],
            blockstore=snapshot["blockstore"],
            benchmarks=benchmarks,
        )

    @app.get("/sessions/{session_id}", response_model=SessionResponse)
    def session(session_id: str) -> SessionResponse:
        info = platform.session_info(session_id)
        if info is None:
            raise HTTPException(status_code=404, detail=f"no session {session_id!r}")
        return SessionResponse(**info)

    @app.post("/chaos", response_model=ChaosResponse)
    def chaos(request: ChaosRequest) -> ChaosResponse:
        applied: dict[str, Any] = {}
        if request.ack_drop_prob is not None:
            platform.set_ack_drop(request.ack_drop_prob, seed=request.seed)
            applied["ack_drop_prob"] = request.ack_drop_prob
        if request.kill_consumer is not None:
            try:
                platform.kill_core_member(request.kill_consumer)
            except (KeyError, UnknownMemberError) as exc:
                raise HTTPException(status_code=404, detail=str(exc)) from exc
            applied["killed_consumer"] = request.kill_consumer
        if request.kill_datanode is not None:
            try:
                platform.kill_datanode(request.kill_datanode)
            except UnknownNodeError as exc:
                raise HTTPException(status_code=404, detail=str(exc)) from exc
            applied["killed_datanode"] = request.kill_datanode
        return ChaosResponse(applied=applied)

    @app.websocket("/channel/{channel_id}")
    async def channel(websocket: WebSocket, channel_id: str) -> None:
        await websocket.accept()
        modality = websocket.query_params.get("modality", "text")
        try:
            platform.ingestion.channel(channel_id)
        except UnknownChannelError:
            platform.ingestion.register_channel(
                ChannelDescriptor(channel_id, modality=modality)
            )
        subscription = platform.broker.subscribe(f"egress/{channel_id}")
        seen_traces: set[str] = set()

        async def forward_replies() -> None:
            while True:
                envelope = await asyncio.to_thread(subscription.get, 0.2)
                if envelope is None:
                    continue
                subscription.ack(envelope.message_id)
                record = envelope.json()
                trace = record.get("trace_id")
                if trace and trace in seen_traces:
                    continue
                if trace:
                    seen_traces.add(trace)
                if record.get("session"):
                    platform.ingestion.bind_session(channel_id, record["session"])
                await websocket.send_json(ReplyFrame(**record).model_dump())

        forwarder = asyncio.create_task(forward_replies())
        try:
            while True:
                data = await websocket.receive_json()
                try:
                    frame = TurnFrame(**data)
                except ValidationError as exc:
                    await websocket.send_json(
                        ErrorFrame(error=f"bad frame: {exc.errors()[0]['msg']}").model_dump()
                    )
                    continue
                try:
                    await asyncio.to_thread(platform.ingest, channel_id, frame.text)
                except IngestionError as exc:
                    await websocket.send_json(ErrorFrame(error=str(exc)).model_dump())
        except WebSocketDisconnect:
            pass
        finally:
            forwarder.cancel()
            subscription.close()

    return app


def serve(
    platform: Platform,
    host: str = "127.0.0.1",
    port: int = 8400,
    log_level: str = "info",
) -> None:
    """Run the gateway under uvicorn (blocking)."""
    import uvicorn

    uvicorn.run(create_app(platform), host=host, port=port, log_level=log_level)
