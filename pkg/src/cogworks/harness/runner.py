"""Scenario runner: boots a platform, replays scripted turns, emits a transcript.

Chaos-free runs pin the clock at the scenario's fixed start and use the
seeded id source, so two runs of the same scenario produce byte-identical
transcripts. Runs with chaos configured (ack drops, consumer or datanode
kills) need time to move for redelivery, so the clock ticks with wall time
from the same start instant.

Steps are issued sequentially; each waits for its reply and then for the
platform to go quiet, keeping transcripts and journal counts well-defined.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
import threading
import time
from pathlib import Path
from typing import Any

from ..clock import ManualClock, TickingClock
from ..platform import Platform, PlatformConfig
from .scenario import ChaosSpec, Scenario

log = logging.getLogger(__name__)

STEP_TIMEOUT = 10.0


class _ReplyCollector:
    """Watches a channel's egress topic and indexes reply records by trace id."""

    def __init__(self, platform: Platform, channel_id: str):
        self._sub = platform.broker.subscribe(f"egress/{channel_id}")
        self._replies: dict[str, dict[str, Any]] = {}
        self._cond = threading.Condition()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _loop(self) -> None:
        while not self._sub.closed:
            env = self._sub.get(timeout=0.05)
            if env is None:
                continue
            self._sub.ack(env.message_id)
            record = env.json()
            with self._cond:
                self._replies.setdefault(record.get("trace_id") or "", record)
                self._cond.notify_all()

    def wait_for(self, trace_id: str, timeout: float) -> dict[str, Any] | None:
        deadline = time.monotonic() + timeout
        with self._cond:
            while trace_id not in self._replies:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cond.wait(remaining)
            return self._replies[trace_id]

    def close(self) -> None:
        self._sub.close()


def build_platform(scenario: Scenario, seed: int = 0) -> Platform:
    chaos_active = scenario.chaos.active
    clock = (
        TickingClock(scenario.start_epoch)
        if chaos_active
        else ManualClock(scenario.start_epoch)
    )
    config = PlatformConfig(seed=seed)
    if scenario.machine:
        config.machine = dict(scenario.machine)
    if scenario.directory:
        config.directory = dict(scenario.directory)
    if scenario.channels:
        config.channels = [dict(c) for c in scenario.channels]
    if chaos_active:
        # redelivery must outpace the step timeout under loss
        config.ack_timeout = 0.25
        config.max_redeliveries = 10
    return Platform(config, clock=clock)


def run_scenario(
    scenario: Scenario,
    seed: int = 0,
    chaos_override: ChaosSpec | None = None,
    out: str | Path | None = None,
    step_timeout: float = STEP_TIMEOUT,
) -> dict[str, Any]:
    if chaos_override is not None:
        scenario = dataclasses.replace(scenario, chaos=chaos_override)
    chaos = scenario.chaos
    platform = build_platform(scenario, seed=seed).boot()
    if chaos.ack_drop_prob:
        platform.set_ack_drop(chaos.ack_drop_prob, seed=seed)
    collectors = {
        channel.channel_id: _ReplyCollector(platform, channel.channel_id)
        for channel in platform.ingestion.channels()
    }
    steps_out: list[dict[str, Any]] = []
    try:
        for number, step in enumerate(scenario.steps, start=1):
            if chaos.kill_consumer_at_step == number:
                platform.kill_core_member(chaos.kill_consumer)
            if chaos.kill_datanode_at_step == number:
                platform.kill_datanode(chaos.kill_datanode)
            started = platform.clock.now()
            datagram = platform.ingest(step.channel, step.text)
            reply = collectors[step.channel].wait_for(datagram.trace_id, step_timeout)
            if reply is not None and reply.get("session"):
                platform.ingestion.bind_session(step.channel, reply["session"])
            platform.wait_quiesce(timeout=step_timeout)
            turn = platform.imdg.get(f"turn/{datagram.trace_id}") or {}
            record = {
                "step": number,
                "channel": step.channel,
                "input": step.text,
                "trace_id": datagram.trace_id,
                "session": turn.get("session_id"),
                "intent": turn.get("intent"),
                "entity": turn.get("entity"),
                "decisions": turn.get("decisions", []),
                "reply": None if reply is None else reply.get("reply"),
                "latency_s": round(platform.clock.now() - started, 6),
                "matched": _matches(step, turn, reply),
            }
            steps_out.append(record)
        platform.wait_quiesce(timeout=step_timeout)
        transcript = {
            "scenario": scenario.name,
            "seed": seed,
            "clock_start": scenario.fixed_clock_start,
            "chaos": dataclasses.asdict(chaos),
            "steps": steps_out,
            "metrics": _collect_metrics(platform, scenario),
            "ok": all(s["matched"] for s in steps_out),
        }
    finally:
        for collector in collectors.values():
            collector.close()
        platform.shutdown()
    if out is not None:
        Path(out).write_text(json.dumps(transcript, indent=2, sort_keys=True) + "\n")
    return transcript


def _matches(step, turn: dict[str, Any], reply: dict[str, Any] | None) -> bool:
    if step.expect_intent is not None and turn.get("intent") != step.expect_intent:
        return False
    if step.expect_reply is not None:
        if reply is None or not re.search(step.expect_reply, reply.get("reply") or ""):
            return False
    if step.expect_intent is None and step.expect_reply is None:
        return reply is not None
    return True


def _collect_metrics(platform: Platform, scenario: Scenario) -> dict[str, Any]:
    metrics = platform.metrics()
    window = (scenario.start_epoch - 1.0, max(platform.clock.now(), scenario.start_epoch) + 1.0)
    benchmarks = {}
    for name in metrics["faas"]["lambdas"]:
        try:
            record = platform.faas.benchmark(name, window)
        except Exception:
            continue
        benchmarks[name] = {
            "count": record.count,
            "p50": round(record.p50, 6),
            "p95": round(record.p95, 6),
            "error_rate": record.error_rate,
        }
    metrics["benchmarks"] = benchmarks
    metrics["journal_lines"] = len(platform.blockstore.read_journal())
    return metrics
