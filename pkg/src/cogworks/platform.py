"""Wires every module into one runnable in-process platform.

Multi-node deployment is represented by logical instance multiplicity: the
core workers form a consumer group on the ingest topics, so several of them
share the turn load and any of them can be killed mid-run without losing a
conversation (pending messages are rescheduled and trace dedup keeps
business effects single).

Everything communicates through the broker; no module shares mutable state
with another except through the data grid.
"""

from __future__ import annotations

import json
import logging
import random
import shutil
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .blockstore import BlockStore
from .broker import Broker, SubscriptionHandle
from .clock import Clock, IdSource, SystemClock
from .connectivity import ConnectivityService, DeviceEndpoint, MachineSim
from .core import (
    AUTH_REQUEST_TOPIC,
    RULESET_KEY,
    AuthEngine,
    CorePipeline,
    Directory,
    Interpreter,
    ReasoningEngine,
    SessionStore,
    default_ruleset,
    ruleset_from_config,
)
from .faas import (
    FaasEngine,
    LambdaDescriptor,
    TRIGGER_PREFIX,
    make_answering_logic,
    make_http_rest,
)
from .imdg import Imdg
from .ingestion import ChannelDescriptor, IngestionEngine, MetaDatagram
from .nlu import Grammar, InternalNluEngine, Ruleset

log = logging.getLogger(__name__)

DEFAULT_DIRECTORY = {
    "principals": [
        {"principal": "operator1", "secret": "ABCXYZ", "roles": ["operator"]}
    ]
}
DEFAULT_MACHINE = {
    "device_id": "press01",
    "availability": 0.9,
    "performance": 0.95,
    "quality": 0.99,
    "ideal_rate": 20.0,
}
DEFAULT_CHANNELS = [
    {"channel_id": "web01", "modality": "voice", "rate": 100.0, "burst": 100}
]


@dataclass
class PlatformConfig:
    seed: int = 0
    directory: dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_DIRECTORY))
    machine: dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_MACHINE))
    channels: list[dict[str, Any]] = field(
        default_factory=lambda: [dict(c) for c in DEFAULT_CHANNELS]
    )
    grammar: dict[str, Any] | None = None
    routing_rules: list[dict[str, Any]] | None = None
    reasoning_rules: list[dict[str, Any]] | None = None
    http_bindings: list[dict[str, Any]] = field(default_factory=list)
    core_members: int = 3
    blockstore_root: str | Path | None = None
    datanodes: int = 4
    replication: int = 3
    block_size: int = 4096
    ack_timeout: float = 2.0
    max_redeliveries: int = 5
    request_timeout: float = 5.0
    token_ttl: float = 900.0
    default_device: str | None = None  # defaults to the machine's device_id


class Platform:
    """One booted instance of the whole stack."""

    def __init__(self, config: PlatformConfig | None = None, clock: Clock | None = None):
        self.config = config or PlatformConfig()
        self.clock = clock or SystemClock()
        self.ids = IdSource(seed=self.config.seed)
        self.broker = Broker(clock=self.clock, ids=self.ids)
        self.imdg = Imdg(self.clock)
        self.ingestion = IngestionEngine(self.broker, self.clock, self.ids)
        self.sessions = SessionStore(self.imdg, self.clock, self.ids)
        self.directory = Directory.from_config(self.config.directory)
        self.auth = AuthEngine(
            self.imdg,
            self.directory,
            self.sessions,
            self.clock,
            self.ids,
            token_ttl=self.config.token_ttl,
        )
        self.connectivity = ConnectivityService(self.broker, self.clock, self.ids)
        self.machine = MachineSim.from_config(self.config.machine, self.clock)
        self.device_id = self.machine.device_id
        self._own_blockstore_root = self.config.blockstore_root is None
        root = self.config.blockstore_root or tempfile.mkdtemp(prefix="cogworks-bdp-")
        self.blockstore = BlockStore(
            root,
            num_nodes=self.config.datanodes,
            replication=self.config.replication,
            block_size=self.config.block_size,
            clock=self.clock,
            ids=self.ids,
            rng=random.Random(self.config.seed + 1),
        )
        self.faas = FaasEngine(self.broker, self.clock, self.ids)
        self.reasoning = ReasoningEngine(
            self.broker,
            self.imdg,
            self.auth,
            self.clock,
            request_timeout=self.config.request_timeout,
            http_bindings=self.config.http_bindings,
        )
        grammar = (
            Grammar.from_config(self.config.grammar) if self.config.grammar else Grammar()
        )
        router = (
            Ruleset.from_config(self.config.routing_rules)
            if self.config.routing_rules
            else Ruleset.default()
        )
        self.pipeline = CorePipeline(
            self.broker,
            self.imdg,
            self.sessions,
            self.auth,
            self.reasoning,
            Interpreter(
                self.clock,
                default_device=self.config.default_device or self.device_id,
            ),
            router,
            {"internal": InternalNluEngine(grammar)},
            self.clock,
        )
        self._threads: list[threading.Thread] = []
        self._core_handles: dict[str, SubscriptionHandle] = {}
        self._auth_handle: SubscriptionHandle | None = None
        self._booted = False

    # -- lifecycle -----------------------------------------------------------------

    def boot(self) -> "Platform":
        if self._booted:
            return self
        rules = (
            ruleset_from_config(self.config.reasoning_rules)
            if self.config.reasoning_rules
            else default_ruleset()
        )
        self.imdg.put(RULESET_KEY, rules)
        for channel in self.config.channels:
            self.ingestion.register_channel(ChannelDescriptor(**channel))
        self.connectivity.register_device(DeviceEndpoint(self.device_id), self.machine)
        self._register_functions()
        self.faas.start_dispatcher()
        self._auth_handle = self.broker.subscribe(
            AUTH_REQUEST_TOPIC, group="auth", member_name="auth-0"
        )
        self._spawn(self._auth_loop, self._auth_handle)
        for i in range(self.config.core_members):
            name = f"core-{i}"
            handle = self.broker.subscribe(
                "ingest/#",
                group="core",
                member_name=name,
                ack_timeout=self.config.ack_timeout,
                max_redeliveries=self.config.max_redeliveries,
            )
            self._core_handles[name] = handle
            self._spawn(self._core_loop, handle)
        self._booted = True
        return self

    def shutdown(self) -> None:
        self.faas.close()
        self.broker.close()
        for thread in self._threads:
            thread.join(timeout=1.0)
        if self._own_blockstore_root:
            shutil.rmtree(self.blockstore.root, ignore_errors=True)

    def _spawn(self, target, *args) -> None:
        thread = threading.Thread(target=target, args=args, daemon=True)
        thread.start()
        self._threads.append(thread)

    # -- consumer loops ---------------------------------------------------------------

    def _auth_loop(self, handle: SubscriptionHandle) -> None:
        while not handle.closed:
            env = handle.get(timeout=0.05)
            if env is None:
                continue
            try:
                reply = self.auth.handle_request(env.json())
                if env.reply_to:
                    self.broker.publish(
                        env.reply_to, reply, correlation_id=env.correlation_id
                    )
            except Exception:
                log.exception("auth request failed")
            finally:
                handle.ack(env.message_id)

    def _core_loop(self, handle: SubscriptionHandle) -> None:
        while not handle.closed:
            env = handle.get(timeout=0.05)
            if env is None:
                continue
            try:
                datagram = MetaDatagram.from_json(env.payload)
                self.pipeline.handle_datagram(datagram)
            except Exception:
                log.exception("core worker failed on %s; leaving unacked", env.topic)
                continue  # redelivery (or dead-letter) picks it up
            handle.ack(env.message_id)

    # -- platform functions --------------------------------------------------------------

    def _register_functions(self) -> None:
        register = self.faas.register
        register(
            LambdaDescriptor("authenticator", f"{TRIGGER_PREFIX}/authenticator", max_instances=2),
            self._authenticator_body,
        )
        register(
            LambdaDescriptor("oee-reader", f"{TRIGGER_PREFIX}/oee-reader", max_instances=2),
            self._variable_reader_body,
        )
        register(
            LambdaDescriptor("order-dispatcher", f"{TRIGGER_PREFIX}/order-dispatcher", max_instances=1),
            self._order_dispatcher_body,
        )
        register(
            LambdaDescriptor("answering-logic", f"{TRIGGER_PREFIX}/answering-logic", max_instances=2),
            make_answering_logic(self.ingestion, self.sessions),
        )
        register(
            LambdaDescriptor("journal-writer", "journal/session", max_instances=1),
            self._journal_writer_body,
        )
        register(
            LambdaDescriptor("http-rest", f"{TRIGGER_PREFIX}/http-rest", max_instances=2),
            make_http_rest(self.imdg),
        )

    def _authenticator_body(self, event: dict[str, Any]) -> dict[str, Any]:
        raw = self.broker.request(AUTH_REQUEST_TOPIC, event, timeout=self.config.request_timeout)
        return json.loads(raw)

    def _variable_reader_body(self, event: dict[str, Any]) -> dict[str, Any]:
        from .connectivity import ConnectivityError

        try:
            session = self.connectivity.connect(event["device"])
            node_id = self.connectivity._machine(event["device"]).node_for_variable(
                event["variable"]
            )
            value = self.connectivity.read_variable(session, node_id)
            return {"variable": event["variable"], "value": value}
        except ConnectivityError as exc:
            return {"error": str(exc)}

    def _order_dispatcher_body(self, event: dict[str, Any]) -> dict[str, Any]:
        from .connectivity import ConnectivityError

        # broker redelivery may hand us the same actuation twice; the first
        # result is cached per trace so a duplicate never places a second order
        cache_key = f"actuate_result/{event.get('trace_id')}"
        if event.get("trace_id"):
            cached = self.imdg.get(cache_key)
            if cached is not None:
                return cached
        try:
            session = self.connectivity.connect(event["device"])
            order = self.connectivity.dispatch_work_order(
                session, int(event["units"]), float(event["deadline_hours"])
            )
            result = {
                "status": order.status,
                "order_id": order.order_id,
                "capacity": order.capacity_at_decision,
                "reject_reason": order.reject_reason,
            }
        except ConnectivityError as exc:
            return {"error": str(exc)}
        if event.get("trace_id"):
            self.imdg.put(cache_key, result, ttl=600.0)
        return result

    def _journal_writer_body(self, event: dict[str, Any]) -> dict[str, Any]:
        record = event["record"]
        trace_id = record.get("trace_id")
        if trace_id and not self.imdg.put_if_absent(
            f"journal_dedup/{trace_id}", True, ttl=600.0
        ):
            return {"ok": True, "deduplicated": True}
        self.blockstore.journal_session(record)
        return {"ok": True}

    # -- operations used by harness and gateway ----------------------------------------------

    def ingest(self, channel_id: str, text: str) -> MetaDatagram:
        return self.ingestion.ingest(channel_id, text)

    def kill_core_member(self, member_name: str) -> None:
        handle = self._core_handles.get(member_name)
        if handle is None:
            raise KeyError(f"no core member {member_name!r}")
        self.broker.remove_member("core", member_name)

    def core_member_names(self) -> list[str]:
        return [n for n, h in self._core_handles.items() if not h.closed]

    def kill_datanode(self, node_id: str) -> None:
        self.blockstore.set_node_alive(node_id, False)

    def set_ack_drop(self, probability: float, seed: int | None = None) -> None:
        self.broker.set_ack_drop(probability, seed)

    def wait_quiesce(self, timeout: float = 10.0) -> bool:
        deadline = time.monotonic() + timeout
        stable = 0
        while time.monotonic() < deadline:
            broker_stats = self.broker.stats()
            broker_idle = broker_stats["queued"] == 0 and broker_stats["outstanding"] == 0
            if broker_idle and self.faas.wait_idle(timeout=0.05):
                stable += 1
                if stable >= 3:
                    return True
            else:
                stable = 0
            time.sleep(0.01)
        return False

    def metrics(self) -> dict[str, Any]:
        return {
            "broker": self.broker.stats(),
            "faas": self.faas.stats(),
            "blockstore": self.blockstore.stats(),
        }

    def session_info(self, session_id: str) -> dict[str, Any] | None:
        session = self.sessions.get_session(session_id)
        if session is None:
            return None
        context = self.imdg.get(f"context/{session_id}")
        return {
            "session_id": session.session_id,
            "room_id": session.room_id,
            "channel_id": session.channel_id,
            "principal": session.principal,
            "status": session.status,
            "state_vars": session.state_vars,
            "authenticated": self.auth.token_for(session_id) is not None,
            "context": {
                "active_intent": context.active_intent if context else None,
                "active_entity": context.active_entity if context else None,
                "slot_memory": context.slot_memory if context else {},
            },
        }
