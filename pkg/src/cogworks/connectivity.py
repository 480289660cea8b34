"""Connectivity service: protocol mediation toward simulated devices.

Devices expose an address space of nodes (``ns=1;s=OEE`` style ids). The
persistent-connection model is simulated with an explicit session handshake,
drop injection, and reconnect-with-backoff; the event-driven model exports
value changes onto ``device/<device_id>/<node>`` broker topics.

The machine simulator carries the three effectiveness factors, an ideal
production rate, and an order ledger. Work-order feasibility: the capacity
of a deadline horizon is ``floor(ideal_rate * hours * oee)`` minus units
already committed to orders due within that horizon; orders over capacity
are rejected as non-dispatchable. The strategy is pluggable.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable

from .broker import Broker
from .clock import Clock, IdSource, SystemClock

log = logging.getLogger(__name__)

REJECT_NON_DISPATCHABLE = "NON_DISPATCHABLE"


class ConnectivityError(Exception):
    pass


class UnknownDeviceError(ConnectivityError):
    pass


class UnknownNodeError(ConnectivityError):
    pass


class SessionDownError(ConnectivityError):
    pass


class ConnectRefusedError(ConnectivityError):
    pass


class InvalidArgsError(ConnectivityError):
    pass


@dataclass(frozen=True)
class DeviceEndpoint:
    device_id: str
    protocol: str = "simulated-opcua"
    connection_model: str = "persistent"
    address: str = "opc.tcp://sim.local:4840"


@dataclass(frozen=True)
class AddressSpaceNode:
    node_id: str
    name: str
    access: str  # "read" | "read-write"


@dataclass
class WorkOrder:
    order_id: str
    units: int
    deadline_hours: float
    status: str  # accepted | rejected | completed
    reject_reason: str | None = None
    capacity_at_decision: int | None = None
    accepted_ts: float = 0.0


def capacity_within(
    oee: float, ideal_rate: float, horizon_hours: float, committed_units: int
) -> int:
    """Units the machine can still take on within a horizon."""
    return math.floor(ideal_rate * horizon_hours * oee) - committed_units


class MachineSim:
    """Simulated production machine with an OPC-UA-ish address space.

    Nodes: OEE (computed availability x performance x quality), the three
    factors (read-write), IdealRate, and OrderQueueDepth. Reads never mutate
    state; order dispatch and the commitment ledger update atomically.
    """

    def __init__(
        self,
        device_id: str,
        availability: float,
        performance: float,
        quality: float,
        ideal_rate: float,
        clock: Clock | None = None,
        capacity_fn: Callable[[float, float, float, int], int] = capacity_within,
    ):
        for name, v in (
            ("availability", availability),
            ("performance", performance),
            ("quality", quality),
        ):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")
        if ideal_rate <= 0:
            raise ValueError("ideal_rate must be positive")
        self.device_id = device_id
        self._factors = {
            "Availability": availability,
            "Performance": performance,
            "Quality": quality,
        }
        self.ideal_rate = ideal_rate
        self._clock = clock or SystemClock()
        self._capacity_fn = capacity_fn
        self.order_queue: list[WorkOrder] = []
        self._lock = threading.RLock()
        self._change_listeners: list[Callable[[str, Any], None]] = []

    @classmethod
    def from_config(cls, config: dict[str, Any], clock: Clock | None = None) -> "MachineSim":
        return cls(
            device_id=config["device_id"],
            availability=config.get("availability", 0.9),
            performance=config.get("performance", 0.95),
            quality=config.get("quality", 0.99),
            ideal_rate=config.get("ideal_rate", 20.0),
            clock=clock,
        )

    @property
    def oee(self) -> float:
        with self._lock:
            return (
                self._factors["Availability"]
                * self._factors["Performance"]
                * self._factors["Quality"]
            )

    def nodes(self) -> list[AddressSpaceNode]:
        out = [AddressSpaceNode("ns=1;s=OEE", "OEE", "read")]
        for name in self._factors:
            out.append(AddressSpaceNode(f"ns=1;s={name}", name, "read-write"))
        out.append(AddressSpaceNode("ns=1;s=IdealRate", "IdealRate", "read"))
        out.append(AddressSpaceNode("ns=1;s=OrderQueueDepth", "OrderQueueDepth", "read"))
        return out

    def node_for_variable(self, variable: str) -> str:
        wanted = variable.lower()
        for node in self.nodes():
            if node.name.lower() == wanted:
                return node.node_id
        raise UnknownNodeError(f"no node for variable {variable!r}")

    def read_node(self, node_id: str) -> Any:
        with self._lock:
            name = self._node_name(node_id)
            if name == "OEE":
                return self.oee
            if name in self._factors:
                return self._factors[name]
            if name == "IdealRate":
                return self.ideal_rate
            if name == "OrderQueueDepth":
                return len([o for o in self.order_queue if o.status == "accepted"])
        raise UnknownNodeError(node_id)

    def write_node(self, node_id: str, value: Any) -> None:
        with self._lock:
            name = self._node_name(node_id)
            if name not in self._factors:
                raise UnknownNodeError(f"{node_id} is not writable")
            if not 0.0 <= float(value) <= 1.0:
                raise ValueError("factors must be in [0,1]")
            self._factors[name] = float(value)
            listeners = list(self._change_listeners)
        for listener in listeners:
            listener(node_id, value)
            listener("ns=1;s=OEE", self.oee)

    def set_factor(self, name: str, value: float) -> None:
        self.write_node(f"ns=1;s={name}", value)

    def on_change(self, listener: Callable[[str, Any], None]) -> None:
        self._change_listeners.append(listener)

    def committed_units(self, horizon_hours: float) -> int:
        with self._lock:
            return sum(
                o.units
                for o in self.order_queue
                if o.status == "accepted" and o.deadline_hours <= horizon_hours
            )

    def capacity(self, horizon_hours: float) -> int:
        with self._lock:
            return self._capacity_fn(
                self.oee, self.ideal_rate, horizon_hours, self.committed_units(horizon_hours)
            )

    def dispatch(self, units: int, deadline_hours: float, ids: IdSource) -> WorkOrder:
        if units < 1:
            raise InvalidArgsError("units must be >= 1")
        if deadline_hours <= 0:
            raise InvalidArgsError("deadline_hours must be > 0")
        with self._lock:
            available = self.capacity(deadline_hours)
            order = WorkOrder(
                order_id=ids.next("order"),
                units=units,
                deadline_hours=deadline_hours,
                status="accepted" if units <= available else "rejected",
                capacity_at_decision=available,
                accepted_ts=self._clock.now(),
            )
            if order.status == "rejected":
                order.reject_reason = REJECT_NON_DISPATCHABLE
            else:
                self.order_queue.append(order)
            return order

    def complete_order(self, order_id: str) -> None:
        with self._lock:
            for order in self.order_queue:
                if order.order_id == order_id and order.status == "accepted":
                    order.status = "completed"
                    return
        raise InvalidArgsError(f"no accepted order {order_id!r}")

    def _node_name(self, node_id: str) -> str:
        if ";s=" in node_id:
            return node_id.split(";s=", 1)[1]
        raise UnknownNodeError(node_id)


class DeviceSession:
    """One persistent connection to a device; commands run one at a time."""

    def __init__(self, service: "ConnectivityService", device_id: str):
        self._service = service
        self.device_id = device_id
        self.live = True
        self._lock = threading.RLock()

    def drop(self) -> None:
        """Fault hook: sever the connection; next command reconnects."""
        self.live = False

    def _ensure_live(self) -> None:
        if self.live:
            return
        self._service._reconnect(self)

    def run(self, fn: Callable[[MachineSim], Any]) -> Any:
        with self._lock:
            self._ensure_live()
            machine = self._service._machine(self.device_id)
            return fn(machine)


class ConnectivityService:
    def __init__(
        self,
        broker: Broker | None = None,
        clock: Clock | None = None,
        ids: IdSource | None = None,
        reconnect_backoff: float = 0.01,
        reconnect_attempts: int = 5,
    ):
        self._broker = broker
        self._clock = clock or SystemClock()
        self._ids = ids or IdSource()
        self._endpoints: dict[str, DeviceEndpoint] = {}
        self._machines: dict[str, MachineSim] = {}
        self._sessions: dict[str, DeviceSession] = {}
        self._exports: set[tuple[str, str]] = set()
        self._refuse_connects: set[str] = set()
        self._backoff = reconnect_backoff
        self._attempts = reconnect_attempts
        self._lock = threading.RLock()

    # -- registry ---------------------------------------------------------------

    def register_device(self, endpoint: DeviceEndpoint, machine: MachineSim) -> None:
        with self._lock:
            self._endpoints[endpoint.device_id] = endpoint
            self._machines[endpoint.device_id] = machine
            machine.on_change(lambda node, value: self._on_node_change(endpoint.device_id, node, value))

    def refuse_connects(self, device_id: str, refuse: bool = True) -> None:
        """Fault hook: make connection attempts to a device fail."""
        with self._lock:
            if refuse:
                self._refuse_connects.add(device_id)
            else:
                self._refuse_connects.discard(device_id)

    # -- operations -----------------------------------------------------------------

    def connect(self, device_id: str) -> DeviceSession:
        with self._lock:
            if device_id not in self._endpoints:
                raise UnknownDeviceError(device_id)
            if device_id in self._refuse_connects:
                raise ConnectRefusedError(device_id)
            session = self._sessions.get(device_id)
            if session is None or not session.live:
                session = DeviceSession(self, device_id)
                self._sessions[device_id] = session
            return session

    def read_variable(self, session: DeviceSession, node_id: str) -> Any:
        return session.run(lambda m: m.read_node(node_id))

    def dispatch_work_order(
        self, session: DeviceSession, units: int, deadline_hours: float
    ) -> WorkOrder:
        return session.run(lambda m: m.dispatch(units, deadline_hours, self._ids))

    def export_event(self, device_id: str, node_id: str) -> None:
        """Start publishing value changes of a node on the device topic."""
        with self._lock:
            session = self._sessions.get(device_id)
            if session is None or not session.live:
                raise SessionDownError(f"{device_id} is not connected")
            self._exports.add((device_id, node_id))

    # -- internals ----------------------------------------------------------------

    def _machine(self, device_id: str) -> MachineSim:
        machine = self._machines.get(device_id)
        if machine is None:
            raise UnknownDeviceError(device_id)
        return machine

    def _reconnect(self, session: DeviceSession) -> None:
        for attempt in range(self._attempts):
            time.sleep(self._backoff * (2**attempt))
            with self._lock:
                refused = session.device_id in self._refuse_connects
            if not refused:
                session.live = True
                log.info("device %s reconnected after %d attempts", session.device_id, attempt + 1)
                return
        raise SessionDownError(f"could not reconnect to {session.device_id}")

    def _on_node_change(self, device_id: str, node_id: str, value: Any) -> None:
        if self._broker is None or (device_id, node_id) not in self._exports:
            return
        name = node_id.split(";s=", 1)[1] if ";s=" in node_id else node_id
        self._broker.publish(
            f"device/{device_id}/{name}",
            {"device_id": device_id, "node_id": node_id, "value": value, "ts": self._clock.now()},
        )
