import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cogworks.broker import Broker
from cogworks.clock import IdSource, ManualClock
from cogworks.connectivity import (
    ConnectRefusedError,
    ConnectivityService,
    DeviceEndpoint,
    InvalidArgsError,
    MachineSim,
    SessionDownError,
    UnknownDeviceError,
    UnknownNodeError,
    capacity_within,
)


def make_machine(availability=0.9, performance=0.95, quality=0.99, rate=20.0, clock=None):
    return MachineSim(
        "press01",
        availability=availability,
        performance=performance,
        quality=quality,
        ideal_rate=rate,
        clock=clock or ManualClock(0.0),
    )


@pytest.fixture
def service():
    svc = ConnectivityService(
        clock=ManualClock(0.0), ids=IdSource(seed=31), reconnect_backoff=0.001
    )
    svc.register_device(DeviceEndpoint("press01"), make_machine())
    return svc


class TestConnect:
    def test_connect_registered_device(self, service):
        session = service.connect("press01")
        assert session.live

    def test_unknown_device(self, service):
        with pytest.raises(UnknownDeviceError):
            service.connect("ghost")

    def test_refused_connect(self, service):
        service.refuse_connects("press01")
        with pytest.raises(ConnectRefusedError):
            service.connect("press01")

    def test_drop_then_reconnect_with_backoff(self, service):
        session = service.connect("press01")
        session.drop()
        assert not session.live
        value = service.read_variable(session, "ns=1;s=OEE")
        assert session.live
        assert value == pytest.approx(0.84645, abs=1e-12)

    def test_reconnect_gives_up_when_refused(self, service):
        session = service.connect("press01")
        session.drop()
        service.refuse_connects("press01")
        with pytest.raises(SessionDownError):
            service.read_variable(session, "ns=1;s=OEE")


class TestReadVariable:
    def test_oee_is_product_of_factors(self, service):
        session = service.connect("press01")
        value = service.read_variable(session, "ns=1;s=OEE")
        assert value == 0.9 * 0.95 * 0.99  # one multiplication chain, exact

    def test_ideal_rate_echo(self, service):
        session = service.connect("press01")
        assert service.read_variable(session, "ns=1;s=IdealRate") == 20.0

    def test_unknown_node(self, service):
        session = service.connect("press01")
        with pytest.raises(UnknownNodeError):
            service.read_variable(session, "ns=1;s=Nope")

    def test_reads_have_no_side_effects(self, service):
        session = service.connect("press01")
        machine = service._machine("press01")
        before = machine.capacity(168.0)
        for _ in range(10):
            service.read_variable(session, "ns=1;s=OEE")
            service.read_variable(session, "ns=1;s=OrderQueueDepth")
        assert machine.capacity(168.0) == before


class TestWorkOrders:
    def canonical(self, oee_quality):
        # A=1, P=1 makes quality the whole oee, exactly
        svc = ConnectivityService(clock=ManualClock(0.0), ids=IdSource(seed=32))
        svc.register_device(
            DeviceEndpoint("press01"),
            make_machine(availability=1.0, performance=1.0, quality=oee_quality),
        )
        return svc, svc.connect("press01")

    def test_accepted_within_capacity(self):
        svc, session = self.canonical(0.85)
        # oracle: floor(20 * 168 * 0.85) = 2856 >= 2300
        assert math.floor(20 * 168 * 0.85) == 2856
        order = svc.dispatch_work_order(session, 2300, 168.0)
        assert order.status == "accepted"
        assert order.capacity_at_decision == 2856

    def test_low_oee_rejected(self):
        svc, session = self.canonical(0.50)
        assert math.floor(20 * 168 * 0.50) == 1680
        order = svc.dispatch_work_order(session, 2300, 168.0)
        assert order.status == "rejected"
        assert order.reject_reason == "NON_DISPATCHABLE"
        assert order.capacity_at_decision == 1680

    def test_units_beyond_capacity_rejected(self):
        svc, session = self.canonical(0.85)
        order = svc.dispatch_work_order(session, 5000, 168.0)
        assert order.status == "rejected"
        assert order.capacity_at_decision == 2856

    def test_commitments_reduce_capacity(self):
        svc, session = self.canonical(0.85)
        first = svc.dispatch_work_order(session, 2300, 168.0)
        assert first.status == "accepted"
        second = svc.dispatch_work_order(session, 600, 168.0)
        # 2856 - 2300 = 556 < 600
        assert second.status == "rejected"
        assert second.capacity_at_decision == 556

    def test_invalid_args(self):
        svc, session = self.canonical(0.85)
        with pytest.raises(InvalidArgsError):
            svc.dispatch_work_order(session, 0, 168.0)
        with pytest.raises(InvalidArgsError):
            svc.dispatch_work_order(session, 10, 0.0)

    @given(
        quality=st.floats(min_value=0.1, max_value=1.0),
        orders=st.lists(
            st.tuples(
                st.integers(min_value=1, max_value=2000),
                st.floats(min_value=1.0, max_value=400.0),
            ),
            min_size=1,
            max_size=25,
        ),
    )
    @settings(max_examples=50, deadline=None)
    def test_decisions_agree_with_history_oracle(self, quality, orders):
        machine = make_machine(availability=1.0, performance=1.0, quality=quality)
        ids = IdSource(seed=33)
        accepted_history: list[tuple[int, float]] = []
        for units, hours in orders:
            decision = machine.dispatch(units, hours, ids)
            # oracle recomputes capacity from the full accepted-order history
            committed = sum(u for u, h in accepted_history if h <= hours)
            capacity = math.floor(machine.ideal_rate * hours * machine.oee) - committed
            assert decision.status == ("accepted" if units <= capacity else "rejected")
            if decision.status == "accepted":
                accepted_history.append((units, hours))
                # ledger audit at acceptance time: the accepted horizon's
                # commitments stay within its raw capacity
                assert machine.committed_units(hours) <= math.floor(
                    machine.ideal_rate * hours * machine.oee
                )

    def test_completion_frees_capacity(self):
        svc, session = self.canonical(0.85)
        order = svc.dispatch_work_order(session, 2300, 168.0)
        machine = svc._machine("press01")
        machine.complete_order(order.order_id)
        again = svc.dispatch_work_order(session, 2300, 168.0)
        assert again.status == "accepted"


class TestExportEvents:
    def test_value_change_published(self):
        broker = Broker(ids=IdSource(seed=34))
        try:
            svc = ConnectivityService(broker, clock=ManualClock(0.0), ids=IdSource(seed=35))
            machine = make_machine()
            svc.register_device(DeviceEndpoint("press01"), machine)
            svc.connect("press01")
            svc.export_event("press01", "ns=1;s=Quality")
            sub = broker.subscribe("device/press01/#")
            machine.set_factor("Quality", 0.5)
            env = sub.get(timeout=1.0)
            assert env.topic == "device/press01/Quality"
            assert env.json()["value"] == 0.5
        finally:
            broker.close()

    def test_no_change_no_event(self):
        broker = Broker(ids=IdSource(seed=36))
        try:
            svc = ConnectivityService(broker, clock=ManualClock(0.0), ids=IdSource(seed=37))
            svc.register_device(DeviceEndpoint("press01"), make_machine())
            svc.connect("press01")
            svc.export_event("press01", "ns=1;s=Quality")
            sub = broker.subscribe("device/press01/#")
            assert sub.get(timeout=0.1) is None
        finally:
            broker.close()

    def test_disconnected_device_errors(self):
        svc = ConnectivityService(clock=ManualClock(0.0), ids=IdSource(seed=38))
        svc.register_device(DeviceEndpoint("press01"), make_machine())
        with pytest.raises(SessionDownError):
            svc.export_event("press01", "ns=1;s=OEE")


class TestCapacityFunction:
    @given(
        oee=st.floats(min_value=0.0, max_value=1.0),
        rate=st.floats(min_value=0.1, max_value=1000.0),
        hours=st.floats(min_value=0.1, max_value=10_000.0),
        committed=st.integers(min_value=0, max_value=10**6),
    )
    @settings(max_examples=100, deadline=None)
    def test_matches_direct_arithmetic(self, oee, rate, hours, committed):
        assert capacity_within(oee, rate, hours, committed) == math.floor(
            rate * hours * oee
        ) - committed
