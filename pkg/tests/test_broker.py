import itertools
import threading
import time

import pytest

from cogworks.broker import (
    Broker,
    InvalidFilterError,
    InvalidTopicError,
    RequestTimeoutError,
    UnknownMemberError,
    topic_matches,
    validate_filter,
)
from cogworks.clock import IdSource, ManualClock


def oracle_match(filter_segs, topic_segs):
    """Brute-force segment-by-segment matcher, kept independent of the broker."""
    if not filter_segs:
        return not topic_segs
    head, rest = filter_segs[0], filter_segs[1:]
    if head == "#":
        return True
    if not topic_segs:
        return False
    if head == "+" or head == topic_segs[0]:
        return oracle_match(rest, topic_segs[1:])
    return False


@pytest.fixture
def broker():
    b = Broker(ids=IdSource(seed=7))
    yield b
    b.close()


def drain(handle, n, timeout=2.0, ack=True):
    got = []
    deadline = time.monotonic() + timeout
    while len(got) < n and time.monotonic() < deadline:
        env = handle.get(timeout=0.05)
        if env is not None:
            got.append(env)
            if ack:
                handle.ack(env.message_id)
    return got


class TestTopicValidation:
    def test_publish_rejects_wildcards(self, broker):
        with pytest.raises(InvalidTopicError):
            broker.publish("a/+", b"x")
        with pytest.raises(InvalidTopicError):
            broker.publish("a/#", b"x")

    def test_publish_rejects_empty_segments(self, broker):
        with pytest.raises(InvalidTopicError):
            broker.publish("", b"x")
        with pytest.raises(InvalidTopicError):
            broker.publish("a//b", b"x")

    def test_filter_hash_must_be_final(self):
        with pytest.raises(InvalidFilterError):
            validate_filter("a/#/b")

    def test_filter_rejects_embedded_wildcards(self):
        with pytest.raises(InvalidFilterError):
            validate_filter("a+b/c")

    def test_valid_filters(self):
        for f in ("#", "a/#", "+", "a/+/c", "$dead/#"):
            validate_filter(f)


class TestFilterMatching:
    def test_single_level_wildcard_depth(self, broker):
        sub = broker.subscribe("m/+/oee")
        broker.publish("m/press01/oee", b"v")
        broker.publish("m/press01/state/oee", b"v")
        got = drain(sub, 1)
        assert [e.topic for e in got] == ["m/press01/oee"]
        assert sub.get(timeout=0.05) is None

    def test_exhaustive_against_oracle(self):
        # every topic of <=5 segments over {a,b,c} against every filter of
        # <=4 segments over {a,b,c,+} with optional trailing #
        alphabet = ("a", "b", "c")
        topics = []
        for n in range(1, 6):
            topics.extend(itertools.product(alphabet, repeat=n))
        filters = []
        for n in range(1, 5):
            for body in itertools.product(alphabet + ("+",), repeat=n - 1):
                for last in alphabet + ("+", "#"):
                    filters.append(body + (last,))
        checked = 0
        for f in filters:
            fstr = "/".join(f)
            for t in topics:
                assert topic_matches(fstr, "/".join(t)) == oracle_match(list(f), list(t))
                checked += 1
        assert checked == len(filters) * len(topics)


class TestFanOut:
    def test_two_independent_subscribers_both_receive(self, broker):
        s1 = broker.subscribe("auth/request")
        s2 = broker.subscribe("auth/#")
        broker.publish("auth/request", {"n": 1})
        assert drain(s1, 1)[0].json() == {"n": 1}
        assert drain(s2, 1)[0].json() == {"n": 1}

    def test_publish_without_subscribers_returns_id(self, broker):
        mid = broker.publish("x/y", b"p")
        assert mid
        assert broker.stats()["delivered"] == 0

    def test_each_subscriber_gets_every_message_exactly_once(self, broker):
        subs = [broker.subscribe("feed/#") for _ in range(2)]
        for i in range(50):
            broker.publish("feed/t", {"i": i})
        for sub in subs:
            got = drain(sub, 50)
            assert sorted(e.json()["i"] for e in got) == list(range(50))
            assert sub.get(timeout=0.02) is None


class TestSharedSubscriptions:
    def test_round_robin_spread_nine_messages(self, broker):
        members = [
            broker.subscribe("intent/#", group="core", member_name=f"core-{i}")
            for i in range(3)
        ]
        for i in range(9):
            broker.publish("intent/turn", {"i": i})
        per_member = [drain(m, 3) for m in members]
        # exactly one delivery per message, three per member under round-robin
        assert [len(g) for g in per_member] == [3, 3, 3]
        seen = sorted(e.json()["i"] for g in per_member for e in g)
        assert seen == list(range(9))

    def test_group_receives_one_copy_per_message(self, broker):
        solo = broker.subscribe("intent/#")
        members = [broker.subscribe("intent/#", group="g") for _ in range(2)]
        broker.publish("intent/x", b"p")
        assert len(drain(solo, 1)) == 1
        group_got = drain(members[0], 1, timeout=0.3) + drain(members[1], 1, timeout=0.3)
        assert len(group_got) == 1


class TestAckAndRedelivery:
    def test_happy_path_single_delivery(self, broker):
        sub = broker.subscribe("t/a", ack_timeout=0.05)
        broker.publish("t/a", b"m")
        env = sub.get(timeout=1.0)
        assert env.redelivery_count == 0
        assert sub.ack(env.message_id)
        time.sleep(0.15)
        assert sub.get(timeout=0.05) is None
        assert broker.stats()["acked"] == 1
        assert broker.stats()["redelivered"] == 0

    def test_unacked_message_redelivered_with_count(self):
        clock = ManualClock(100.0)
        broker = Broker(clock=clock, ids=IdSource(seed=1))
        try:
            sub = broker.subscribe("t/a", ack_timeout=2.0)
            broker.publish("t/a", b"m")
            first = sub.get(timeout=1.0)
            assert first.redelivery_count == 0
            clock.advance(2.5)
            broker.sweep()
            again = sub.get(timeout=1.0)
            assert again.message_id == first.message_id
            assert again.redelivery_count == 1
        finally:
            broker.close()

    def test_exhausted_redeliveries_dead_letter(self):
        clock = ManualClock(0.0)
        broker = Broker(clock=clock, ids=IdSource(seed=2))
        try:
            dead = broker.subscribe("$dead/#")
            sub = broker.subscribe("jobs/x", ack_timeout=1.0, max_redeliveries=2)
            broker.publish("jobs/x", {"job": 1})
            attempts = 0
            for _ in range(3):  # max_redeliveries + 1 total attempts
                env = sub.get(timeout=1.0)
                assert env is not None
                attempts += 1
                clock.advance(1.5)
                broker.sweep()
            assert attempts == 3
            assert sub.get(timeout=0.05) is None  # no fourth attempt
            tomb = dead.get(timeout=1.0)
            assert tomb.topic == "$dead/jobs/x"
            assert tomb.json() == {"job": 1}
            assert broker.stats()["dead_lettered"] == 1
        finally:
            broker.close()

    def test_ack_unknown_message_is_logged_not_fatal(self, broker):
        sub = broker.subscribe("t/b")
        assert sub.ack("msg-nope") is False


class TestRequestResponse:
    def test_loopback_responder(self, broker):
        responder = broker.subscribe("auth/request")

        def serve():
            env = responder.get(timeout=2.0)
            responder.ack(env.message_id)
            broker.publish(
                env.reply_to, {"ok": True}, correlation_id=env.correlation_id
            )

        t = threading.Thread(target=serve, daemon=True)
        t.start()
        raw = broker.request("auth/request", {"secret": "s"}, timeout=2.0)
        t.join()
        import json

        assert json.loads(raw) == {"ok": True}

    def test_timeout_when_no_responder(self, broker):
        with pytest.raises(RequestTimeoutError):
            broker.request("nobody/home", b"x", timeout=0.1)

    def test_concurrent_requests_keep_their_own_responses(self, broker):
        responder = broker.subscribe("echo/request")
        stop = threading.Event()

        def serve():
            while not stop.is_set():
                env = responder.get(timeout=0.05)
                if env is None:
                    continue
                responder.ack(env.message_id)
                broker.publish(
                    env.reply_to, env.payload, correlation_id=env.correlation_id
                )

        t = threading.Thread(target=serve, daemon=True)
        t.start()
        results = {}

        def ask(n):
            results[n] = broker.request("echo/request", {"n": n}, timeout=2.0)

        askers = [threading.Thread(target=ask, args=(i,)) for i in range(4)]
        for a in askers:
            a.start()
        for a in askers:
            a.join()
        stop.set()
        t.join()
        import json

        for i in range(4):
            assert json.loads(results[i]) == {"n": i}


class TestMemberRemoval:
    def test_pending_messages_rescheduled_to_survivors(self, broker):
        members = {
            name: broker.subscribe("w/#", group="g", member_name=name, ack_timeout=30.0)
            for name in ("A", "B", "C")
        }
        for i in range(15):
            broker.publish("w/t", {"i": i})
        # B takes delivery of its share but never acks, then dies
        b_got = [members["B"].get(timeout=0.5) for _ in range(5)]
        assert all(e is not None for e in b_got)
        broker.remove_member("g", "B")
        survivors = []
        deadline = time.monotonic() + 3.0
        while len(survivors) < 15 and time.monotonic() < deadline:
            for name in ("A", "C"):
                env = members[name].get(timeout=0.02)
                if env is not None:
                    members[name].ack(env.message_id)
                    survivors.append(env.json()["i"])
        assert sorted(survivors) == list(range(15))

    def test_kill_last_member_then_rejoin(self, broker):
        m = broker.subscribe("q/#", group="g", member_name="only")
        broker.publish("q/a", {"i": 0})
        broker.remove_member("g", "only")
        broker.publish("q/a", {"i": 1})
        fresh = broker.subscribe("q/#", group="g", member_name="joiner")
        got = sorted(e.json()["i"] for e in drain(fresh, 2))
        assert got == [0, 1]

    def test_kill_member_without_pending_is_quiet(self, broker):
        a = broker.subscribe("q/#", group="g", member_name="a")
        b = broker.subscribe("q/#", group="g", member_name="b")
        broker.remove_member("g", "b")
        before = broker.stats()["redelivered"]
        broker.publish("q/z", b"m")
        assert drain(a, 1)
        assert broker.stats()["redelivered"] == before

    def test_unknown_member_raises(self, broker):
        broker.subscribe("q/#", group="g", member_name="a")
        with pytest.raises(UnknownMemberError):
            broker.remove_member("g", "ghost")


class TestProperties:
    def test_at_least_once_under_random_ack_drops(self):
        broker = Broker(ids=IdSource(seed=3))
        try:
            broker.set_ack_drop(0.4, seed=11)
            members = [
                broker.subscribe(
                    "load/#", group="g", ack_timeout=0.03, max_redeliveries=10
                )
                for _ in range(2)
            ]
            seen_counts: dict[int, int] = {}
            lock = threading.Lock()
            stop = threading.Event()

            def consume(handle):
                while not stop.is_set():
                    env = handle.get(timeout=0.02)
                    if env is None:
                        continue
                    with lock:
                        i = env.json()["i"]
                        seen_counts[i] = seen_counts.get(i, 0) + 1
                    handle.ack(env.message_id)

            threads = [threading.Thread(target=consume, args=(m,)) for m in members]
            for t in threads:
                t.start()
            total = 200
            for i in range(total):
                broker.publish("load/t", {"i": i})
            deadline = time.monotonic() + 20.0
            while time.monotonic() < deadline:
                s = broker.stats()
                if s["acked"] + s["dead_lettered"] >= total:
                    break
                time.sleep(0.02)
            stop.set()
            for t in threads:
                t.join()
            s = broker.stats()
            assert set(seen_counts) == set(range(total))  # everything delivered
            assert s["dead_lettered"] == 0  # 11 attempts at p=0.4 never exhaust
            assert s["redelivered"] > 0
        finally:
            broker.close()

    def test_redelivery_count_monotone_and_bounded(self):
        clock = ManualClock(0.0)
        broker = Broker(clock=clock, ids=IdSource(seed=4))
        try:
            sub = broker.subscribe("t/x", ack_timeout=1.0, max_redeliveries=3)
            broker.publish("t/x", b"m")
            counts = []
            for _ in range(10):
                env = sub.get(timeout=0.2)
                if env is None:
                    break
                counts.append(env.redelivery_count)
                clock.advance(2.0)
                broker.sweep()
            assert counts == [0, 1, 2, 3]  # max_redeliveries + 1 attempts total
        finally:
            broker.close()
