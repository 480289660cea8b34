import json
import random
import threading

import pytest

from cogworks.blockstore import (
    BlockStore,
    BlockStoreError,
    ChecksumMismatchError,
    InsufficientNodesError,
    LeaseHeldError,
    UnavailableError,
    UnknownNodeError,
)
from cogworks.clock import IdSource, ManualClock


@pytest.fixture
def clock():
    return ManualClock(0.0)


@pytest.fixture
def store(tmp_path, clock):
    return BlockStore(
        tmp_path / "bdp",
        num_nodes=4,
        replication=3,
        block_size=4096,
        lease_ttl=30.0,
        clock=clock,
        ids=IdSource(seed=41),
        rng=random.Random(41),
    )


def journal_record(i=0):
    return {
        "session_id": f"s{i}",
        "request": f"req {i}",
        "response": f"resp {i}",
        "intent": "#READ_OEE",
        "entity": "#MACHINE",
        "trace_id": f"t{i}",
        "ts": float(i),
    }


class TestAppendPlacement:
    def test_ten_kib_makes_three_fully_replicated_blocks(self, store):
        data = bytes(range(256)) * 40  # 10240 bytes
        assert store.append("f/a.bin", data, lease_holder="w1") == 10240
        blocks = store.block_map("f/a.bin")
        assert [b.size for b in blocks] == [4096, 4096, 2048]
        for block in blocks:
            assert len(set(block.nodes)) == 3
            for node_id in block.nodes:
                assert (store.nodes[node_id].dir / block.block_id).exists()

    def test_second_writer_lease_held(self, store):
        store.append("f/a.bin", b"x" * 10, lease_holder="w1")
        with pytest.raises(LeaseHeldError):
            store.append("f/a.bin", b"y" * 10, lease_holder="w2")

    def test_same_holder_keeps_appending(self, store):
        store.append("f/a.bin", b"x" * 10, lease_holder="w1")
        assert store.append("f/a.bin", b"y" * 10, lease_holder="w1") == 20

    def test_lease_expires(self, store, clock):
        store.append("f/a.bin", b"x" * 10, lease_holder="w1")
        clock.advance(31.0)
        assert store.append("f/a.bin", b"y" * 10, lease_holder="w2") == 20

    def test_insufficient_live_nodes(self, store):
        store.set_node_alive("dn-0", False)
        store.set_node_alive("dn-1", False)
        with pytest.raises(InsufficientNodesError):
            store.append("f/a.bin", b"x", lease_holder="w1")

    def test_partial_block_reuses_pipeline(self, store):
        store.append("f/a.bin", b"x" * 100, lease_holder="w1")
        first_nodes = set(store.block_map("f/a.bin")[0].nodes)
        store.append("f/a.bin", b"y" * 100, lease_holder="w1")
        blocks = store.block_map("f/a.bin")
        assert len(blocks) == 1
        assert set(blocks[0].nodes) == first_nodes


class TestRead:
    def test_round_trip_identity(self, store):
        data = bytes(random.Random(7).randrange(256) for _ in range(9000))
        store.append("f/a.bin", data, lease_holder="w1")
        assert store.read("f/a.bin") == data

    def test_read_survives_single_node_kill(self, store):
        data = b"z" * 5000
        store.append("f/a.bin", data, lease_holder="w1")
        victim = store.block_map("f/a.bin")[0].nodes[0]
        store.set_node_alive(victim, False)
        assert store.read("f/a.bin") == data

    def test_all_holders_dead_unavailable(self, store):
        store.append("f/a.bin", b"q" * 100, lease_holder="w1")
        for node_id in store.block_map("f/a.bin")[0].nodes:
            store.set_node_alive(node_id, False)
        with pytest.raises(UnavailableError):
            store.read("f/a.bin")

    def test_corrupt_replica_falls_back(self, store):
        store.append("f/a.bin", b"q" * 100, lease_holder="w1")
        block = store.block_map("f/a.bin")[0]
        store.nodes[block.nodes[0]].corrupt(block.block_id)
        assert store.read("f/a.bin") == b"q" * 100

    def test_all_replicas_corrupt_checksum_error(self, store):
        store.append("f/a.bin", b"q" * 100, lease_holder="w1")
        block = store.block_map("f/a.bin")[0]
        for node_id in block.nodes:
            store.nodes[node_id].corrupt(block.block_id)
        with pytest.raises(ChecksumMismatchError):
            store.read("f/a.bin")


class TestNodeLiveness:
    def test_kill_mid_pipeline_aborts_append_without_partial_commit(self, store):
        store.append("f/a.bin", b"a" * 100, lease_holder="w1")
        pipeline = store.block_map("f/a.bin")[0].nodes
        store.set_node_alive(pipeline[1], False)
        with pytest.raises(BlockStoreError):
            store.append("f/a.bin", b"b" * 100, lease_holder="w1")
        store.set_node_alive(pipeline[1], True)
        assert store.read("f/a.bin") == b"a" * 100  # old content intact
        assert store.length("f/a.bin") == 100

    def test_kill_and_revive_round_trip(self, store):
        store.append("f/a.bin", b"a" * 100, lease_holder="w1")
        store.set_node_alive("dn-0", False)
        store.set_node_alive("dn-0", True)
        assert store.read("f/a.bin") == b"a" * 100

    def test_kill_uninvolved_node_changes_nothing(self, store):
        store.append("f/a.bin", b"a" * 100, lease_holder="w1")
        involved = set(store.block_map("f/a.bin")[0].nodes)
        spare = next(n for n in store.nodes if n not in involved)
        store.set_node_alive(spare, False)
        assert store.read("f/a.bin") == b"a" * 100

    def test_unknown_node(self, store):
        with pytest.raises(UnknownNodeError):
            store.set_node_alive("dn-99", False)


class TestJournal:
    def test_round_trip_preserves_fields(self, store):
        record = journal_record(0)
        store.journal_session(record)
        assert store.read_journal() == [record]

    def test_thousand_records_in_order(self, store):
        for i in range(1000):
            store.journal_session(journal_record(i))
        lines = store.read_journal()
        assert len(lines) == 1000
        assert [r["trace_id"] for r in lines] == [f"t{i}" for i in range(1000)]

    def test_incomplete_record_rejected(self, store):
        record = journal_record(0)
        del record["intent"]
        with pytest.raises(ValueError):
            store.journal_session(record)


class TestPersistence:
    def test_reopen_over_existing_root(self, tmp_path, clock):
        root = tmp_path / "bdp"
        store = BlockStore(root, clock=clock, ids=IdSource(seed=42), rng=random.Random(42))
        data = b"persist me" * 500
        store.append("f/a.bin", data, lease_holder="w1")
        store.journal_session(journal_record(1))

        reopened = BlockStore(root, clock=clock, ids=IdSource(seed=43), rng=random.Random(43))
        assert reopened.read("f/a.bin") == data
        assert reopened.read_journal() == [journal_record(1)]
        assert reopened.replication == 3


class TestSingleWriter:
    def test_concurrent_writers_never_interleave(self, store):
        winners, losers = [], []

        def write(holder):
            try:
                for _ in range(5):
                    store.append("f/shared.bin", holder.encode() * 20, lease_holder=holder)
                winners.append(holder)
            except LeaseHeldError:
                losers.append(holder)

        threads = [threading.Thread(target=write, args=(h,)) for h in ("A", "B")]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(winners) == 1 and len(losers) == 1
        content = store.read("f/shared.bin").decode()
        assert set(content) == {winners[0]}
