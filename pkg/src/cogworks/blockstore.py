"""Replicated block store with HDFS-style semantics, at desk scale.

Files are split into fixed-size blocks; each block is written through a
pipeline of R distinct live data nodes and acknowledged only when all R
replicas are on disk. Appends follow multi-reader single-writer semantics
enforced by a per-file lease; reads pick one live replica per block at
random and verify checksums, falling back to other replicas on corruption.

A pipeline failure mid-append aborts the whole append (no partial commit);
pipeline recovery is intentionally out of scope. On-disk layout is one
directory per node holding block files, plus a JSON namespace manifest, so
a store can be reopened over an existing root.

The session journal is a JSON-lines file inside the store.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .clock import Clock, IdSource, SystemClock

log = logging.getLogger(__name__)

JOURNAL_PATH = "journal/sessions.jsonl"
JOURNAL_WRITER = "journal-writer"
JOURNAL_FIELDS = ("session_id", "request", "response", "intent", "entity", "trace_id", "ts")


class BlockStoreError(Exception):
    pass


class LeaseHeldError(BlockStoreError):
    pass


class InsufficientNodesError(BlockStoreError):
    pass


class UnavailableError(BlockStoreError):
    pass


class ChecksumMismatchError(BlockStoreError):
    pass


class UnknownNodeError(BlockStoreError):
    pass


class NodeDownError(BlockStoreError):
    pass


class UnknownFileError(BlockStoreError):
    pass


@dataclass
class BlockMeta:
    block_id: str
    seq: int
    size: int
    checksum: str
    nodes: list[str]


@dataclass
class FileEntry:
    path: str
    blocks: list[BlockMeta] = field(default_factory=list)
    length: int = 0
    lease_holder: str | None = None
    lease_expiry: float = 0.0


class DataNodeSim:
    """One simulated data node: a directory of block files plus a liveness flag."""

    def __init__(self, node_id: str, root: Path):
        self.node_id = node_id
        self.dir = root / node_id
        self.dir.mkdir(parents=True, exist_ok=True)
        self.alive = True

    def store(self, block_id: str, data: bytes) -> None:
        if not self.alive:
            raise NodeDownError(self.node_id)
        (self.dir / block_id).write_bytes(data)

    def fetch(self, block_id: str) -> bytes:
        if not self.alive:
            raise NodeDownError(self.node_id)
        path = self.dir / block_id
        if not path.exists():
            raise NodeDownError(f"{self.node_id} lost block {block_id}")
        return path.read_bytes()

    def discard(self, block_id: str) -> None:
        (self.dir / block_id).unlink(missing_ok=True)

    def corrupt(self, block_id: str) -> None:
        """Fault hook: flip bytes in a stored replica."""
        path = self.dir / block_id
        data = bytearray(path.read_bytes())
        if data:
            data[0] ^= 0xFF
        path.write_bytes(bytes(data))


class BlockStore:
    def __init__(
        self,
        root: str | Path,
        num_nodes: int = 4,
        replication: int = 3,
        block_size: int = 4096,
        lease_ttl: float = 30.0,
        clock: Clock | None = None,
        ids: IdSource | None = None,
        rng: random.Random | None = None,
    ):
        if replication < 1 or num_nodes < 1:
            raise ValueError("need at least one node and replication >= 1")
        self.root = Path(root)
        self.replication = replication
        self.block_size = block_size
        self.lease_ttl = lease_ttl
        self._clock = clock or SystemClock()
        self._ids = ids or IdSource()
        self._rng = rng or random.Random()
        self._lock = threading.RLock()
        self.root.mkdir(parents=True, exist_ok=True)
        manifest = self.root / "namespace.json"
        if manifest.exists():
            self._load_manifest()
        else:
            self.nodes = {f"dn-{i}": DataNodeSim(f"dn-{i}", self.root) for i in range(num_nodes)}
            self._files: dict[str, FileEntry] = {}
            self._save_manifest()

    # -- operations ---------------------------------------------------------------

    def append(self, path: str, data: bytes, lease_holder: str) -> int:
        """Append bytes under the caller's writer lease; returns new file length."""
        if not data:
            return self.length(path)
        with self._lock:
            entry = self._files.get(path) or FileEntry(path=path)
            self._acquire_lease(entry, lease_holder)

            staged: list[tuple[BlockMeta, bytes, bool]] = []  # (meta, bytes, is_new)
            offset = 0
            open_block = entry.blocks[-1] if entry.blocks and entry.blocks[-1].size < self.block_size else None
            open_block_original: bytes | None = None
            if open_block is not None:
                take = min(len(data), self.block_size - open_block.size)
                open_block_original = self._read_block(open_block)
                merged = open_block_original + data[:take]
                staged.append(
                    (
                        BlockMeta(
                            block_id=open_block.block_id,
                            seq=open_block.seq,
                            size=len(merged),
                            checksum=_checksum(merged),
                            nodes=list(open_block.nodes),
                        ),
                        merged,
                        False,
                    )
                )
                offset = take
            next_seq = len(entry.blocks)
            while offset < len(data):
                chunk = data[offset : offset + self.block_size]
                offset += len(chunk)
                pipeline = self._pick_pipeline()
                staged.append(
                    (
                        BlockMeta(
                            block_id=self._ids.next("blk"),
                            seq=next_seq,
                            size=len(chunk),
                            checksum=_checksum(chunk),
                            nodes=pipeline,
                        ),
                        chunk,
                        True,
                    )
                )
                next_seq += 1

            written: list[tuple[str, str, bool]] = []  # (node_id, block_id, is_new)
            try:
                for meta, blob, is_new in staged:
                    for node_id in meta.nodes:
                        self.nodes[node_id].store(meta.block_id, blob)
                        written.append((node_id, meta.block_id, is_new))
            except NodeDownError as exc:
                self._rollback(open_block, open_block_original, written)
                raise BlockStoreError(f"append aborted, pipeline node failed: {exc}") from exc

            for meta, _, is_new in staged:
                if is_new:
                    entry.blocks.append(meta)
                else:
                    entry.blocks[meta.seq] = meta
            entry.length += len(data)
            self._files[path] = entry
            self._save_manifest()
            return entry.length

    def read(self, path: str) -> bytes:
        """Whole-file read; one live replica per block, checksum-verified."""
        with self._lock:
            entry = self._files.get(path)
            if entry is None:
                raise UnknownFileError(path)
            blocks = [
                BlockMeta(b.block_id, b.seq, b.size, b.checksum, list(b.nodes))
                for b in entry.blocks
            ]
        out = bytearray()
        for meta in blocks:
            out.extend(self._read_block(meta))
        return bytes(out)

    def journal_session(self, record: dict[str, Any]) -> None:
        """Append one complete session record to the JSON-lines journal."""
        missing = [f for f in JOURNAL_FIELDS if f not in record]
        if missing:
            raise ValueError(f"journal record missing fields: {missing}")
        line = json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"
        self.append(JOURNAL_PATH, line.encode(), lease_holder=JOURNAL_WRITER)

    def read_journal(self) -> list[dict[str, Any]]:
        try:
            raw = self.read(JOURNAL_PATH)
        except UnknownFileError:
            return []
        return [json.loads(line) for line in raw.decode().splitlines() if line]

    def set_node_alive(self, node_id: str, alive: bool) -> None:
        with self._lock:
            node = self.nodes.get(node_id)
            if node is None:
                raise UnknownNodeError(node_id)
            node.alive = alive

    # -- observation ----------------------------------------------------------------

    def length(self, path: str) -> int:
        with self._lock:
            entry = self._files.get(path)
            return 0 if entry is None else entry.length

    def block_map(self, path: str) -> list[BlockMeta]:
        with self._lock:
            entry = self._files.get(path)
            if entry is None:
                raise UnknownFileError(path)
            return [
                BlockMeta(b.block_id, b.seq, b.size, b.checksum, list(b.nodes))
                for b in entry.blocks
            ]

    def stats(self) -> dict[str, Any]:
        with self._lock:
            return {
                "files": len(self._files),
                "blocks": sum(len(f.blocks) for f in self._files.values()),
                "nodes": {n.node_id: n.alive for n in self.nodes.values()},
                "journal_lines": 0
                if JOURNAL_PATH not in self._files
                else sum(1 for _ in self._peek_journal_lines()),
            }

    def _peek_journal_lines(self):
        try:
            yield from self.read(JOURNAL_PATH).decode().splitlines()
        except BlockStoreError:
            return

    # -- internals ---------------------------------------------------------------------

    def _acquire_lease(self, entry: FileEntry, holder: str) -> None:
        now = self._clock.now()
        if (
            entry.lease_holder is not None
            and entry.lease_holder != holder
            and entry.lease_expiry > now
        ):
            raise LeaseHeldError(
                f"{entry.path} is leased to {entry.lease_holder!r} "
                f"for another {entry.lease_expiry - now:.1f}s"
            )
        entry.lease_holder = holder
        entry.lease_expiry = now + self.lease_ttl

    def _pick_pipeline(self) -> list[str]:
        live = [n.node_id for n in self.nodes.values() if n.alive]
        if len(live) < self.replication:
            raise InsufficientNodesError(
                f"{len(live)} live nodes < replication factor {self.replication}"
            )
        return self._rng.sample(live, self.replication)

    def _read_block(self, meta: BlockMeta) -> bytes:
        holders = [
            self.nodes[nid]
            for nid in meta.nodes
            if nid in self.nodes and self.nodes[nid].alive
        ]
        if not holders:
            raise UnavailableError(f"block {meta.block_id} has no live replicas")
        order = list(holders)
        self._rng.shuffle(order)
        corrupt = 0
        for node in order:
            try:
                blob = node.fetch(meta.block_id)
            except NodeDownError:
                continue
            if _checksum(blob) == meta.checksum:
                return blob
            corrupt += 1
            log.warning("checksum mismatch for %s on %s", meta.block_id, node.node_id)
        if corrupt:
            raise ChecksumMismatchError(f"all live replicas of {meta.block_id} corrupt")
        raise UnavailableError(f"block {meta.block_id} unreadable on all live replicas")

    def _rollback(
        self,
        open_block: BlockMeta | None,
        open_block_original: bytes | None,
        written: list[tuple[str, str, bool]],
    ) -> None:
        for node_id, block_id, is_new in written:
            if is_new:
                self.nodes[node_id].discard(block_id)
        if open_block is not None and open_block_original is not None:
            # restore the open block's committed content on reachable replicas;
            # stale replicas on dead nodes are caught later by checksum
            for node_id in open_block.nodes:
                node = self.nodes[node_id]
                if node.alive:
                    node.store(open_block.block_id, open_block_original)

    def _save_manifest(self) -> None:
        manifest = {
            "replication": self.replication,
            "block_size": self.block_size,
            "nodes": sorted(self.nodes),
            "files": {
                path: {
                    "length": e.length,
                    "lease_holder": e.lease_holder,
                    "lease_expiry": e.lease_expiry,
                    "blocks": [
                        {
                            "block_id": b.block_id,
                            "seq": b.seq,
                            "size": b.size,
                            "checksum": b.checksum,
                            "nodes": b.nodes,
                        }
                        for b in e.blocks
                    ],
                }
                for path, e in self._files.items()
            },
        }
        tmp = self.root / "namespace.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        os.replace(tmp, self.root / "namespace.json")

    def _load_manifest(self) -> None:
        manifest = json.loads((self.root / "namespace.json").read_text())
        self.replication = manifest["replication"]
        self.block_size = manifest["block_size"]
        self.nodes = {nid: DataNodeSim(nid, self.root) for nid in manifest["nodes"]}
        self._files = {}
        for path, fdata in manifest["files"].items():
            self._files[path] = FileEntry(
                path=path,
                length=fdata["length"],
                lease_holder=fdata["lease_holder"],
                lease_expiry=fdata["lease_expiry"],
                blocks=[BlockMeta(**b) for b in fdata["blocks"]],
            )


def _checksum(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
