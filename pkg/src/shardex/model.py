"""Domain types: objects, transactions, batches, commit entries and protocol messages.

Everything here is an immutable value. Object ids are plain 32-byte ``bytes``
so that ordering is lexicographic and hashing is cheap.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional, Union

ObjectId = bytes
NULL_ID = bytes(32)


def h256(*parts: bytes) -> bytes:
    # sha256 everywhere; digests only need to be stable, not adversarially strong
    m = hashlib.sha256()
    for p in parts:
        m.update(len(p).to_bytes(4, "big"))
        m.update(p)
    return m.digest()


def oid_from_int(n: int) -> ObjectId:
    return h256(b"oid", n.to_bytes(8, "big"))


def oid_from_label(label: str) -> ObjectId:
    return h256(b"label", label.encode())


def shard_of(oid: bytes, n_shards: int) -> int:
    if n_shards < 1:
        raise ValueError("n_shards must be >= 1")
    return int.from_bytes(oid[:8], "big") % n_shards


def sequencer_of(batch_id: bytes, n_sequencers: int) -> int:
    return shard_of(batch_id, n_sequencers)


# ---- payloads ----

@dataclass(frozen=True, slots=True)
class Coin:
    balance: int


@dataclass(frozen=True, slots=True)
class Counter:
    value: int


@dataclass(frozen=True, slots=True)
class Table:
    # sorted (key, child id) pairs
    entries: tuple = ()

    def lookup(self, key: int) -> Optional[ObjectId]:
        for k, cid in self.entries:
            if k == key:
                return cid
        return None

    def with_entry(self, key: int, cid: ObjectId) -> "Table":
        d = dict(self.entries)
        d[key] = cid
        return Table(tuple(sorted(d.items())))


Payload = Union[Coin, Counter, Table]


@dataclass(frozen=True, slots=True)
class Object:
    oid: ObjectId
    version: int
    owner: Optional[ObjectId]
    payload: Payload


# ---- entry functions ----

@dataclass(frozen=True, slots=True)
class Transfer:
    src: ObjectId
    dst: ObjectId
    amount: int


@dataclass(frozen=True, slots=True)
class MergeAndFib:
    src: ObjectId
    dst: ObjectId
    n: int


@dataclass(frozen=True, slots=True)
class IncrementCounter:
    pass


@dataclass(frozen=True, slots=True)
class DynamicChildAccess:
    table: ObjectId
    key: int


EntryFunction = Union[Transfer, MergeAndFib, IncrementCounter, DynamicChildAccess]


@dataclass(frozen=True, slots=True)
class Transaction:
    digest: bytes
    index: int
    read_set: frozenset
    write_set: frozenset
    entry: EntryFunction
    # writes that do not consume the prior contents (subset of write_set)
    blind: frozenset = frozenset()
    # children added by augmentation (subset of write_set)
    discovered: frozenset = frozenset()

    def __post_init__(self):
        if self.read_set & self.write_set:
            raise ValueError("read_set and write_set overlap")
        if not self.blind <= self.write_set or not self.discovered <= self.write_set:
            raise ValueError("blind/discovered must be subsets of write_set")

    @property
    def objects(self) -> frozenset:
        return self.read_set | self.write_set

    def augmented(self, child: ObjectId) -> "Transaction":
        return replace(self, write_set=self.write_set | {child},
                       discovered=self.discovered | {child})

    def label(self) -> str:
        return f"Tx{self.index}"


def handled(tx: Transaction, shard: int, n_shards: int) -> list:
    """Sorted object ids of tx that live on `shard`."""
    return sorted(o for o in tx.read_set | tx.write_set if shard_of(o, n_shards) == shard)


def executor_of(tx: Transaction, n_shards: int) -> int:
    objs = tx.read_set | tx.write_set
    if not objs:
        raise ValueError("transaction references no objects")
    counts = [0] * n_shards
    for o in objs:
        counts[shard_of(o, n_shards)] += 1
    best = max(counts)
    return counts.index(best)


def make_tx(index: int, entry: EntryFunction, read=(), write=(), blind=(), nonce: int | None = None) -> Transaction:
    """Build a transaction; object sets default from the entry arguments."""
    read = frozenset(read)
    write = frozenset(write)
    if isinstance(entry, (Transfer, MergeAndFib)):
        write = write | {entry.src, entry.dst}
    elif isinstance(entry, DynamicChildAccess):
        write = write | {entry.table}
    blind = frozenset(blind)
    from .codec import encode_tx_core
    digest = h256(b"tx", encode_tx_core(read, write, blind, entry),
                  (index if nonce is None else nonce).to_bytes(8, "big"))
    return Transaction(digest, index, read, write, entry, blind)


@dataclass(frozen=True, slots=True)
class Batch:
    batch_id: bytes
    txs: tuple

    @staticmethod
    def of(txs) -> "Batch":
        from .codec import encode_txs
        txs = tuple(txs)
        return Batch(h256(b"batch", encode_txs(txs)), txs)


@dataclass(frozen=True, slots=True)
class CommitEntry:
    batch_idx: int
    batch_id: bytes


# ---- protocol messages ----

@dataclass(frozen=True, slots=True)
class ProposeMessage:
    batch_idx: int
    batch_id: bytes
    txs: tuple = ()


@dataclass(frozen=True, slots=True)
class ReadyMessage:
    tx: Transaction
    # sorted (oid, Object | None) pairs
    objects: tuple = ()


@dataclass(frozen=True, slots=True)
class ResultMessage:
    tx: Transaction
    mutated: tuple = ()  # Objects sorted by oid
    deleted: tuple = ()  # oids sorted
    aborted: bool = False


@dataclass(frozen=True, slots=True)
class UpdateProposeExec:
    aug_tx: Transaction


@dataclass(frozen=True, slots=True)
class CheckpointedMessage:
    shard: int
    txidx: int


@dataclass(frozen=True, slots=True)
class Recover:
    req: int


@dataclass(frozen=True, slots=True)
class RecoverOk:
    req: int
    stable_txid: int


@dataclass(frozen=True, slots=True)
class NewReader:
    req: int
    txidx: int


@dataclass(frozen=True, slots=True)
class NewReaderOk:
    req: int
    stable_txid: int


@dataclass(frozen=True, slots=True)
class Abort:
    req: int


@dataclass(frozen=True, slots=True)
class NotifySync:
    pass


@dataclass(frozen=True, slots=True)
class Sync:
    req: int
    txidx: int


@dataclass(frozen=True, slots=True)
class SyncReply:
    req: int
    blob: bytes


@dataclass(frozen=True, slots=True)
class SyncComplete:
    txidx: int
    echo: bool = False  # reply from a peer that resent its output instead of syncing


@dataclass(frozen=True, slots=True)
class ProposeRequest:
    """Ask a sequencer to re-send proposals from a batch index onwards."""
    from_batch: int


@dataclass(frozen=True, slots=True)
class Commit:
    entry: CommitEntry


@dataclass(frozen=True, slots=True)
class Report:
    """Worker to harness: end-of-run state in multi-process mode."""
    shard: int
    row: int
    j: int
    blob: bytes  # encoded objects
    outcomes: tuple = ()  # (index, aborted, exec_time_us)


@dataclass(frozen=True, slots=True)
class Hello:
    node: tuple
    received: int = 0
    session: int = 0  # random per process start; a new value means the peer restarted


@dataclass(frozen=True, slots=True)
class Ack:
    received: int


@dataclass(frozen=True, slots=True)
class Stop:
    pass


@dataclass(frozen=True, order=True, slots=True)
class NodeId:
    kind: str  # "E" execution worker, "S" sequencer, "P" primary/harness
    shard: int = 0
    row: int = 0

    def __str__(self):
        if self.kind == "E":
            return f"E{self.shard}.{self.row}"
        return f"{self.kind}{self.shard}"

    @staticmethod
    def parse(s: str) -> "NodeId":
        kind, rest = s[0], s[1:]
        if kind == "E":
            a, _, b = rest.partition(".")
            return NodeId("E", int(a), int(b or 0))
        return NodeId(kind, int(rest or 0))


PRIMARY = NodeId("P", 0)
