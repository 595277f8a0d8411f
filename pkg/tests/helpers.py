"""Shared builders for the test suite."""
from __future__ import annotations

from shardex.config import RunConfig
from shardex.model import Counter, IncrementCounter, Object, make_tx, oid_from_label, shard_of
from shardex.workload import package


def oid_on(shard: int, n_shards: int, label: str) -> bytes:
    """First labelled oid (label, label#1, ...) that lands on `shard`."""
    k = 0
    while True:
        o = oid_from_label(label if k == 0 else f"{label}#{k}")
        if shard_of(o, n_shards) == shard:
            return o
        k += 1


def five_tx(n_shards: int = 1, place=None):
    """The five-transaction queue example.

    Tx1 W o1 | Tx2 W o1,o3 | Tx3 R o1,o2 W o4 | Tx4 R o2,o3 W o4 | Tx5 R o1 W o2,o3.
    Writes of o4 (Tx3, Tx4) and of o2 (Tx5) are write-only; the others read first.
    `place` maps object name -> shard.
    """
    place = place or {}
    o = {k: oid_on(place.get(k, 0), n_shards, k) for k in ("o1", "o2", "o3", "o4")}
    inc = IncrementCounter()
    txs = [
        make_tx(1, inc, write=[o["o1"]]),
        make_tx(2, inc, write=[o["o1"], o["o3"]]),
        make_tx(3, inc, read=[o["o1"], o["o2"]], write=[o["o4"]], blind=[o["o4"]]),
        make_tx(4, inc, read=[o["o2"], o["o3"]], write=[o["o4"]], blind=[o["o4"]]),
        make_tx(5, inc, read=[o["o1"]], write=[o["o2"], o["o3"]], blind=[o["o2"]]),
    ]
    genesis = [Object(v, 0, None, Counter(0)) for v in o.values()]
    return o, txs, genesis


def five_tx_workload(n_shards: int, place=None, batch_size: int = 5):
    o, txs, genesis = five_tx(n_shards, place)
    return o, package(genesis, txs, batch_size, 1)


def cfg(**kw) -> RunConfig:
    return RunConfig(**kw).validate()
