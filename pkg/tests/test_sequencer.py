import pytest

from helpers import cfg, five_tx_workload
from shardex import model as m
from shardex.model import NodeId, shard_of
from shardex.sequencer import MissingBatch, SequencingWorker
from shardex.store import MemStorage
from shardex.workload import package


class Capture:
    def __init__(self):
        self.sent = []

    def send(self, src, dst, msg):
        self.sent.append((dst, msg))


def _seq(n_shards=2, n_e=1, storage=None, bs=2):
    c = cfg(n_shards=n_shards, n_e=n_e, f_e=(n_e - 1) // 2)
    _, wl = five_tx_workload(n_shards, {"o1": 0, "o2": 1, "o3": 1, "o4": 0}, batch_size=bs)
    env = Capture()
    s = SequencingWorker(0, c, env, storage)
    return s, wl, env, c


def test_one_proposal_per_shard_per_batch():
    s, wl, env, c = _seq()
    for b in wl.batches:
        s.ingest_batch(b)
    props = s.process_sequenced_batch(wl.commits[0])
    assert [p[0] for p in props] == [0, 1]
    for shard, p in props:
        assert p.batch_idx == 0 and p.batch_id == wl.commits[0].batch_id
        for tx in p.txs:
            assert any(shard_of(o, c.n_shards) == shard for o in tx.read_set | tx.write_set)
    # every tx lands on each shard it touches, in batch order
    for tx in wl.batches[0].txs:
        shards = {shard_of(o, 2) for o in tx.read_set | tx.write_set}
        assert shards == {sh for sh, p in props if tx in p.txs}


def test_commits_dispatched_in_order_to_every_replica():
    s, wl, env, c = _seq(n_e=3)
    for b in wl.batches:
        s.ingest_batch(b)
    for e in reversed(wl.commits):
        s.on_commit(e)
    got = [(str(d), msg.batch_idx) for d, msg in env.sent]
    assert len(got) == len(wl.commits) * 2 * 3
    assert [b for _, b in got] == sorted(b for _, b in got)
    assert {d for d, _ in got} == {f"E{sh}.{r}" for sh in range(2) for r in range(3)}


def test_missing_batch_blocks_until_it_arrives():
    s, wl, env, _ = _seq()
    s.ingest_batch(wl.batches[1])
    for e in wl.commits:
        s.on_commit(e)
    assert env.sent == [] and s.blocked_on == 0
    with pytest.raises(MissingBatch):
        s.process_sequenced_batch(wl.commits[0])
    s.ingest_batch(wl.batches[0])
    s.pump()
    assert {msg.batch_idx for _, msg in env.sent} == {0, 1}
    assert s.blocked_on == 2  # batch 2 is still missing


def test_batch_for_other_sequencer_is_ignored():
    c = cfg(n_sequencers=2)
    _, wl = five_tx_workload(1, batch_size=1)
    wl2 = package(wl.genesis, wl.txs, 1, 2)
    s0 = SequencingWorker(0, c, Capture())
    verdicts = [s0.ingest_batch(b) for b in wl2.batches]
    assert verdicts == ["stored", "ignored", "stored", "ignored", "stored"]


def test_replay_resends_from_requested_batch():
    s, wl, env, _ = _seq()
    for b in wl.batches:
        s.ingest_batch(b)
    for e in wl.commits:
        s.on_commit(e)
    env.sent.clear()
    dst = NodeId("E", 1, 0)
    s.handle(dst, m.ProposeRequest(1))
    assert [msg.batch_idx for _, msg in env.sent] == list(range(1, len(wl.commits)))
    assert all(d == dst for d, _ in env.sent)
    assert all(msg.txs == () or all(any(shard_of(o, 2) == 1 for o in t.read_set | t.write_set)
                                    for t in msg.txs) for _, msg in env.sent)


def test_restart_restores_batches_commits_and_cursor():
    disk = MemStorage()
    s, wl, env, c = _seq(storage=disk)
    for b in wl.batches:
        s.ingest_batch(b)
    for e in wl.commits[:2]:
        s.on_commit(e)
    again = SequencingWorker(0, c, Capture(), disk)
    assert again.hwm == 1 and again.cursor == 2
    assert set(again.batches) == {b.batch_id for b in wl.batches}
    again.on_commit(wl.commits[2])
    assert [msg.batch_idx for _, msg in again.env.sent] == [2, 2]
