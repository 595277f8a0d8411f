"""SequencingWorker: stores batches and turns the committed sequence into per-shard proposals."""
from __future__ import annotations

from . import codec
from . import model as m
from .model import NodeId, sequencer_of, shard_of


class MissingBatch(Exception):
    pass


class SequencingWorker:
    def __init__(self, index: int, cfg, env=None, storage=None):
        self.index = index
        self.id = NodeId("S", index)
        self.cfg = cfg
        self.env = env
        self.storage = storage
        self.batches: dict = {}
        self.commits: dict = {}  # batch_idx -> batch_id
        self.cursor = 0  # next commit entry to look at
        self.hwm = -1  # last dispatched batch_idx
        self._sent: dict = {}  # batch_idx -> per-shard proposals (for replay)
        self.blocked_on = None
        if storage is not None:
            self._restore()

    # ---- persistence ----

    def _restore(self) -> None:
        raw = self.storage.read(f"batches-{self.index}")
        if raw:
            for b in codec.decode_seq(raw):
                self.batches[b.batch_id] = b
        raw = self.storage.read(f"commits-{self.index}")
        if raw:
            for e in codec.decode_seq(raw):
                self.commits[e.batch_idx] = e.batch_id
        raw = self.storage.read(f"hwm-{self.index}")
        if raw:
            self.hwm = int(raw)
            self.cursor = self.hwm + 1

    def ingest_batch(self, batch: m.Batch) -> str:
        if sequencer_of(batch.batch_id, self.cfg.n_sequencers) != self.index:
            return "ignored"
        if batch.batch_id not in self.batches:
            self.batches[batch.batch_id] = batch
            if self.storage is not None:
                self.storage.append(f"batches-{self.index}", codec.encode_seq([batch]))
        return "stored"

    # ---- Alg. 1 ----

    def process_sequenced_batch(self, entry: m.CommitEntry) -> list:
        if sequencer_of(entry.batch_id, self.cfg.n_sequencers) != self.index:
            return []
        batch = self.batches.get(entry.batch_id)
        if batch is None:
            raise MissingBatch(f"batch {entry.batch_id.hex()[:12]} at index {entry.batch_idx}")
        S = self.cfg.n_shards
        per = [[] for _ in range(S)]
        for tx in batch.txs:
            shards = {shard_of(o, S) for o in tx.read_set | tx.write_set}
            for s in sorted(shards):
                per[s].append(tx)
        return [(s, m.ProposeMessage(entry.batch_idx, entry.batch_id, tuple(per[s]))) for s in range(S)]

    def handle(self, src, msg) -> None:
        if type(msg) is m.Commit:
            self.on_commit(msg.entry)
        elif type(msg) is m.ProposeRequest:
            self.replay(src, msg.from_batch)
        elif type(msg) is m.Batch:
            self.ingest_batch(msg)

    def on_commit(self, entry: m.CommitEntry) -> None:
        if entry.batch_idx not in self.commits:
            self.commits[entry.batch_idx] = entry.batch_id
            if self.storage is not None:
                self.storage.append(f"commits-{self.index}", codec.encode_seq([entry]))
        self.pump()

    def pump(self) -> list:
        """Dispatch every committed entry we can, in order; returns what was sent."""
        out = []
        while self.cursor in self.commits:
            b = self.cursor
            entry = m.CommitEntry(b, self.commits[b])
            try:
                props = self.process_sequenced_batch(entry)
            except MissingBatch:
                self.blocked_on = b
                break
            self.blocked_on = None
            if props:
                self._sent[b] = props
                for s, p in props:
                    for r in range(self.cfg.n_e):
                        self._send(NodeId("E", s, r), p)
                out.extend(props)
                self.hwm = b
                if self.storage is not None:
                    self.storage.write(f"hwm-{self.index}", str(b).encode())
            self.cursor = b + 1
        return out

    def replay(self, dst: NodeId, from_batch: int) -> int:
        n = 0
        for b in range(from_batch, self.cursor):
            props = self._sent.get(b)
            if props is None:
                bid = self.commits.get(b)
                if bid is None or sequencer_of(bid, self.cfg.n_sequencers) != self.index:
                    continue
                props = self._sent[b] = self.process_sequenced_batch(m.CommitEntry(b, bid))
            self._send(dst, props[dst.shard][1])
            n += 1
        return n

    def _send(self, dst, msg) -> None:
        if self.env is not None:
            self.env.send(self.id, dst, msg)
