"""ExecutionWorker: scheduling, execution and result application for one shard replica.

The worker is a message-driven state machine. A transport calls ``handle(src, msg)``
and ``on_timer(token)``; the worker talks back through its ``env``:

    env.send(src, dst, msg)      reliable per-channel FIFO
    env.now()                    current time (seconds)
    env.timer(node, delay, tok)  schedule on_timer(tok)
    env.charge(node, seconds)    service time accounting (simulator only)
    env.event(kind, node, **kw)  trace / metrics hook

Messages addressed to the worker's own shard never leave the process; they go
through a local queue drained at the end of each handler.
"""
from __future__ import annotations

import heapq
from collections import deque

from . import model as m
from . import vm
from .model import NodeId, executor_of, shard_of
from .replication import ReplicaMixin
from .scheduler import DuplicatePropose, Mode, Scheduler
from .store import VersionedStore

INF = float("inf")

PROTOCOL = (m.ProposeMessage, m.ReadyMessage, m.ResultMessage, m.UpdateProposeExec)


class ExecutionWorker(ReplicaMixin):
    def __init__(self, node: NodeId, cfg, env, storage=None, genesis=(), n_tx: int = 0):
        self.id = node
        self.shard = node.shard
        self.row = node.row
        self.cfg = cfg
        self.env = env
        self.S = cfg.n_shards
        self.mode = Mode(cfg.mode)
        self.genesis = [o for o in genesis if shard_of(o.oid, self.S) == self.shard]
        self.n_tx = n_tx
        self.slow = cfg.slow_rows.get(self.row, 1.0)
        self._row_dst = [NodeId("E", s, self.row) for s in range(self.S)]
        self._shard_cache: dict = {}
        self.applied_log = None  # optional list of applied indices (safety checks)
        self.init_replica(storage)
        self._reset(self.genesis, 0, 0)
        self._dispatch = {
            m.ProposeMessage: self.process_propose,
            m.ReadyMessage: self.process_ready,
            m.ResultMessage: self.process_result,
            m.UpdateProposeExec: self.process_update,
            m.CheckpointedMessage: self.process_checkpointed,
            m.Recover: self.process_recover,
            m.RecoverOk: self._feed_msg,
            m.NewReader: self.process_new_reader,
            m.NewReaderOk: self._feed_msg,
            m.Abort: self._feed_msg,
            m.NotifySync: self.process_notify_sync,
            m.Sync: self.process_sync,
            m.SyncReply: self._feed_msg,
            m.SyncComplete: self.process_sync_complete,
        }

    # ---- state ----

    def _reset(self, objects, j: int, next_batch: int) -> None:
        self.generation = getattr(self, "generation", 0) + 1  # stale pool outcomes are dropped
        pooled = self.cfg.exec_lanes > 1 and getattr(self.env, "pooled_vm", False)
        self.lanes = [0.0] * self.cfg.exec_lanes if pooled else None
        self.inflight: dict = {}  # idx -> ReadyMessages that arrived during a pooled run
        self.store = VersionedStore(objects, at=j)
        self.sched = Scheduler(self.mode)
        self.j = j
        self.E: set = set()
        self.i = next_batch  # next batch index to load
        self.pbuf: dict = {}
        self.marks: deque = deque()  # (batch_idx, max tx index) of non-empty loaded batches
        self.txs: dict = {}  # idx -> current Transaction
        self.hoids: dict = {}  # idx -> handled oids (sorted)
        self.triggered: set = set()
        self.released: dict = {}  # idx -> oids whose read lock was dropped early
        self.missing: dict = {}  # oid -> [idx]
        self.missing_of: dict = {}  # idx -> oids
        self.missing_wait: list = []  # heap of idx waiting for the watermark
        self.wm_wait: set = set()  # idx held back until j >= idx - 1
        self.paused: set = set()
        self.early_results: dict = {}
        self.stash_aug: dict = {}
        self.ready_buf: dict = {}
        self.exec_view: dict = {}
        self.executed_here: set = set()
        self._local: deque = deque()
        self._gc_tick = 0

    def handled(self, tx) -> list:
        S, s = self.S, self.shard
        c = self._shard_cache
        out = []
        for o in tx.read_set | tx.write_set:
            sh = c.get(o)
            if sh is None:
                sh = c[o] = shard_of(o, S)
            if sh == s:
                out.append(o)
        out.sort()
        return out

    # ---- entry points ----

    def on_boot(self, reboot: bool = False) -> None:
        self.boot(reboot)
        self._drain()

    def handle(self, src, msg) -> None:
        self.env.charge(self.id, self.cfg.cost_msg * self.slow)
        if self.hold_protocol and isinstance(msg, PROTOCOL):
            self.held.append((src, msg))
            return
        self._dispatch[type(msg)](src, msg)
        self._drain()

    def _drain(self) -> None:
        loc = self._local
        while loc:
            msg = loc.popleft()
            if self.hold_protocol and isinstance(msg, PROTOCOL):
                self.held.append((self.id, msg))
                continue
            self._dispatch[type(msg)](self.id, msg)

    # ---- sending ----

    def _send_shard(self, s: int, msg, idx: int) -> None:
        if s == self.shard:
            self._local.append(msg)
            return
        dst = self._row_dst[s]
        send = self.env.send
        send(self.id, dst, msg)
        extra = self.read_to_shard.get(s)
        if extra:
            for y in sorted(extra):
                if y != dst:
                    send(self.id, y, msg)
        if self.buffering:
            self.outbuf.setdefault(idx, []).append((s, msg))

    def _send_node(self, dst, msg) -> None:
        if dst == self.id:
            self._local.append(msg)
        else:
            self.env.send(self.id, dst, msg)

    # ---- step 3: proposals and triggering ----

    def process_propose(self, src, msg: m.ProposeMessage) -> list:
        b = msg.batch_idx
        if b < self.i:
            return []
        prev = self.pbuf.get(b)
        if prev is not None:
            if prev != msg:
                raise DuplicatePropose(f"batch {b} received twice with different content")
            return []
        self.pbuf[b] = msg
        ready = []
        while self.i in self.pbuf:
            p = self.pbuf.pop(self.i)
            self.i += 1
            if p.txs:
                self.marks.append((p.batch_idx, max(t.index for t in p.txs)))
            for tx in p.txs:
                ready.extend(self._schedule(tx))
        return ready

    def _schedule(self, tx) -> list:
        idx = tx.index
        if idx <= self.j or idx in self.E or idx in self.txs:
            return []
        aug = self.stash_aug.pop(idx, None)
        if aug is not None and aug.write_set > tx.write_set:
            tx = aug
        oids = self.handled(tx)
        if not oids:
            return []
        self.txs[idx] = tx
        self.hoids[idx] = oids
        self.sched.enqueue(tx, _queued(tx, oids))
        return self._kick([idx])

    def _kick(self, idxs) -> list:
        """Try to trigger each index, following the chain of unblocked heads."""
        fired = []
        stack = list(idxs)
        stack.reverse()
        while stack:
            idx = stack.pop()
            r = self.try_trigger_execution(idx)
            if r is not None:
                fired.append(r.tx)
                if r.unblocked:
                    stack.extend(reversed(r.unblocked))
        return fired

    def missing_objects(self, idx: int) -> list:
        if self.j >= idx - 1:
            return []
        tx = self.txs[idx]
        get = self.store.get
        return [o for o in self.hoids[idx] if o not in tx.blind and get(o, idx) is None]

    def try_trigger_execution(self, idx: int):
        if idx in self.triggered:
            return None
        tx = self.txs.get(idx)
        if tx is None:
            return None
        oids = self.hoids[idx]
        if self.sched.has_dependencies(idx, _queued(tx, oids), self.released.get(idx, ())):
            return None
        if tx.discovered and self.j < idx - 1 and any(o in tx.discovered for o in oids):
            # discovered children are ordered by the watermark, not by queues
            if idx not in self.wm_wait:
                self.wm_wait.add(idx)
                heapq.heappush(self.missing_wait, idx)
            return None
        miss = self.missing_objects(idx)
        if miss:
            self._add_missing(idx, miss)
            return None
        if idx > self.exec_limit:
            if idx not in self.paused:
                self.paused.add(idx)
                self.env.event("paused", self.id, idx=idx)
            return None
        self._clear_missing(idx)
        self.wm_wait.discard(idx)
        get = self.store.get
        objs = tuple((o, get(o, idx)) for o in oids)
        self.triggered.add(idx)
        self.env.event("ready", self.id, idx=idx)
        self._send_shard(executor_of(tx, self.S), m.ReadyMessage(tx, objs), idx)
        unblocked = ()
        if self.mode is Mode.BASE:
            reads = [o for o in oids if o in tx.read_set and o not in self.released.get(idx, ())]
            if reads:
                self.released.setdefault(idx, set()).update(reads)
                unblocked = self.sched.release_reads(tx, reads)
        early = self.early_results.pop(idx, None)
        if early is not None:
            self._local.append(early)
        return _Fired(tx, unblocked)

    def _add_missing(self, idx, miss) -> None:
        have = self.missing_of.get(idx)
        if have is None:
            have = self.missing_of[idx] = set()
            heapq.heappush(self.missing_wait, idx)
        for o in miss:
            if o not in have:
                have.add(o)
                self.missing.setdefault(o, []).append(idx)

    def _clear_missing(self, idx) -> None:
        for o in self.missing_of.pop(idx, ()):
            lst = self.missing.get(o)
            if lst is not None:
                if idx in lst:
                    lst.remove(idx)
                if not lst:
                    del self.missing[o]

    # ---- step 4: execution ----

    def process_ready(self, src, msg: m.ReadyMessage):
        tx = msg.tx
        idx = tx.index
        if idx <= self.j or idx in self.E:
            return None
        late = self.inflight.get(idx)
        if late is not None:
            late.append((src, msg))  # needed again if the pooled run surfaces a child
            return None
        if idx in self.executed_here:
            return None
        if tx.discovered:
            self._learn_aug(src, tx)
        cur = self.exec_view.get(idx)
        if cur is None or tx.write_set > cur.write_set:
            self.exec_view[idx] = cur = tx
        buf = self.ready_buf.get(idx)
        if buf is None:
            buf = self.ready_buf[idx] = {}
        # snapshots are as of idx, so objects from any augmentation step are valid
        for oid, obj in msg.objects:
            buf[oid] = obj
        need = cur.read_set | cur.write_set
        if len(buf) < len(need) or any(o not in buf for o in need):
            return None
        del self.ready_buf[idx]
        del self.exec_view[idx]
        self.executed_here.add(idx)
        return self._execute(cur, {o: buf[o] for o in need})

    def _execute(self, tx, buf):
        aborted = any(buf[o] is None for o in tx.read_set) or \
            any(buf[o] is None for o in tx.write_set if o not in tx.blind)
        res = None
        if not aborted:
            cost = self.cfg.cost_exec
            if isinstance(tx.entry, m.MergeAndFib):
                cost += tx.entry.n * self.cfg.cost_fib_iter
            cost *= self.slow
            try:
                res = vm.execute(tx, buf)
            except vm.VMError:
                aborted = True
            if self.lanes:
                # pooled: the VM runs on the first free lane, its outcome re-enters the queue
                now = self.env.now()
                k = min(range(len(self.lanes)), key=self.lanes.__getitem__)
                end = max(now, self.lanes[k]) + cost
                self.lanes[k] = end
                self.inflight[tx.index] = []
                self.env.timer(self.id, end - now, ("vm", self.generation, tx, buf, res, aborted))
                return None
            self.env.charge(self.id, cost)
        return self._finish(tx, buf, res, aborted)

    def _finish(self, tx, buf, res, aborted):
        idx = tx.index
        late = self.inflight.pop(idx, ())
        if isinstance(res, vm.ChildDiscovered):
            out = self._reschedule(tx, res.oid, buf)
            for src, msg in late:
                self.process_ready(src, msg)
            return out
        self.env.event("exec", self.id, idx=idx, aborted=aborted)
        S = self.S
        if aborted:
            out = m.ResultMessage(tx, (), (), True)
            for s in range(S):
                self._send_shard(s, out, idx)
            return out
        mut = [[] for _ in range(S)]
        dele = [[] for _ in range(S)]
        for o in res.mutated:
            mut[shard_of(o.oid, S)].append(o)
        for oid in res.deleted:
            dele[shard_of(oid, S)].append(oid)
        for s in range(S):
            self._send_shard(s, m.ResultMessage(tx, tuple(mut[s]), tuple(dele[s]), False), idx)
        return res

    def _reschedule(self, tx, child, buf=()):
        """A child object surfaced during execution: widen the tx and re-gather inputs."""
        idx = tx.index
        aug = tx.augmented(child)
        self.executed_here.discard(idx)
        self.exec_view[idx] = aug
        self.ready_buf[idx] = dict(buf)
        self.env.event("augment", self.id, idx=idx)
        upd = m.UpdateProposeExec(aug)
        for s in sorted({shard_of(o, self.S) for o in aug.read_set | aug.write_set}):
            self._send_shard(s, upd, idx)
        return upd

    def process_update(self, src, msg: m.UpdateProposeExec) -> None:
        aug = msg.aug_tx
        idx = aug.index
        if idx <= self.j or idx in self.E:
            return
        cur = self.txs.get(idx)
        if cur is not None:
            if not aug.write_set > cur.write_set:
                return
            old = set(self.hoids[idx])
            oids = self.handled(aug)
            new = [o for o in oids if o not in old]
            self.txs[idx] = aug
            self.hoids[idx] = oids
            self.sched.enqueue(aug, _queued(aug, new))
            self.triggered.discard(idx)
            self._kick([idx])
            return
        declared = (aug.read_set | aug.write_set) - aug.discovered
        if any(shard_of(o, self.S) == self.shard for o in declared):
            # our proposal for this tx has not been processed yet
            prev = self.stash_aug.get(idx)
            if prev is None or aug.write_set > prev.write_set:
                self.stash_aug[idx] = aug
            return
        self._schedule(aug)

    def _learn_aug(self, src, tx) -> None:
        # any message carrying a widened tx doubles as its update notice
        cur = self.txs.get(tx.index)
        if cur is None or tx.write_set > cur.write_set:
            if cur is not None or self.handled(tx):
                self.process_update(src, m.UpdateProposeExec(tx))

    # ---- step 5: results ----

    def process_result(self, src, msg: m.ResultMessage) -> None:
        tx = msg.tx
        idx = tx.index
        if idx <= self.j or idx in self.E:
            return
        oids = self.handled(tx)
        if oids:
            cur = self.txs.get(idx)
            if cur is None or cur.write_set != tx.write_set:
                if tx.discovered:
                    self._learn_aug(src, tx)
                    cur = self.txs.get(idx)
            if cur is None or cur.write_set != tx.write_set or idx not in self.triggered:
                self.early_results[idx] = msg
                return
        put = self.store.put
        for o in msg.mutated:
            put(o.oid, idx, o)
        for oid in msg.deleted:
            put(oid, idx, None)
        # writes land before the watermark moves: checkpoints and retries read them
        self._advance_watermark(idx)
        if self.applied_log is not None and oids:
            self.applied_log.append(idx)
        again = []
        if self.missing:
            for o in msg.mutated:
                lst = self.missing.pop(o.oid, None)
                if lst:
                    again.extend(lst)
        if oids:
            wrote = {o.oid for o in msg.mutated}.union(msg.deleted)
            again.extend(self.sched.complete(tx, _queued(tx, oids), self.released.pop(idx, ()), wrote))
            self.wm_wait.discard(idx)
            del self.txs[idx]
            del self.hoids[idx]
            self.triggered.discard(idx)
            self.paused.discard(idx)
        self.env.event("applied", self.id, idx=idx)
        if again:
            self._kick(again)

    def _advance_watermark(self, idx: int) -> None:
        E = self.E
        E.add(idx)
        j = self.j
        if idx != j + 1:
            return
        while j + 1 in E:
            j += 1
            E.discard(j)
        self.j = j
        self._on_watermark()

    def try_advance_exec_watermark(self, idx: int) -> int:
        self._advance_watermark(idx)
        return self.j

    def _on_watermark(self) -> None:
        j = self.j
        mw = self.missing_wait
        if mw and mw[0] - 1 <= j:
            due = []
            while mw and mw[0] - 1 <= j:
                due.append(heapq.heappop(mw))
            due = [d for d in due if d in self.missing_of or d in self.wm_wait]
            if due:
                self._kick(due)
        self.on_watermark_replica()
        self._gc_tick += 1
        if self._gc_tick >= 64:
            self._gc_tick = 0
            self.store.gc(self.gc_floor())
            self.sched.versions.gc(j)
            if self.executed_here:
                self.executed_here = {k for k in self.executed_here if k > j}
            if self.exec_view:
                for k in [k for k in self.exec_view if k <= j]:
                    self.exec_view.pop(k, None)
                    self.ready_buf.pop(k, None)
        if self.n_tx and j >= self.n_tx:
            self.env.event("done", self.id, j=j)

    # ---- introspection ----

    def objects(self) -> list:
        return self.store.current()

    def queue_dump(self, names=None) -> str:
        return self.sched.dump(names)


def _queued(tx, oids) -> list:
    if not tx.discovered:
        return oids
    return [o for o in oids if o not in tx.discovered]


class _Fired:
    __slots__ = ("tx", "unblocked")

    def __init__(self, tx, unblocked):
        self.tx = tx
        self.unblocked = unblocked
