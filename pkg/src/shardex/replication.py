"""Checkpointing, quorum stability and crash recovery for the replica grid.

Workers form an ``n_e x n_shards`` grid. A row (cluster) holds one replica of
every shard and exchanges reads internally. After a crash, survivors either
re-route reads to a replica of the lost shard in another row (``NewReader``),
or, when too far behind, reload a stable checkpoint together with their whole
row (``Synchronize``).

Recovery procedures are written as generators. They yield ``Wait`` objects
whose predicate is offered every recovery reply and every failure-detector
change; the predicate returns ``None`` to keep waiting.
"""
from __future__ import annotations

from collections import deque

from . import model as m
from .codec import CodecError, Reader, Writer, r_objects, w_objects
from .model import NodeId

MAGIC = b"CKP1"
MAX_SYNC_ROUNDS = 64
MAX_RECOVER_ATTEMPTS = 64


class DigestMismatch(ValueError):
    pass


class RetryRecovery(Exception):
    pass


# ---- checkpoint blobs ----

def encode_checkpoint(shard: int, boundary: int, resume_batch: int, objects) -> bytes:
    w = Writer()
    w.parts.append(MAGIC)
    w.u32(shard)
    w.u64(boundary)
    w.u64(resume_batch)
    w_objects(w, sorted(objects, key=lambda o: o.oid))
    body = w.getvalue()
    return body + m.h256(b"ckpt", body)


def decode_checkpoint(blob: bytes):
    """-> (shard, boundary, resume_batch, objects); raises DigestMismatch on corruption."""
    if len(blob) < 32 + len(MAGIC) or blob[:4] != MAGIC:
        raise DigestMismatch("not a checkpoint")
    body, tail = blob[:-32], blob[-32:]
    if m.h256(b"ckpt", body) != tail:
        raise DigestMismatch("checkpoint digest mismatch")
    r = Reader(body)
    r._take(4)
    try:
        shard, boundary, resume = r.u32(), r.u64(), r.u64()
        objs = r_objects(r)
        r.done()
    except CodecError as e:
        raise DigestMismatch(str(e)) from e
    return shard, boundary, resume, objs


def checkpoint_name(shard: int, boundary: int) -> str:
    return f"ckpt-s{shard:03d}-b{boundary:012d}"


def disaster_import(blob: bytes):
    """Validate an externally supplied checkpoint before booting a fresh replica from it."""
    return decode_checkpoint(blob)


class Wait:
    __slots__ = ("pred",)

    def __init__(self, pred):
        self.pred = pred


class ReplicaMixin:
    """Replication state and handlers; mixed into ExecutionWorker."""

    def init_replica(self, storage) -> None:
        cfg = self.cfg
        self.storage = storage
        self.ckpt_on = cfg.checkpointing and storage is not None
        self.buffering = cfg.n_e > 1
        self.outbuf: dict = {}  # tx index -> [(dst shard, msg)]
        self.read_to: set = set()
        self.read_to_shard: dict = {}
        self.read_from: set = set()
        self.peers = [NodeId("E", s, self.row) for s in range(cfg.n_shards) if s != self.shard]
        self.suspected: set = set()
        self.stable = 0
        self.exec_limit = cfg.c * cfg.K if self.ckpt_on else float("inf")
        self.ckpts: dict = {}  # boundary -> complete?
        self.next_ckpt = cfg.K
        self.counts: dict = {}
        self.hold_protocol = False
        self.held: list = []
        self.procs: list = []
        self.recover_queue: deque = deque()
        self.recovering = False
        self.syncing = False
        self.sync_T = -1
        self.sync_seen: dict = {}
        self.sync_waiters: set = set()  # peers that finished a sync while we were syncing
        self.sync_rounds = 0
        self.incarnation = 0
        self._reqn = 0

    # ---- boot ----

    def boot(self, reboot: bool = False) -> None:
        if self.storage is not None:
            raw = self.storage.read("boots")
            self.incarnation = (int(raw) if raw else 0) + 1
            self.storage.write("boots", str(self.incarnation).encode())
        if not reboot:
            if self.ckpt_on:
                self._persist(0, encode_checkpoint(self.shard, 0, 0, self.genesis), instant=True)
            return
        best = None
        for name in self.storage.list(f"ckpt-s{self.shard:03d}-"):
            blob = self.storage.read(name)
            try:
                dec = decode_checkpoint(blob)
            except DigestMismatch:
                self.storage.delete(name)  # partial write from a crash
                self.env.event("ckpt_discarded", self.id, name=name)
                continue
            if best is None or dec[1] > best[1]:
                best = dec
        if best is None:
            best = (self.shard, 0, 0, tuple(self.genesis))
        _, B, resume, objs = best
        self._reset(objs, B, resume)
        self.stable = B
        self.ckpts = {}
        for name in self.storage.list(f"ckpt-s{self.shard:03d}-"):
            b = int(name.rsplit("-b", 1)[1])
            if b < B:
                self.storage.delete(name)
            else:
                self.ckpts[b] = True
        if B not in self.ckpts:
            self._persist(B, encode_checkpoint(self.shard, B, resume, objs), instant=True)
        self.next_ckpt = (B // self.cfg.K + 1) * self.cfg.K if self.cfg.K else 0
        self.exec_limit = B + self.cfg.c * self.cfg.K
        self.env.event("reboot", self.id, boundary=B)
        self._request_proposals()
        for p in self.peers:
            self.request_recover(p)
        if not self.peers:
            self._start(self._catch_up())

    def _request_proposals(self) -> None:
        for s in range(self.cfg.n_sequencers):
            self.env.send(self.id, NodeId("S", s), m.ProposeRequest(self.i))

    # ---- checkpoints (Alg. 6) ----

    def gc_floor(self) -> int:
        if self.ckpt_on:
            return min(self.j, self.next_ckpt)
        return self.j

    def on_watermark_replica(self) -> None:
        if self.ckpt_on and self.next_ckpt <= self.j:
            self._take_due()

    def _take_due(self) -> None:
        c = self.cfg.c
        while self.next_ckpt <= self.j:
            if len(self.ckpts) >= c:
                self.env.event("blocked", self.id, boundary=self.next_ckpt)
                return
            B = self.next_ckpt
            self.next_ckpt += self.cfg.K
            self.maybe_checkpoint(B)

    def resume_batch(self, B: int) -> int:
        for b, mx in self.marks:
            if mx > B:
                return b
        return self.i

    def maybe_checkpoint(self, B: int):
        if len(self.ckpts) >= self.cfg.c:
            return "blocked"
        blob = encode_checkpoint(self.shard, B, self.resume_batch(B), self.store.snapshot(B))
        self._persist(B, blob)
        return blob

    def _persist(self, B: int, blob: bytes, instant: bool = False) -> None:
        name = checkpoint_name(self.shard, B)
        delay = self.cfg.ckpt_write_time
        if instant or delay <= 0 or not hasattr(self.env, "timer"):
            self.storage.write(name, blob)
            self.ckpts[B] = True
            if B > 0 and not instant:
                self._announce(B)
            return
        # torn write until the timer fires; a crash in between leaves a partial file
        self.storage.write(name, blob[: len(blob) // 2])
        self.ckpts[B] = False
        self.env.event("ckpt_start", self.id, boundary=B)
        self.env.timer(self.id, delay, ("ckpt", B, self.incarnation, blob))

    def on_timer(self, token) -> None:
        if token[0] == "vm":
            _, gen, tx, buf, res, aborted = token
            if gen == self.generation:
                self._finish(tx, buf, res, aborted)
                self._drain()
            return
        if token[0] == "wake":
            self._feed(("timer", token))
            self._drain()
            return
        if token[0] == "ckpt":
            _, B, inc, blob = token
            if inc != self.incarnation or B not in self.ckpts:
                return
            self.storage.write(checkpoint_name(self.shard, B), blob)
            self.ckpts[B] = True
            self._announce(B)
            self._drain()

    def _announce(self, B: int) -> None:
        self.env.event("checkpoint", self.id, boundary=B)
        msg = m.CheckpointedMessage(self.shard, B)
        for r in range(self.cfg.n_e):
            for s in range(self.cfg.n_shards):
                self._send_node(NodeId("E", s, r), msg)

    def process_checkpointed(self, src, msg: m.CheckpointedMessage) -> bool:
        T = msg.txidx
        if T <= self.stable:
            return False
        per = self.counts.setdefault(T, {})
        per.setdefault(msg.shard, set()).add(src)
        q = self.cfg.f_e + 1
        if len(per) == self.cfg.n_shards and all(len(v) >= q for v in per.values()):
            self._set_stable(T)
            return True
        return False

    def _set_stable(self, T: int) -> None:
        if T <= self.stable:
            return
        self.stable = T
        self.env.event("stable", self.id, boundary=T)
        for B in [b for b in self.ckpts if b < T]:
            del self.ckpts[B]
            if self.storage is not None:
                self.storage.delete(checkpoint_name(self.shard, B))
        if self.outbuf:
            self.outbuf = {k: v for k, v in self.outbuf.items() if k >= T}
        self.counts = {k: v for k, v in self.counts.items() if k > T}
        while self.marks and self.marks[0][1] <= T:
            self.marks.popleft()
        if self.next_ckpt < T:
            self.next_ckpt = T  # older boundaries would be garbage on arrival
        if self.ckpt_on:
            self.exec_limit = T + self.cfg.c * self.cfg.K
            self._take_due()
            if self.paused:
                again = sorted(self.paused)
                self.paused.clear()
                self._kick(again)

    # ---- recovery handlers (Alg. 8) ----

    def process_recover(self, src, msg: m.Recover) -> None:
        self._send_node(src, m.RecoverOk(msg.req, self.stable))

    def process_new_reader(self, src, msg: m.NewReader) -> None:
        if msg.txidx < self.stable or self.syncing:
            self._send_node(src, m.Abort(msg.req))
            return
        self.read_to.add(src)
        self.read_to_shard.setdefault(src.shard, set()).add(src)
        self._send_node(src, m.NewReaderOk(msg.req, self.stable))
        self._replay_to(src, self.stable - 1)

    def _replay_to(self, dst, after: int) -> None:
        """Re-send buffered output for dst's shard for every tx index above `after`."""
        n = 0
        for idx in sorted(self.outbuf):
            if idx <= after:
                continue
            for s, out in self.outbuf[idx]:
                if s == dst.shard:
                    self.env.send(self.id, dst, out)
                    n += 1
        self.env.event("replay", self.id, to=str(dst), count=n)

    def process_notify_sync(self, src, msg) -> None:
        lost = src in self.read_from
        self._drop_relation(src)
        if src in self.peers and not self.syncing:
            self._start(self._sync_proc())
        elif lost and not self.syncing:
            self.request_recover(src)  # our source is resetting; find another

    def process_sync(self, src, msg: m.Sync) -> None:
        blob = None
        if self.ckpts.get(msg.txidx) and self.storage is not None:
            blob = self.storage.read(checkpoint_name(self.shard, msg.txidx))
        if blob is None:
            self._send_node(src, m.Abort(msg.req))
        else:
            self._send_node(src, m.SyncReply(msg.req, blob))

    def process_sync_complete(self, src, msg: m.SyncComplete) -> None:
        T = msg.txidx
        self.sync_seen[src] = T
        if not msg.echo and not self.syncing and src in self.peers:
            if T <= self.j and (T >= self.stable or not self.buffering):
                # the peer restarted from T; resend what it lost
                self._replay_to(src, T)
                self._send_node(src, m.SyncComplete(T, echo=True))
            else:
                self._start(self._sync_proc())
        elif not msg.echo and self.syncing and src in self.peers:
            self.sync_waiters.add(src)
        self._feed(("msg", src, msg))

    def _feed_msg(self, src, msg) -> None:
        self._feed(("msg", src, msg))

    def _drop_relation(self, x) -> None:
        self.read_from.discard(x)
        if x in self.read_to:
            self.read_to.discard(x)
            self.read_to_shard.get(x.shard, set()).discard(x)

    # ---- failure detector ----

    def on_suspect(self, x) -> None:
        if x in self.suspected:
            return
        self.suspected.add(x)
        was = x in self.read_from or x in self.peers
        self._drop_relation(x)
        if was:
            self.request_recover(x)
        self._feed(("suspect", x))
        self._drain()

    def on_unsuspect(self, x) -> None:
        self.suspected.discard(x)
        self._feed(("unsuspect", x))
        self._drain()

    # ---- coroutine plumbing ----

    def _start(self, gen) -> None:
        proc = [gen, None]
        self.procs.append(proc)
        self._advance(proc, None)

    def _advance(self, proc, value) -> None:
        try:
            w = proc[0].send(value)
            proc[1] = w.pred
        except StopIteration:
            if proc in self.procs:
                self.procs.remove(proc)

    def _feed(self, ev) -> None:
        for proc in list(self.procs):
            pred = proc[1]
            if pred is None or proc not in self.procs:
                continue
            v = pred(ev)
            if v is not None:
                self._advance(proc, v)

    def _req(self) -> int:
        self._reqn += 1
        return (self.incarnation << 32) | self._reqn

    # ---- procedures (Alg. 7, 9) ----

    def request_recover(self, x) -> None:
        if x not in self.recover_queue:
            self.recover_queue.append(x)
        if not self.recovering:
            self.recovering = True
            self._start(self._recover_loop())

    def _recover_loop(self):
        while self.recover_queue:
            x = self.recover_queue.popleft()
            if self.syncing:
                continue
            yield from self._recover(x)
        self.recovering = False

    def _recover(self, x):
        self.env.event("recover", self.id, target=str(x))
        for _ in range(MAX_RECOVER_ATTEMPTS):
            w, T = yield from self._get_status(x.shard)
            if self.syncing:
                return
            if T <= self.j:
                ok = yield from self._new_reader(w, T)
                if ok:
                    if w != self.id:
                        self.read_from.add(w)
                    self.env.event("reconfigured", self.id, source=str(w), boundary=T)
                    return
                yield from self._sleep(self.cfg.suspicion_delay / 2)
                continue  # refused: retry the whole procedure
            for p in self.peers:
                self._send_node(p, m.NotifySync())
            yield from self._sync_proc()
            return
        self.env.event("recover_gave_up", self.id, target=str(x))

    def _catch_up(self):
        """Lone shard after a reboot: no row peers to recover, so ask our own replicas."""
        _, T = yield from self._get_status(self.shard)
        if T > self.j and not self.syncing:
            yield from self._sync_proc()

    def _sleep(self, delay: float):
        tok = ("wake", self._req())
        self.env.timer(self.id, delay, tok)
        yield Wait(lambda ev: True if ev[0] == "timer" and ev[1] == tok else None)

    def _get_status(self, shard: int):
        req = self._req()
        for r in range(self.cfg.n_e):
            self._send_node(NodeId("E", shard, r), m.Recover(req))
        got = []

        def pred(ev):
            if ev[0] == "msg" and type(ev[2]) is m.RecoverOk and ev[2].req == req:
                return (ev[1], ev[2].stable_txid)
            return None

        while len(got) < self.cfg.f_e + 1:
            got.append((yield Wait(pred)))
        best = got[0]
        for g in got[1:]:
            if g[1] > best[1]:
                best = g
        if best[1] > self.stable:
            self._set_stable(best[1])
        return best

    def _new_reader(self, w, T):
        req = self._req()
        self._send_node(w, m.NewReader(req, T))

        def pred(ev):
            if ev[0] == "msg":
                msg = ev[2]
                if type(msg) is m.NewReaderOk and msg.req == req:
                    return True
                if type(msg) is m.Abort and msg.req == req:
                    return False
            elif ev[0] == "suspect" and ev[1] == w:
                return False
            return None

        return (yield Wait(pred))

    def _sync_proc(self):
        if self.syncing:
            return
        self.syncing = True
        self.hold_protocol = True
        self.generation += 1  # pooled runs still out belong to the state we are about to replace
        self.env.event("sync_start", self.id)
        for x in sorted(self.read_to | self.read_from):
            self._send_node(x, m.NotifySync())
        self.read_to.clear()
        self.read_to_shard.clear()
        self.read_from.clear()
        T = None
        target = None
        latest = False
        while True:
            self.sync_rounds += 1
            if self.sync_rounds > MAX_SYNC_ROUNDS:
                self.env.event("sync_gave_up", self.id)
                break
            if target is None:
                _, T = yield from self._get_status(self.shard)
                joined = max([self.sync_seen.get(p, -1) for p in self.peers if p not in self.suspected] + [-1])
                if joined > self.j and not latest:
                    T = joined  # peers already moved there; join them

            else:
                T, target = target, None
            blob = yield from self._fetch(T)
            if not blob:
                latest = True  # T is gone from our shard; the row has to move to the newest
                continue
            self._load(blob)
            self.sync_T = T
            expect = [p for p in self.peers if p not in self.suspected]
            for p in self.peers:
                self._send_node(p, m.SyncComplete(T))

            def settled():
                live = [p for p in expect if p not in self.suspected]
                if any(self.sync_seen.get(p, -1) > T for p in live):
                    return "retry"
                if all(self.sync_seen.get(p) == T for p in live):
                    return "done"
                return None

            state = settled()
            while state is None:
                yield Wait(lambda ev: True if ev[0] in ("msg", "suspect", "unsuspect") else None)
                state = settled()
            if state == "done":
                break
            # a peer loaded a newer checkpoint: converge on it rather than on the latest
            target = max(self.sync_seen.get(p, -1) for p in self.peers if p not in self.suspected)
        self.syncing = False
        self.sync_rounds = 0
        self.env.event("sync_done", self.id, boundary=T)
        waiters, self.sync_waiters = self.sync_waiters, set()
        for p in sorted(waiters):
            t = self.sync_seen.get(p, -1)
            if 0 <= t <= self.j and p not in self.suspected:
                self._replay_to(p, t)
                self._send_node(p, m.SyncComplete(t, echo=True))
        self._release_held()
        for p in self.peers:
            if p in self.suspected:
                self.request_recover(p)

    def _fetch(self, T: int):
        """Get checkpoint T of our shard from any replica holding it; b"" if none does."""
        if self.ckpts.get(T) and self.storage is not None:
            blob = self.storage.read(checkpoint_name(self.shard, T))
            if blob:
                return blob
        req = self._req()
        asked = set()
        for r in range(self.cfg.n_e):
            x = NodeId("E", self.shard, r)
            if x != self.id and x not in self.suspected:
                asked.add(x)
                self._send_node(x, m.Sync(req, T))
        if not asked:
            return b""

        def pred(ev):
            if ev[0] == "msg":
                msg = ev[2]
                if type(msg) is m.SyncReply and msg.req == req:
                    return msg.blob
                if type(msg) is m.Abort and msg.req == req:
                    asked.discard(ev[1])
            elif ev[0] == "suspect":
                asked.discard(ev[1])
            return None if asked else b""

        return (yield Wait(pred))

    def _load(self, blob: bytes) -> None:
        shard, B, resume, objs = decode_checkpoint(blob)
        if shard != self.shard:
            raise DigestMismatch("checkpoint for another shard")
        self._reset(objs, B, resume)
        self.outbuf = {}
        for b in list(self.ckpts):
            if self.storage is not None:
                self.storage.delete(checkpoint_name(self.shard, b))
        self.ckpts = {}
        if self.storage is not None:
            self.storage.write(checkpoint_name(self.shard, B), blob)
            self.ckpts[B] = True
        if B > self.stable:
            self.stable = B
        self.counts = {k: v for k, v in self.counts.items() if k > self.stable}
        self.next_ckpt = (B // self.cfg.K + 1) * self.cfg.K if self.cfg.K else 0
        self.exec_limit = self.stable + self.cfg.c * self.cfg.K if self.ckpt_on else float("inf")
        self.env.event("loaded", self.id, boundary=B)
        self._request_proposals()

    def _release_held(self) -> None:
        self.hold_protocol = False
        held, self.held = self.held, []
        for n, (src, msg) in enumerate(held):
            if self.hold_protocol:
                self.held.extend(held[n:])
                return
            self._dispatch[type(msg)](src, msg)

    def load_checkpoint(self, blob: bytes) -> None:
        """Boot this replica from a checkpoint blob (disaster import)."""
        self._load(blob)
        self._drain()
