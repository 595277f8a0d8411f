"""Canonical binary codec shared by the simulator, the socket transport and checkpoint files.

Layout rules (all integers big-endian):

    u8 / u32 / u64     fixed width
    id                 32 raw bytes
    bytes              u32 length + data
    opt<T>             u8 flag (0 absent, 1 present) + T
    list<T>            u32 count + items
    set<id>            list<id> sorted ascending

Fields are written in declaration order. Every top-level message is
``u8 tag`` + body, see ``TAGS``. A wire frame is

    u32 length | body | u8 tag

where ``length`` counts body and tag. The tag trails the body so a reader can
hand the payload straight to the decoder table.
"""
from __future__ import annotations

import struct

from . import model as m

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_FRAME = struct.Struct(">I")


class CodecError(ValueError):
    pass


# payload / entry sub-tags
P_COIN, P_COUNTER, P_TABLE = 1, 2, 3
F_TRANSFER, F_MERGE, F_INCR, F_DYN = 1, 2, 3, 4

TAGS = {
    m.ProposeMessage: 1,
    m.ReadyMessage: 2,
    m.ResultMessage: 3,
    m.UpdateProposeExec: 4,
    m.CheckpointedMessage: 5,
    m.Recover: 6,
    m.RecoverOk: 7,
    m.NewReader: 8,
    m.NewReaderOk: 9,
    m.Abort: 10,
    m.NotifySync: 11,
    m.Sync: 12,
    m.SyncReply: 13,
    m.SyncComplete: 14,
    m.ProposeRequest: 15,
    m.Commit: 16,
    m.Report: 17,
    m.Hello: 18,
    m.Ack: 19,
    m.Stop: 20,
    m.Batch: 30,
    m.CommitEntry: 31,
    m.Transaction: 32,
    m.Object: 33,
}
BY_TAG = {v: k for k, v in TAGS.items()}


class Writer:
    __slots__ = ("parts",)

    def __init__(self):
        self.parts = []

    def u8(self, v):
        self.parts.append(bytes((v,)))

    def u32(self, v):
        self.parts.append(_U32.pack(v))

    def u64(self, v):
        self.parts.append(_U64.pack(v))

    def id(self, v):
        if len(v) != 32:
            raise CodecError("ids are 32 bytes")
        self.parts.append(v)

    def raw(self, v):
        self.parts.append(_U32.pack(len(v)))
        self.parts.append(v)

    def str(self, v):
        self.raw(v.encode())

    def opt_id(self, v):
        if v is None:
            self.u8(0)
        else:
            self.u8(1)
            self.id(v)

    def ids(self, v):
        v = sorted(v)
        self.u32(len(v))
        self.parts.extend(v)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf):
        self.buf = bytes(buf)
        self.pos = 0

    def _take(self, n):
        p = self.pos
        if p + n > len(self.buf):
            raise CodecError("truncated input")
        self.pos = p + n
        return self.buf[p:p + n]

    def u8(self):
        return self._take(1)[0]

    def u32(self):
        return _U32.unpack(self._take(4))[0]

    def u64(self):
        return _U64.unpack(self._take(8))[0]

    def id(self):
        return self._take(32)

    def raw(self):
        return self._take(self.u32())

    def str(self):
        return self.raw().decode()

    def opt_id(self):
        return self.id() if self.u8() else None

    def ids(self):
        return frozenset(self.id() for _ in range(self.u32()))

    def done(self):
        if self.pos != len(self.buf):
            raise CodecError("trailing bytes")


# ---- values ----

def w_payload(w: Writer, p):
    if isinstance(p, m.Coin):
        w.u8(P_COIN)
        w.u64(p.balance)
    elif isinstance(p, m.Counter):
        w.u8(P_COUNTER)
        w.u64(p.value)
    elif isinstance(p, m.Table):
        w.u8(P_TABLE)
        w.u32(len(p.entries))
        for k, cid in p.entries:
            w.u64(k)
            w.id(cid)
    else:
        raise CodecError(f"unknown payload {p!r}")


def r_payload(r: Reader):
    t = r.u8()
    if t == P_COIN:
        return m.Coin(r.u64())
    if t == P_COUNTER:
        return m.Counter(r.u64())
    if t == P_TABLE:
        return m.Table(tuple((r.u64(), r.id()) for _ in range(r.u32())))
    raise CodecError(f"unknown payload tag {t}")


def w_object(w: Writer, o: m.Object):
    w.id(o.oid)
    w.u64(o.version)
    w.opt_id(o.owner)
    w_payload(w, o.payload)


def r_object(r: Reader) -> m.Object:
    return m.Object(r.id(), r.u64(), r.opt_id(), r_payload(r))


def w_entry(w: Writer, e):
    if isinstance(e, m.Transfer):
        w.u8(F_TRANSFER)
        w.id(e.src)
        w.id(e.dst)
        w.u64(e.amount)
    elif isinstance(e, m.MergeAndFib):
        w.u8(F_MERGE)
        w.id(e.src)
        w.id(e.dst)
        w.u32(e.n)
    elif isinstance(e, m.IncrementCounter):
        w.u8(F_INCR)
    elif isinstance(e, m.DynamicChildAccess):
        w.u8(F_DYN)
        w.id(e.table)
        w.u64(e.key)
    else:
        raise CodecError(f"unknown entry {e!r}")


def r_entry(r: Reader):
    t = r.u8()
    if t == F_TRANSFER:
        return m.Transfer(r.id(), r.id(), r.u64())
    if t == F_MERGE:
        return m.MergeAndFib(r.id(), r.id(), r.u32())
    if t == F_INCR:
        return m.IncrementCounter()
    if t == F_DYN:
        return m.DynamicChildAccess(r.id(), r.u64())
    raise CodecError(f"unknown entry tag {t}")


def encode_tx_core(read, write, blind, entry) -> bytes:
    w = Writer()
    w.ids(read)
    w.ids(write)
    w.ids(blind)
    w_entry(w, entry)
    return w.getvalue()


def w_tx(w: Writer, tx: m.Transaction):
    w.id(tx.digest)
    w.u64(tx.index)
    w.ids(tx.read_set)
    w.ids(tx.write_set)
    w_entry(w, tx.entry)
    w.ids(tx.blind)
    w.ids(tx.discovered)


def r_tx(r: Reader) -> m.Transaction:
    digest, index = r.id(), r.u64()
    read, write = r.ids(), r.ids()
    entry = r_entry(r)
    return m.Transaction(digest, index, read, write, entry, r.ids(), r.ids())


def encode_txs(txs) -> bytes:
    w = Writer()
    w.u32(len(txs))
    for tx in txs:
        w_tx(w, tx)
    return w.getvalue()


def w_txs(w, txs):
    w.u32(len(txs))
    for tx in txs:
        w_tx(w, tx)


def r_txs(r):
    return tuple(r_tx(r) for _ in range(r.u32()))


def w_objects(w, objs):
    w.u32(len(objs))
    for o in objs:
        w_object(w, o)


def r_objects(r):
    return tuple(r_object(r) for _ in range(r.u32()))


# ---- messages ----

def _w_body(w: Writer, msg):
    t = type(msg)
    if t is m.ProposeMessage:
        w.u64(msg.batch_idx)
        w.id(msg.batch_id)
        w_txs(w, msg.txs)
    elif t is m.ReadyMessage:
        w_tx(w, msg.tx)
        w.u32(len(msg.objects))
        for oid, obj in msg.objects:
            w.id(oid)
            if obj is None:
                w.u8(0)
            else:
                w.u8(1)
                w_object(w, obj)
    elif t is m.ResultMessage:
        w_tx(w, msg.tx)
        w_objects(w, msg.mutated)
        w.u32(len(msg.deleted))
        for oid in msg.deleted:
            w.id(oid)
        w.u8(1 if msg.aborted else 0)
    elif t is m.UpdateProposeExec:
        w_tx(w, msg.aug_tx)
    elif t is m.CheckpointedMessage:
        w.u32(msg.shard)
        w.u64(msg.txidx)
    elif t in (m.Recover, m.Abort):
        w.u64(msg.req)
    elif t in (m.RecoverOk, m.NewReaderOk):
        w.u64(msg.req)
        w.u64(msg.stable_txid)
    elif t in (m.NewReader, m.Sync):
        w.u64(msg.req)
        w.u64(msg.txidx)
    elif t is m.SyncReply:
        w.u64(msg.req)
        w.raw(msg.blob)
    elif t is m.SyncComplete:
        w.u64(msg.txidx)
        w.u8(1 if msg.echo else 0)
    elif t is m.ProposeRequest:
        w.u64(msg.from_batch)
    elif t is m.Commit:
        w.u64(msg.entry.batch_idx)
        w.id(msg.entry.batch_id)
    elif t is m.Report:
        w.u32(msg.shard)
        w.u32(msg.row)
        w.u64(msg.j)
        w.raw(msg.blob)
        w.u32(len(msg.outcomes))
        for idx, ab, ts in msg.outcomes:
            w.u64(idx)
            w.u8(1 if ab else 0)
            w.u64(ts)
    elif t is m.Hello:
        w_node(w, m.NodeId(*msg.node))
        w.u64(msg.received)
        w.u64(msg.session)
    elif t is m.Ack:
        w.u64(msg.received)
    elif t in (m.NotifySync, m.Stop):
        pass
    elif t is m.Batch:
        w.id(msg.batch_id)
        w_txs(w, msg.txs)
    elif t is m.CommitEntry:
        w.u64(msg.batch_idx)
        w.id(msg.batch_id)
    elif t is m.Transaction:
        w_tx(w, msg)
    elif t is m.Object:
        w_object(w, msg)
    else:
        raise CodecError(f"cannot encode {t.__name__}")


def _r_body(r: Reader, t):
    if t is m.ProposeMessage:
        return m.ProposeMessage(r.u64(), r.id(), r_txs(r))
    if t is m.ReadyMessage:
        tx = r_tx(r)
        objs = []
        for _ in range(r.u32()):
            oid = r.id()
            objs.append((oid, r_object(r) if r.u8() else None))
        return m.ReadyMessage(tx, tuple(objs))
    if t is m.ResultMessage:
        tx = r_tx(r)
        mut = r_objects(r)
        dele = tuple(r.id() for _ in range(r.u32()))
        return m.ResultMessage(tx, mut, dele, bool(r.u8()))
    if t is m.UpdateProposeExec:
        return m.UpdateProposeExec(r_tx(r))
    if t is m.CheckpointedMessage:
        return m.CheckpointedMessage(r.u32(), r.u64())
    if t in (m.Recover, m.Abort):
        return t(r.u64())
    if t in (m.RecoverOk, m.NewReaderOk, m.NewReader, m.Sync):
        return t(r.u64(), r.u64())
    if t is m.SyncReply:
        return m.SyncReply(r.u64(), r.raw())
    if t is m.SyncComplete:
        return m.SyncComplete(r.u64(), bool(r.u8()))
    if t is m.ProposeRequest:
        return m.ProposeRequest(r.u64())
    if t is m.Commit:
        return m.Commit(m.CommitEntry(r.u64(), r.id()))
    if t is m.Report:
        shard, row, j, blob = r.u32(), r.u32(), r.u64(), r.raw()
        outs = tuple((r.u64(), bool(r.u8()), r.u64()) for _ in range(r.u32()))
        return m.Report(shard, row, j, blob, outs)
    if t is m.Hello:
        node = r_node(r)
        return m.Hello((node.kind, node.shard, node.row), r.u64(), r.u64())
    if t is m.Ack:
        return m.Ack(r.u64())
    if t in (m.NotifySync, m.Stop):
        return t()
    if t is m.Batch:
        return m.Batch(r.id(), r_txs(r))
    if t is m.CommitEntry:
        return m.CommitEntry(r.u64(), r.id())
    if t is m.Transaction:
        return r_tx(r)
    if t is m.Object:
        return r_object(r)
    raise CodecError(f"cannot decode {t.__name__}")


def w_node(w, n: m.NodeId):
    w.u8(ord(n.kind))
    w.u32(n.shard)
    w.u32(n.row)


def r_node(r) -> m.NodeId:
    return m.NodeId(chr(r.u8()), r.u32(), r.u32())


def encode(msg) -> bytes:
    """Tagged encoding: u8 tag + body."""
    w = Writer()
    w.u8(TAGS[type(msg)])
    _w_body(w, msg)
    return w.getvalue()


def decode(buf) -> object:
    r = Reader(buf)
    tag = r.u8()
    t = BY_TAG.get(tag)
    if t is None:
        raise CodecError(f"unknown tag {tag}")
    out = _r_body(r, t)
    r.done()
    return out


def encode_body(msg) -> bytes:
    w = Writer()
    _w_body(w, msg)
    return w.getvalue()


def frame(msg) -> bytes:
    body = encode_body(msg)
    return _FRAME.pack(len(body) + 1) + body + bytes((TAGS[type(msg)],))


def unframe(payload: bytes):
    """Decode `body | tag` (the bytes following the length prefix)."""
    tag = payload[-1]
    t = BY_TAG.get(tag)
    if t is None:
        raise CodecError(f"unknown tag {tag}")
    r = Reader(payload[:-1])
    out = _r_body(r, t)
    r.done()
    return out


def encode_seq(items) -> bytes:
    """Concatenated tagged records, each length-prefixed (batch and commit files)."""
    out = []
    for it in items:
        b = encode(it)
        out.append(_U32.pack(len(b)))
        out.append(b)
    return b"".join(out)


def decode_seq(buf) -> list:
    out, pos = [], 0
    buf = bytes(buf)
    while pos < len(buf):
        if pos + 4 > len(buf):
            raise CodecError("truncated record")
        n = _U32.unpack_from(buf, pos)[0]
        pos += 4
        if pos + n > len(buf):
            raise CodecError("truncated record")
        out.append(decode(buf[pos:pos + n]))
        pos += n
    return out


def encode_objects(objs) -> bytes:
    w = Writer()
    w_objects(w, sorted(objs, key=lambda o: o.oid))
    return w.getvalue()


def decode_objects(buf) -> tuple:
    r = Reader(buf)
    out = r_objects(r)
    r.done()
    return out


def state_digest(objs) -> str:
    """Hex digest of a set of objects, independent of where they were stored."""
    return m.h256(b"state", encode_objects(objs)).hex()
