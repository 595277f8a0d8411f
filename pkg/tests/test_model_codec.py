import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardex import codec
from shardex import model as m
from shardex.model import (Coin, Counter, DynamicChildAccess, IncrementCounter, MergeAndFib, NodeId,
                           Object, Table, Transfer, executor_of, h256, make_tx, shard_of)
from shardex.replication import (DigestMismatch, checkpoint_name, decode_checkpoint,
                                 encode_checkpoint)

oids = st.binary(min_size=32, max_size=32)
u64 = st.integers(0, 2**64 - 1)
u32 = st.integers(0, 2**32 - 1)

payloads = st.one_of(
    st.builds(Coin, u64),
    st.builds(Counter, u64),
    st.lists(st.tuples(u64, oids), max_size=4, unique_by=lambda e: e[0]).map(
        lambda es: Table(tuple(sorted(es)))),
)
objects = st.builds(Object, oids, u64, st.one_of(st.none(), oids), payloads)
entries = st.one_of(
    st.builds(Transfer, oids, oids, u64),
    st.builds(MergeAndFib, oids, oids, u32),
    st.just(IncrementCounter()),
    st.builds(DynamicChildAccess, oids, u64),
)


@st.composite
def transactions(draw):
    e = draw(entries)
    inherent = {getattr(e, k) for k in ("src", "dst", "table") if hasattr(e, k)}
    read = draw(st.frozensets(oids, max_size=3)) - inherent
    write = draw(st.frozensets(oids, max_size=3)) - read
    blind = frozenset(x for x in write if draw(st.booleans()))
    tx = make_tx(draw(st.integers(1, 2**40)), e, read=read, write=write, blind=blind - read)
    if draw(st.booleans()):
        c = draw(oids)
        if c not in tx.read_set and c not in tx.write_set:
            tx = tx.augmented(c)
    return tx


nodes = st.builds(NodeId, st.sampled_from("ESP"), st.integers(0, 1000), st.integers(0, 1000))

messages = st.one_of(
    st.builds(m.ProposeMessage, u64, oids, st.lists(transactions(), max_size=3).map(tuple)),
    st.builds(m.ReadyMessage, transactions(),
              st.lists(st.tuples(oids, st.one_of(st.none(), objects)), max_size=3).map(
                  lambda xs: tuple(sorted(xs, key=lambda x: x[0])))),
    st.builds(m.ResultMessage, transactions(), st.lists(objects, max_size=3).map(tuple),
              st.lists(oids, max_size=2).map(tuple), st.booleans()),
    st.builds(m.UpdateProposeExec, transactions()),
    st.builds(m.CheckpointedMessage, u32, u64),
    st.builds(m.Recover, u64),
    st.builds(m.RecoverOk, u64, u64),
    st.builds(m.NewReader, u64, u64),
    st.builds(m.NewReaderOk, u64, u64),
    st.builds(m.Abort, u64),
    st.just(m.NotifySync()),
    st.builds(m.Sync, u64, u64),
    st.builds(m.SyncReply, u64, st.binary(max_size=64)),
    st.builds(m.SyncComplete, u64, st.booleans()),
    st.builds(m.ProposeRequest, u64),
    st.builds(m.Commit, st.builds(m.CommitEntry, u64, oids)),
    st.builds(m.Report, u32, u32, u64, st.binary(max_size=64),
              st.lists(st.tuples(u64, st.booleans(), u64), max_size=3).map(tuple)),
    st.builds(m.Hello, nodes.map(lambda n: (n.kind, n.shard, n.row)), u64, u64),
    st.builds(m.Ack, u64),
    st.just(m.Stop()),
)


@settings(max_examples=150, deadline=None)
@given(messages)
def test_codec_round_trip(msg):
    assert codec.decode(codec.encode(msg)) == msg


@settings(max_examples=100, deadline=None)
@given(messages)
def test_frame_layout(msg):
    f = codec.frame(msg)
    n = int.from_bytes(f[:4], "big")
    assert n == len(f) - 4
    assert f[-1] == codec.TAGS[type(msg)]
    assert codec.unframe(f[4:]) == msg


def test_truncated_frame_rejected():
    f = codec.frame(m.RecoverOk(7, 9))
    with pytest.raises(codec.CodecError):
        codec.unframe(f[4:-3] + f[-1:])


def test_unknown_tag_rejected():
    with pytest.raises(codec.CodecError):
        codec.unframe(b"\x00\x00" + bytes([250]))


@settings(max_examples=100, deadline=None)
@given(st.lists(objects, max_size=6, unique_by=lambda o: o.oid))
def test_state_digest_ignores_order(objs):
    assert codec.state_digest(objs) == codec.state_digest(list(reversed(objs)))


def test_h256_is_length_prefixed():
    assert h256(b"ab", b"c") != h256(b"a", b"bc")
    assert len(h256(b"x")) == 32


@given(oids, st.integers(1, 64))
def test_shard_of_in_range_and_stable(oid, n):
    s = shard_of(oid, n)
    assert 0 <= s < n
    assert s == shard_of(oid, n)


def test_shard_of_rejects_zero():
    with pytest.raises(ValueError):
        shard_of(bytes(32), 0)


def test_make_tx_fills_sets_from_entry():
    a, b = h256(b"a"), h256(b"b")
    tx = make_tx(3, Transfer(a, b, 5))
    assert tx.write_set == {a, b} and not tx.read_set
    assert make_tx(3, Transfer(a, b, 5)).digest == tx.digest
    assert make_tx(4, Transfer(a, b, 5)).digest != tx.digest


def test_tx_set_rules():
    a = h256(b"a")
    with pytest.raises(ValueError):
        make_tx(1, IncrementCounter(), read=[a], write=[a])
    with pytest.raises(ValueError):
        make_tx(1, IncrementCounter(), write=[], blind=[a])


def test_augmented_marks_child_discovered():
    t, c = h256(b"t"), h256(b"c")
    tx = make_tx(1, DynamicChildAccess(t, 0)).augmented(c)
    assert c in tx.write_set and tx.discovered == {c}


def test_executor_is_shard_with_most_objects():
    objs = [h256(bytes([i])) for i in range(40)]
    by = {}
    for o in objs:
        by.setdefault(shard_of(o, 3), []).append(o)
    tx = make_tx(1, IncrementCounter(), write=by[2][:3] + by[0][:1])
    assert executor_of(tx, 3) == 2


def test_node_id_text_round_trip():
    for n in (NodeId("E", 3, 2), NodeId("S", 1), NodeId("P", 0)):
        assert NodeId.parse(str(n)) == n


def test_checkpoint_blob_round_trip_and_name():
    objs = [Object(h256(b"x"), 4, None, Counter(9)), Object(h256(b"a"), 1, None, Coin(3))]
    blob = encode_checkpoint(2, 300, 7, objs)
    shard, b, resume, got = decode_checkpoint(blob)
    assert (shard, b, resume) == (2, 300, 7)
    assert list(got) == sorted(objs, key=lambda o: o.oid)
    assert checkpoint_name(2, 300) == "ckpt-s002-b000000000300"


def test_torn_checkpoint_detected():
    blob = encode_checkpoint(0, 100, 1, [Object(h256(b"x"), 1, None, Counter(1))])
    with pytest.raises(DigestMismatch):
        decode_checkpoint(blob[: len(blob) // 2])
    flipped = bytearray(blob)
    flipped[10] ^= 1
    with pytest.raises(DigestMismatch):
        decode_checkpoint(bytes(flipped))
