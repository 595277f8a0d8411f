import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import five_tx
from shardex.model import IncrementCounter, make_tx, oid_from_int
from shardex.scheduler import Mode, NotAtHead, PendingQueues, Scheduler


def _loaded(mode):
    o, txs, _ = five_tx()
    s = Scheduler(mode)
    for tx in txs:
        s.enqueue(tx, sorted(tx.read_set | tx.write_set))
    names = {v: k for k, v in o.items()}
    return s, txs, names, o


def test_five_tx_queue_snapshot():
    s, _, names, _ = _loaded(Mode.BASE)
    assert s.dump(names).splitlines() == [
        "o1: (W,[Tx1]) (W,[Tx2]) (R,[Tx3,Tx5])",
        "o2: (R,[Tx3,Tx4]) (W,[Tx5])",
        "o3: (W,[Tx2]) (R,[Tx4]) (W,[Tx5])",
        "o4: (W,[Tx3]) (W,[Tx4])",
    ]


def test_tx5_blocked_behind_tx2_and_tx1_free():
    s, txs, _, _ = _loaded(Mode.BASE)
    objs = {tx.index: sorted(tx.read_set | tx.write_set) for tx in txs}
    assert s.has_dependencies(5, objs[5])
    assert not s.has_dependencies(1, objs[1])
    assert s.has_dependencies(2, objs[2])


def test_read_group_advance():
    q = PendingQueues()
    o = oid_from_int(2)
    q.enqueue(3, o, False)
    q.enqueue(4, o, False)
    q.enqueue(5, o, True)
    assert q.advance(3, o) == [4]
    assert q.entries(o)[0] == ("R", [4])
    assert q.advance(4, o) == [5]
    assert q.entries(o) == [("W", [5])]
    with pytest.raises(NotAtHead):
        q.advance(9, o)


def test_result_of_tx2_moves_heads():
    s, txs, names, o = _loaded(Mode.DYNAMIC)
    t1, t2 = txs[0], txs[1]
    s.complete(t1, sorted(t1.write_set))
    s.complete(t2, sorted(t2.write_set))
    q = s.pending
    assert q.entries(o["o1"])[0] == ("R", [3, 5])
    assert q.entries(o["o3"])[0] == ("R", [4])


def test_split_edges_match_example():
    s, _, _, _ = _loaded(Mode.SPLIT)
    assert s.versions.edges() == {(1, 2), (2, 3), (2, 5), (2, 4)}


def test_split_write_does_not_wait_for_readers():
    s, txs, _, _ = _loaded(Mode.SPLIT)
    for tx in txs[:2]:
        s.complete(tx, sorted(tx.read_set | tx.write_set))
    # Tx3 and Tx4 still hold their reads of o2; Tx5 writes o2 and is free anyway
    assert not s.has_dependencies(5, [])
    assert not s.has_dependencies(3, []) and not s.has_dependencies(4, [])


def test_split_failed_blind_write_hands_readers_back():
    a = oid_from_int(1)
    inc = IncrementCounter()
    older = make_tx(1, inc, write=[a])
    blind_w = make_tx(2, inc, write=[a], blind=[a])
    reader = make_tx(3, inc, read=[a], write=[oid_from_int(2)])
    s = Scheduler(Mode.SPLIT)
    for tx in (older, blind_w, reader):
        s.enqueue(tx, sorted(tx.read_set | tx.write_set))
    assert s.has_dependencies(3, [])
    # the blind writer aborts: nothing of it lands, the reader must wait for Tx1
    assert s.complete(blind_w, [a], wrote=set()) == []
    assert s.has_dependencies(3, [])
    assert s.complete(older, [a]) == [3]


# ---- properties ----

@st.composite
def tx_lists(draw):
    n_obj = draw(st.integers(1, 5))
    n = draw(st.integers(1, 14))
    out = []
    for i in range(1, n + 1):
        objs = draw(st.lists(st.integers(0, n_obj - 1), min_size=1, max_size=3, unique=True))
        read, write, blind = set(), set(), set()
        for k in objs:
            o = oid_from_int(k)
            r = draw(st.sampled_from(["R", "W", "B"]))
            if r == "R":
                read.add(o)
            else:
                write.add(o)
                if r == "B":
                    blind.add(o)
        out.append(make_tx(i, IncrementCounter(), read=read, write=write, blind=blind))
    return out


def _drive(mode, txs, rng):
    """Random-order driver; returns the (trigger, complete) event sequence."""
    s = Scheduler(mode)
    objs = {tx.index: sorted(tx.read_set | tx.write_set) for tx in txs}
    by = {tx.index: tx for tx in txs}
    for tx in txs:
        s.enqueue(tx, objs[tx.index])
    released = {}
    triggered, done = set(), set()
    log = []
    while len(done) < len(txs):
        can_trigger = [i for i in by if i not in triggered and
                       not s.has_dependencies(i, objs[i], released.get(i, ()))]
        can_finish = sorted(triggered - done)
        assert can_trigger or can_finish, "scheduler deadlocked"
        if can_trigger and (not can_finish or rng.random() < 0.5):
            i = rng.choice(can_trigger)
            triggered.add(i)
            log.append(("trigger", i))
            if mode is Mode.BASE:
                rel = [o for o in objs[i] if o in by[i].read_set]
                s.release_reads(by[i], objs[i])
                released[i] = set(rel)
        else:
            i = rng.choice(can_finish)
            s.complete(by[i], objs[i], released.pop(i, ()))
            done.add(i)
            log.append(("complete", i))
    return log


def _conflict(a, b):
    wa, wb = a.write_set, b.write_set
    return bool(wa & (b.read_set | wb)) or bool(wb & a.read_set)


@settings(max_examples=150, deadline=None)
@given(tx_lists(), st.integers(0, 10**6))
def test_dynamic_mode_serial_on_conflicts(txs, seed):
    log = _drive(Mode.DYNAMIC, txs, random.Random(seed))
    done = set()
    for ev, i in log:
        if ev == "trigger":
            for t in txs[: i - 1]:
                if _conflict(t, txs[i - 1]):
                    assert t.index in done
        else:
            done.add(i)


@settings(max_examples=150, deadline=None)
@given(tx_lists(), st.integers(0, 10**6))
def test_base_mode_reads_released_on_trigger(txs, seed):
    log = _drive(Mode.BASE, txs, random.Random(seed))
    done, trig = set(), set()
    for ev, i in log:
        tx = txs[i - 1]
        if ev == "trigger":
            for t in txs[: i - 1]:
                if t.write_set & (tx.read_set | tx.write_set):
                    assert t.index in done  # earlier writers finished
                if t.read_set & tx.write_set:
                    assert t.index in trig  # earlier readers at least took their snapshot
            trig.add(i)
        else:
            done.add(i)


@settings(max_examples=150, deadline=None)
@given(tx_lists(), st.integers(0, 10**6))
def test_split_mode_waits_only_for_last_writer(txs, seed):
    log = _drive(Mode.SPLIT, txs, random.Random(seed))
    done = set()
    for ev, i in log:
        tx = txs[i - 1]
        if ev == "trigger":
            needs = tx.read_set | (tx.write_set - tx.blind)
            for o in needs:
                writers = [t.index for t in txs[: i - 1] if o in t.write_set]
                if writers:
                    assert writers[-1] in done
        else:
            done.add(i)
