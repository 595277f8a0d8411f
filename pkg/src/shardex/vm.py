"""Toy deterministic VM for the four entry functions."""
from __future__ import annotations

from dataclasses import dataclass

from .model import (Coin, Counter, DynamicChildAccess, IncrementCounter, MergeAndFib, Object,
                    Table, Transaction, Transfer, h256)

MASK64 = (1 << 64) - 1


class VMError(Exception):
    """Deterministic execution failure; the transaction aborts."""


class PayloadTypeError(VMError, TypeError):
    pass


class OwnershipViolation(VMError):
    pass


class InsufficientFunds(VMError):
    pass


@dataclass(frozen=True, slots=True)
class VMResult:
    mutated: tuple  # Objects, created or mutated
    deleted: tuple  # oids


@dataclass(frozen=True, slots=True)
class ChildDiscovered:
    oid: bytes


def fib(n: int) -> int:
    a, b = 0, 1
    for _ in range(n):
        a, b = b, (a + b) & MASK64
    return a


def child_id(parent: bytes, key: int, tx_digest: bytes) -> bytes:
    return h256(b"child", parent, key.to_bytes(8, "big"), tx_digest)


def _coin(obj) -> Coin:
    if obj is None or not isinstance(obj.payload, Coin):
        raise PayloadTypeError("expected a coin")
    return obj.payload


def _bump(obj: Object, payload) -> Object:
    return Object(obj.oid, obj.version + 1, obj.owner, payload)


def execute(tx: Transaction, objects: dict):
    """Run tx against its input objects (oid -> Object, blind writes may map to None)."""
    declared = tx.read_set | tx.write_set
    for o in objects.values():
        # children are reachable only through their root
        if o is not None and o.owner is not None and o.owner not in declared:
            raise OwnershipViolation("child accessed without its root")
    e = tx.entry
    if isinstance(e, Transfer):
        if e.src == e.dst:
            raise VMError("transfer to self")
        src, dst = objects[e.src], objects[e.dst]
        s, d = _coin(src), _coin(dst)
        if s.balance < e.amount:
            raise InsufficientFunds("balance too low")
        out = (_bump(src, Coin(s.balance - e.amount)), _bump(dst, Coin((d.balance + e.amount) & MASK64)))
        return VMResult(tuple(sorted(out, key=lambda o: o.oid)), ())
    if isinstance(e, MergeAndFib):
        if e.src == e.dst:
            raise VMError("merge into self")
        src, dst = objects[e.src], objects[e.dst]
        s, d = _coin(src), _coin(dst)
        fib(e.n)
        return VMResult((_bump(dst, Coin((d.balance + s.balance) & MASK64)),), (e.src,))
    if isinstance(e, IncrementCounter):
        delta = 1
        for oid in sorted(tx.read_set):
            o = objects[oid]
            if o is None or not isinstance(o.payload, Counter):
                raise PayloadTypeError("expected a counter")
            delta += o.payload.value
        delta &= MASK64
        out = []
        for oid in sorted(tx.write_set):
            if oid in tx.blind:
                # version = writer index keeps versions increasing without reading the prior object
                out.append(Object(oid, tx.index, None, Counter(delta)))
                continue
            o = objects[oid]
            if o is None or not isinstance(o.payload, Counter):
                raise PayloadTypeError("expected a counter")
            out.append(_bump(o, Counter((o.payload.value + delta) & MASK64)))
        return VMResult(tuple(out), ())
    if isinstance(e, DynamicChildAccess):
        table = objects[e.table]
        if table is None or not isinstance(table.payload, Table):
            raise PayloadTypeError("expected a table")
        cid = table.payload.lookup(e.key)
        if cid is None:
            cid = child_id(e.table, e.key, tx.digest)
            child = Object(cid, 0, e.table, Counter(1))
            t2 = _bump(table, table.payload.with_entry(e.key, cid))
            return VMResult(tuple(sorted((child, t2), key=lambda o: o.oid)), ())
        if cid not in objects:
            return ChildDiscovered(cid)
        child = objects[cid]
        if child.owner != e.table:
            raise OwnershipViolation("child is not owned by the table")
        if not isinstance(child.payload, Counter):
            raise PayloadTypeError("expected a counter child")
        return VMResult((_bump(child, Counter((child.payload.value + 1) & MASK64)),), ())
    raise PayloadTypeError(f"unknown entry {e!r}")
