"""Per-shard lock scheduling.

Two structures live here:

* ``PendingQueues``: per-object FIFO of (R|W, group) lock entries. Used by the
  base mode (read locks dropped when the reader triggers) and the dynamic mode
  (all locks held until the result arrives).
* ``VersionIndex``: the split-queue variant. Each object only remembers its
  current writer; a reader or a read-modify-write waits on that writer and
  nothing else, so a later write never waits for readers of an older version.

Transactions are referred to by their index throughout.
"""
from __future__ import annotations

from collections import deque
from enum import Enum

R, W = "R", "W"


class Mode(str, Enum):
    BASE = "base"
    DYNAMIC = "dynamic"
    SPLIT = "split"


class NotAtHead(AssertionError):
    pass


class DuplicatePropose(Exception):
    pass


class PendingQueues:
    def __init__(self):
        # oid -> deque of [op, [tx indices]]
        self.q: dict = {}

    def enqueue(self, idx: int, oid: bytes, write: bool) -> None:
        q = self.q.get(oid)
        if q is None:
            q = self.q[oid] = deque()
        if write:
            q.append([W, [idx]])
        elif not q or q[-1][0] == W:
            q.append([R, [idx]])
        else:
            q[-1][1].append(idx)

    def at_head(self, idx: int, oid: bytes) -> bool:
        q = self.q.get(oid)
        return bool(q) and idx in q[0][1]

    def advance(self, idx: int, oid: bytes) -> list:
        q = self.q.get(oid)
        if not q or idx not in q[0][1]:
            raise NotAtHead(f"Tx{idx} is not at the head of its queue")
        head = q[0][1]
        head.remove(idx)
        if head:
            return list(head)
        q.popleft()
        if not q:
            del self.q[oid]
            return []
        return list(q[0][1])

    def entries(self, oid: bytes) -> list:
        return [(op, list(g)) for op, g in self.q.get(oid, ())]


class VersionIndex:
    def __init__(self):
        self.current_writer: dict = {}
        self.waiting_on: dict = {}
        self.waited_on_by: dict = {}
        self.live: set = set()
        # (idx, oid) -> writer before a blind write; the fallback if the blind write never lands
        self.fallback: dict = {}

    def enqueue(self, idx: int, oid: bytes, reads_prior: bool, writes: bool) -> None:
        self.live.add(idx)
        prev = self.current_writer.get(oid)
        if prev is not None and prev != idx:
            if reads_prior:
                self._wait(idx, prev)
            elif writes:
                self.fallback[(idx, oid)] = prev
        if writes:
            self.current_writer[oid] = idx

    def _wait(self, t: int, p: int) -> None:
        self.waiting_on.setdefault(t, set()).add(p)
        self.waited_on_by.setdefault(p, set()).add(t)

    def _live_before(self, idx: int, oid: bytes):
        p = self.fallback.get((idx, oid))
        while p is not None and p not in self.live:
            p = self.fallback.get((p, oid))  # only failed blind writers keep their entry
        return p

    def blocked(self, idx: int) -> bool:
        return bool(self.waiting_on.get(idx))

    def complete(self, idx: int, written, failed=()) -> list:
        """`written`: oids idx held a write on; `failed`: blind writes among them that did not land."""
        self.live.discard(idx)
        failed = set(failed)
        for oid in written:
            if oid in failed:
                p = self._live_before(idx, oid)
                if p is not None:
                    # readers of the skipped version need the one before it
                    for t in self.waited_on_by.get(idx, ()):
                        self._wait(t, p)
                if self.current_writer.get(oid) == idx:
                    if p is None:
                        del self.current_writer[oid]
                    else:
                        self.current_writer[oid] = p
            else:
                self.fallback.pop((idx, oid), None)
                if self.current_writer.get(oid) == idx:
                    del self.current_writer[oid]
        out = []
        for t in sorted(self.waited_on_by.pop(idx, ())):
            s = self.waiting_on.get(t)
            if s is None:
                continue
            s.discard(idx)
            if not s:
                del self.waiting_on[t]
                out.append(t)
        # a tx can finish while still recorded as waiting (abort paths); keep the relation symmetric
        for p in self.waiting_on.pop(idx, ()):
            w = self.waited_on_by.get(p)
            if w is not None:
                w.discard(idx)
                if not w:
                    del self.waited_on_by[p]
        return out

    def gc(self, floor: int) -> None:
        """Forget fallbacks of failed blind writes at or below the executed watermark."""
        for k in [k for k in self.fallback if k[0] <= floor]:
            del self.fallback[k]

    def edges(self) -> set:
        return {(a, b) for b, s in self.waiting_on.items() for a in s}


class Scheduler:
    """Mode-dispatching facade over the two structures."""

    def __init__(self, mode: Mode = Mode.BASE):
        self.mode = Mode(mode)
        self.pending = PendingQueues()
        self.versions = VersionIndex()

    def enqueue(self, tx, oids) -> None:
        idx = tx.index
        if self.mode is Mode.SPLIT:
            for oid in oids:
                w = oid in tx.write_set
                self.versions.enqueue(idx, oid, reads_prior=not (w and oid in tx.blind), writes=w)
        else:
            for oid in oids:
                self.pending.enqueue(idx, oid, oid in tx.write_set)

    def has_dependencies(self, idx: int, oids, released=()) -> bool:
        if self.mode is Mode.SPLIT:
            return self.versions.blocked(idx)
        q = self.pending.q
        for oid in oids:
            if oid in released:
                continue
            e = q.get(oid)
            if not e or idx not in e[0][1]:
                return True
        return False

    def release_reads(self, tx, oids) -> list:
        """Base mode: drop this tx's read locks once it has triggered."""
        out = []
        for oid in oids:
            if oid in tx.read_set:
                out.extend(self.pending.advance(tx.index, oid))
        return out

    def complete(self, tx, oids, released=(), wrote=None) -> list:
        """`wrote`: oids the result actually changed (None = every write landed)."""
        if self.mode is Mode.SPLIT:
            ws = [o for o in oids if o in tx.write_set]
            failed = () if wrote is None else [o for o in ws if o in tx.blind and o not in wrote]
            return self.versions.complete(tx.index, ws, failed)
        out = []
        for oid in oids:
            if oid not in released:
                out.extend(self.pending.advance(tx.index, oid))
        return out

    def dump(self, names: dict | None = None) -> str:
        """Queue snapshot, one object per line: ``oid1: (W,[Tx1]) (R,[Tx3,Tx5])``."""
        names = names or {}
        lines = []
        if self.mode is Mode.SPLIT:
            for oid in sorted(self.versions.current_writer, key=lambda o: names.get(o, o.hex())):
                lines.append(f"{names.get(oid, oid.hex()[:8])}: writer Tx{self.versions.current_writer[oid]}")
            for a, b in sorted(self.versions.edges()):
                lines.append(f"Tx{a} -> Tx{b}")
            return "\n".join(lines)
        for oid in sorted(self.pending.q, key=lambda o: names.get(o, o.hex())):
            groups = " ".join(f"({op},[{','.join(f'Tx{t}' for t in g)}])" for op, g in self.pending.q[oid])
            lines.append(f"{names.get(oid, oid.hex()[:8])}: {groups}")
        return "\n".join(lines)

    def __len__(self):
        if self.mode is Mode.SPLIT:
            return len(self.versions.waiting_on)
        return len(self.pending.q)
