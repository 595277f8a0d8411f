"""Multi-version object store keyed by writer transaction index.

Reads are snapshot reads: a transaction with index k sees the newest version
written by an index below k. This serves the split-queue scheduler (writers may
finish out of order) and lets checkpoints be cut "as of" a boundary after the
watermark has already moved past it.
"""
from __future__ import annotations

import os
from typing import Iterable, Optional

from .model import Object


class VersionedStore:
    def __init__(self, objects: Iterable[Object] = (), at: int = 0):
        # oid -> ascending list of (writer index, Object | None)
        self._v: dict = {}
        self._multi: set = set()
        for o in objects:
            self._v[o.oid] = [(at, o)]

    def get(self, oid: bytes, before: int) -> Optional[Object]:
        vs = self._v.get(oid)
        if vs is None:
            return None
        for i in range(len(vs) - 1, -1, -1):
            if vs[i][0] < before:
                return vs[i][1]
        return None

    def latest(self, oid: bytes) -> Optional[Object]:
        vs = self._v.get(oid)
        return vs[-1][1] if vs else None

    def put(self, oid: bytes, idx: int, obj: Optional[Object]) -> None:
        vs = self._v.get(oid)
        if vs is None:
            self._v[oid] = [(idx, obj)]
            return
        if vs[-1][0] < idx:
            vs.append((idx, obj))
        else:
            for n, (k, _) in enumerate(vs):
                if k == idx:
                    vs[n] = (idx, obj)
                    return
                if k > idx:
                    vs.insert(n, (idx, obj))
                    break
            else:
                vs.append((idx, obj))
        self._multi.add(oid)

    def gc(self, floor: int) -> None:
        """Drop versions no reader above `floor` can observe."""
        done = []
        for oid in self._multi:
            vs = self._v[oid]
            keep = 0
            for n, (k, _) in enumerate(vs):
                if k <= floor:
                    keep = n
            if keep:
                del vs[:keep]
            if len(vs) == 1:
                done.append(oid)
                if vs[0][1] is None and vs[0][0] <= floor:
                    del self._v[oid]
        self._multi.difference_update(done)

    def snapshot(self, at: int) -> list:
        out = []
        for oid, vs in self._v.items():
            o = None
            for k, obj in vs:
                if k <= at:
                    o = obj
                else:
                    break
            if o is not None:
                out.append(o)
        out.sort(key=lambda o: o.oid)
        return out

    def current(self) -> list:
        out = [vs[-1][1] for vs in self._v.values() if vs[-1][1] is not None]
        out.sort(key=lambda o: o.oid)
        return out

    def version_count(self) -> int:
        return sum(len(vs) for vs in self._v.values())

    def __len__(self):
        return len(self._v)


class MemStorage:
    """Crash-surviving key/value "disk" used by the simulator."""

    def __init__(self):
        self.files: dict = {}

    def write(self, name: str, data: bytes) -> None:
        self.files[name] = bytes(data)

    def append(self, name: str, data: bytes) -> None:
        self.files[name] = self.files.get(name, b"") + data

    def read(self, name: str) -> Optional[bytes]:
        return self.files.get(name)

    def delete(self, name: str) -> None:
        self.files.pop(name, None)

    def list(self, prefix: str = "") -> list:
        return sorted(n for n in self.files if n.startswith(prefix))


class DirStorage:
    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)

    def _p(self, name):
        return os.path.join(self.root, name)

    def write(self, name, data):
        tmp = self._p(name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, self._p(name))

    def append(self, name, data):
        with open(self._p(name), "ab") as f:
            f.write(data)

    def read(self, name):
        try:
            with open(self._p(name), "rb") as f:
                return f.read()
        except FileNotFoundError:
            return None

    def delete(self, name):
        try:
            os.remove(self._p(name))
        except FileNotFoundError:
            pass

    def list(self, prefix=""):
        return sorted(n for n in os.listdir(self.root) if n.startswith(prefix) and not n.endswith(".tmp"))
