"""Deterministic discrete-event fabric, plus a time-free shuffled variant.

``SimNet`` models per-channel FIFO links with uniform latency, a single-server
service queue per node (work is charged through ``env.charge``), crash/recover
with durable storage surviving the crash, and a failure detector that reports
suspicions after a fixed delay. A run is a pure function of the seed, the send
sequence and the fault schedule.
"""
from __future__ import annotations

import heapq
import random
from collections import deque

from . import codec
from .model import NodeId


class ScenarioTimeout(RuntimeError):
    """The run did not finish within its budget (a liveness failure)."""


class FaultScheduleError(ValueError):
    pass


def parse_fault_schedule(text: str) -> list:
    """Parse ``<when> <worker> crash|recover`` lines.

    ``when`` is absolute seconds (``0.004``), an offset from the previous action
    on the same worker (``+0.002``), or an event trigger ``@kind:n`` meaning the
    n-th trace event of that kind emitted by the worker (``@ckpt_start:2``).
    """
    out = []
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("crash", "recover"):
            raise FaultScheduleError(f"line {ln}: expected '<when> <worker> crash|recover'")
        when, who, what = parts
        try:
            node = NodeId.parse(who)
        except (ValueError, IndexError):
            raise FaultScheduleError(f"line {ln}: bad worker {who!r}") from None
        if node.kind != "E":
            raise FaultScheduleError(f"line {ln}: only execution workers can fail")
        try:
            if when.startswith("@"):
                kind, _, n = when[1:].partition(":")
                out.append(("event", (kind, int(n or 1)), node, what))
            elif when.startswith("+"):
                out.append(("after", float(when[1:]), node, what))
            else:
                out.append(("at", float(when), node, what))
        except ValueError:
            raise FaultScheduleError(f"line {ln}: bad time {when!r}") from None
    return out


def random_fault_schedule(rng: random.Random, n_shards: int, n_e: int, f_e: int,
                          horizon: float, max_down: float = 0.01) -> str:
    """Crash/recover script with at most f_e replicas of any shard down at once.

    Mixes timed crashes with crashes triggered mid checkpoint write and mid sync.
    """
    lines = []
    for s in range(n_shards):
        rows = rng.sample(range(n_e), rng.randint(0, f_e))
        # the f_e victims of a shard overlap in time at most f_e at once by construction
        for r in rows:
            x = rng.random()
            if x < 0.25:
                lines.append(f"@ckpt_start:{rng.randint(1, 4)} E{s}.{r} crash")
            elif x < 0.4:
                lines.append(f"@sync_start:1 E{s}.{r} crash")
            else:
                lines.append(f"{rng.uniform(0, horizon):.6f} E{s}.{r} crash")
            lines.append(f"+{rng.uniform(0.0005, max_down):.6f} E{s}.{r} recover")
            if rng.random() < 0.3:
                lines.append(f"+{rng.uniform(0.001, horizon / 2):.6f} E{s}.{r} crash")
                lines.append(f"+{rng.uniform(0.0005, max_down):.6f} E{s}.{r} recover")
    return "\n".join(lines) + "\n"


def load_fault_schedule(path: str) -> list:
    with open(path) as f:
        return parse_fault_schedule(f.read())


class SimNet:
    pooled_vm = True  # workers may model a VM pool through timers

    def __init__(self, cfg, seed: int = 0):
        self.cfg = cfg
        self.rng = random.Random(seed)
        self.lat = (cfg.latency_min, cfg.latency_max)
        self.t = 0.0
        self.heap: list = []
        self._seq = 0
        self.nodes: dict = {}
        self.factory = None  # fn(node_id) -> fresh node object, used on recover
        self.epoch: dict = {}
        self.down: set = set()
        self.inbox: dict = {}
        self.busy: dict = {}
        self.waking: set = set()
        self.chan_last: dict = {}
        self.listeners: list = []
        self.step_hooks: list = []
        self.stop = None  # fn() -> bool, consulted when a node reports "done"
        self._check = False
        self._cur = None
        self._charge = 0.0
        self._out: list = []
        self.delivered = 0
        self.dropped = 0
        self.steps = 0

    # ---- env interface ----

    def now(self) -> float:
        return self.t + self._charge

    def send(self, src, dst, msg) -> None:
        if self.cfg.wire:
            msg = codec.decode(codec.encode(msg))
        if self._cur is not None and src == self._cur:
            self._out.append((dst, msg))
        else:
            self._post(src, dst, msg, self.t)

    def timer(self, node, delay: float, token) -> None:
        if self._cur is not None and node == self._cur:
            self._out.append((None, (delay, token)))
        else:
            self._push(self.t + delay, ("deliver", node, self.epoch.get(node, 0), ("timer", token)))

    def charge(self, node, seconds: float) -> None:
        if node == self._cur:
            self._charge += seconds

    def event(self, kind: str, node, **kw) -> None:
        t = self.now()
        for fn in self.listeners:
            fn(t, kind, node, kw)
        if kind == "done" and self.stop is not None:
            self._check = True

    # ---- wiring ----

    def add(self, node_id, node) -> None:
        self.nodes[node_id] = node
        self.epoch.setdefault(node_id, 0)
        self.inbox.setdefault(node_id, deque())
        self.busy.setdefault(node_id, 0.0)

    def at(self, t: float, fn) -> None:
        self._push(t, ("call", fn))

    def inject(self, node_id, item, t: float | None = None) -> None:
        """Queue a work item directly at a node (boot, suspicion, ...)."""
        self._push(self.t if t is None else t, ("deliver", node_id, self.epoch[node_id], item))

    def _push(self, t, ev) -> None:
        self._seq += 1
        heapq.heappush(self.heap, (t, self._seq, ev))

    def _post(self, src, dst, msg, depart) -> None:
        lo, hi = self.lat
        t = depart + (lo + (hi - lo) * self.rng.random())
        key = (src, dst)
        last = self.chan_last.get(key, 0.0)
        if t < last:
            t = last
        self.chan_last[key] = t
        self._push(t, ("deliver", dst, self.epoch.get(dst, 0), ("msg", src, msg)))

    # ---- faults ----

    def crash(self, node_id) -> None:
        if node_id in self.down:
            return
        self.down.add(node_id)
        self.epoch[node_id] += 1
        self.inbox[node_id].clear()
        self.waking.discard(node_id)
        self.busy[node_id] = self.t
        self.nodes[node_id] = None
        self.event("crash", node_id)
        self.at(self.t + self.cfg.suspicion_delay, lambda: self._notify("suspect", node_id))

    def recover(self, node_id) -> None:
        if node_id not in self.down:
            return
        self.down.discard(node_id)
        self.epoch[node_id] += 1
        self.nodes[node_id] = self.factory(node_id)
        self.event("restart", node_id)
        self.inject(node_id, ("boot", True))
        self.at(self.t + self.cfg.suspicion_delay, lambda: self._notify("unsuspect", node_id))

    def _notify(self, kind, x) -> None:
        # a crash is always noticed, even when the worker is already back
        for nid in sorted(self.nodes):
            if nid != x and nid.kind == "E" and nid not in self.down:
                self.inject(nid, (kind, x))

    # ---- loop ----

    def _work(self, nid, item) -> None:
        node = self.nodes[nid]
        k = item[0]
        if k == "msg":
            node.handle(item[1], item[2])
        elif k == "timer":
            node.on_timer(item[1])
        elif k == "suspect":
            node.on_suspect(item[1])
        elif k == "unsuspect":
            node.on_unsuspect(item[1])
        elif k == "boot":
            node.on_boot(item[1])

    def run(self, budget: float = float("inf"), max_steps: int | None = None) -> bool:
        """Process events until ``stop()`` holds or nothing is left; True if stopped."""
        heap = self.heap
        pop = heapq.heappop
        while heap:
            t, _, ev = pop(heap)
            if t > budget:
                heapq.heappush(heap, (t, 0, ev))
                raise ScenarioTimeout(f"simulated time budget {budget:.4g}s exhausted")
            self.t = t
            kind = ev[0]
            if kind == "call":
                ev[1]()
            elif kind == "deliver":
                nid, ep = ev[1], ev[2]
                if nid in self.down or self.epoch[nid] != ep:
                    self.dropped += 1
                    continue
                self.inbox[nid].append(ev[3])
                if nid not in self.waking:
                    self.waking.add(nid)
                    b = self.busy[nid]
                    self._push(b if b > t else t, ("wake", nid, ep))
            else:  # wake
                nid, ep = ev[1], ev[2]
                if self.epoch[nid] != ep or nid in self.down:
                    continue
                q = self.inbox[nid]
                item = q.popleft()
                self._cur, self._charge, self._out = nid, 0.0, []
                self._work(nid, item)
                end = t + self._charge
                out = self._out
                self._cur, self._charge = None, 0.0
                self.busy[nid] = end
                for dst, msg in out:
                    if dst is None:
                        delay, token = msg
                        self._push(end + delay, ("deliver", nid, self.epoch[nid], ("timer", token)))
                    else:
                        self._post(nid, dst, msg, end)
                if item[0] == "msg":
                    self.delivered += 1
                self.steps += 1
                for h in self.step_hooks:
                    h(nid)
                if q:
                    self._push(end, ("wake", nid, ep))
                else:
                    self.waking.discard(nid)
            if self._check:
                self._check = False
                if self.stop():
                    return True
            if max_steps is not None and self.steps >= max_steps:
                return False
        return self.stop() if self.stop is not None else False


class ShuffleNet:
    """No clock: each step delivers the head of a randomly chosen non-empty channel.

    Per-channel FIFO holds; everything else about the interleaving is random.
    Timers fire as if they were messages on a private channel. No faults.
    """

    def __init__(self, cfg, seed: int = 0):
        self.cfg = cfg
        self.rng = random.Random(seed)
        self.nodes: dict = {}
        self.chans: dict = {}
        self.active: list = []
        self.listeners: list = []
        self.step_hooks: list = []
        self.stop = None
        self._check = False
        self.steps = 0
        self.delivered = 0
        self.down: set = set()

    def now(self) -> float:
        return float(self.steps)

    def add(self, node_id, node) -> None:
        self.nodes[node_id] = node

    def _enq(self, key, item) -> None:
        q = self.chans.get(key)
        if q is None:
            q = self.chans[key] = deque()
        if not q:
            self.active.append(key)
        q.append(item)

    def send(self, src, dst, msg) -> None:
        if self.cfg.wire:
            msg = codec.decode(codec.encode(msg))
        self._enq((src, dst), ("msg", src, msg))

    def timer(self, node, delay, token) -> None:
        self._enq(("timer", node), ("timer", token))

    def inject(self, node_id, item, t=None) -> None:
        self._enq(("inject", node_id), item)

    def at(self, t, fn) -> None:
        fn()

    def charge(self, node, seconds) -> None:
        pass

    def event(self, kind, node, **kw) -> None:
        for fn in self.listeners:
            fn(float(self.steps), kind, node, kw)
        if kind == "done" and self.stop is not None:
            self._check = True

    def run(self, budget=float("inf"), max_steps=None) -> bool:
        act = self.active
        rnd = self.rng.randrange
        while act:
            n = rnd(len(act))
            key = act[n]
            q = self.chans[key]
            item = q.popleft()
            if not q:
                act[n] = act[-1]
                act.pop()
            dst = key[1]
            node = self.nodes[dst]
            k = item[0]
            if k == "msg":
                node.handle(item[1], item[2])
                self.delivered += 1
            elif k == "timer":
                node.on_timer(item[1])
            elif k == "boot":
                node.on_boot(item[1])
            self.steps += 1
            for h in self.step_hooks:
                h(dst)
            if self._check:
                self._check = False
                if self.stop():
                    return True
            if max_steps is not None and self.steps >= max_steps:
                return False
            if self.steps > budget:
                raise ScenarioTimeout(f"step budget {budget} exhausted")
        return self.stop() if self.stop is not None else False
