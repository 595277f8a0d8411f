"""Cluster assembly, the Primary stub, metrics and the simulated run driver."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from . import codec
from . import model as m
from .model import PRIMARY, NodeId
from .sequencer import SequencingWorker
from .sim import ScenarioTimeout, ShuffleNet, SimNet
from .store import MemStorage
from .worker import ExecutionWorker


class InvariantViolation(AssertionError):
    pass


class Primary:
    """Stand-in for consensus: emits the committed sequence, optionally paced."""

    def __init__(self, commits, n_sequencers: int, interval: float = 0.0):
        self.commits = sorted(commits, key=lambda e: e.batch_idx)
        self.n_sequencers = n_sequencers
        self.interval = interval
        self.submit: dict = {}  # batch_idx -> commit time

    def schedule(self, net) -> None:
        for e in self.commits:
            t = e.batch_idx * self.interval

            def fire(e=e, t=t):
                self.submit[e.batch_idx] = t
                for s in range(self.n_sequencers):
                    net.send(PRIMARY, NodeId("S", s), m.Commit(e))
            net.at(t, fire)

    def handle(self, src, msg) -> None:
        pass


@dataclass
class Metrics:
    n_committed: int = 0
    submit: dict = field(default_factory=dict)  # tx index -> submit time
    executed: dict = field(default_factory=dict)  # tx index -> first execution time
    aborted: dict = field(default_factory=dict)  # tx index -> bool
    duration: float = 0.0

    def record_exec(self, t: float, idx: int, aborted: bool) -> None:
        if idx not in self.executed:
            self.executed[idx] = t
            self.aborted[idx] = aborted
        elif self.aborted[idx] != aborted:
            raise InvariantViolation(f"tx {idx} outcome differs between replicas")

    @property
    def n_executed(self) -> int:
        return sum(1 for a in self.aborted.values() if not a)

    @property
    def n_aborted(self) -> int:
        return sum(1 for a in self.aborted.values() if a)

    def latencies(self) -> list:
        return sorted(self.executed[i] - self.submit.get(i, 0.0) for i in self.executed)

    def percentile(self, p: float) -> float:
        lat = self.latencies()
        if not lat:
            return float("nan")
        k = min(len(lat) - 1, max(0, math.ceil(p / 100 * len(lat)) - 1))
        return lat[k]

    @property
    def mean_latency(self) -> float:
        lat = self.latencies()
        return sum(lat) / len(lat) if lat else float("nan")

    @property
    def throughput(self) -> float:
        if not self.executed:
            return 0.0
        t0 = min(self.submit.values()) if self.submit else 0.0
        span = max(self.executed.values()) - t0
        return len(self.executed) / span if span > 0 else float("inf")

    def summary(self) -> dict:
        return {
            "committed": self.n_committed,
            "executed": self.n_executed,
            "aborted": self.n_aborted,
            "throughput_tps": self.throughput,
            "latency_mean_s": self.mean_latency,
            "latency_p50_s": self.percentile(50),
            "latency_p99_s": self.percentile(99),
            "duration_s": self.duration,
        }

    def records(self):
        """Line-delimited per-transaction records followed by one summary record."""
        for i in sorted(self.executed):
            yield json.dumps({"type": "tx", "index": i, "submit": self.submit.get(i, 0.0),
                              "executed": self.executed[i], "aborted": self.aborted[i]})
        yield json.dumps({"type": "summary", **self.summary()})

    def table(self) -> str:
        rows = self.summary()
        w = max(len(k) for k in rows)
        out = []
        for k, v in rows.items():
            out.append(f"{k:<{w}}  {v:.6g}" if isinstance(v, float) else f"{k:<{w}}  {v}")
        return "\n".join(out)

    def write(self, path_jsonl: str, path_plot: str | None = None) -> None:
        with open(path_jsonl, "w") as f:
            for r in self.records():
                f.write(r + "\n")
        if path_plot:
            with open(path_plot, "w") as f:
                f.write("# throughput_tps latency_mean_s\n")
                f.write(f"{self.throughput:.6g} {self.mean_latency:.6g}\n")


@dataclass
class RunResult:
    digest: str
    row_digests: dict
    metrics: Metrics
    sim_time: float
    steps: int
    trace: list | None
    workers: dict
    net: object


class FaultDriver:
    """Feeds a parsed fault schedule into a SimNet, one action list per worker."""

    def __init__(self, net: SimNet, actions):
        self.net = net
        self.todo: dict = {}
        for a in actions:
            self.todo.setdefault(a[2], []).append(a)
        self.armed: dict = {}
        self.seen: dict = {}
        self.last: dict = {}
        self.log: list = []
        for node in sorted(self.todo):
            self._arm(node)

    def _arm(self, node) -> None:
        q = self.todo[node]
        if not q:
            self.armed.pop(node, None)
            return
        a = q.pop(0)
        self.armed[node] = a
        how, when = a[0], a[1]
        if how == "at":
            self.net.at(max(when, self.net.t), lambda: self._fire(node))
        elif how == "after":
            self.net.at(self.last.get(node, 0.0) + when, lambda: self._fire(node))
        else:
            self.seen[node] = 0

    def on_event(self, t, kind, node, kw) -> None:
        a = self.armed.get(node)
        if a is None or a[0] != "event" or a[1][0] != kind:
            return
        self.seen[node] += 1
        if self.seen[node] == a[1][1]:
            self.armed[node] = ("fired",) + a[1:]
            self.net.at(self.net.t, lambda: self._fire(node))

    def _fire(self, node) -> None:
        a = self.armed.get(node)
        if a is None:
            return
        what = a[3]
        self.last[node] = self.net.t
        self.log.append((self.net.t, str(node), what))
        if what == "crash":
            self.net.crash(node)
        else:
            self.net.recover(node)
        self._arm(node)

    def pending(self) -> bool:
        return any(a[0] != "event" for a in self.armed.values())


def build(cfg, wl, net, storages: dict | None = None):
    """Create Primary, sequencers and the worker grid on `net`; returns (primary, workers)."""
    n = wl.n
    storages = {} if storages is None else storages
    genesis = wl.genesis

    def make_worker(nid):
        st = storages.setdefault(nid, MemStorage())
        return ExecutionWorker(nid, cfg, net, storage=st, genesis=genesis, n_tx=n)

    primary = Primary(wl.commits, cfg.n_sequencers, cfg.commit_interval)
    net.add(PRIMARY, primary)
    for s in range(cfg.n_sequencers):
        st = storages.setdefault(NodeId("S", s), MemStorage())
        seq = SequencingWorker(s, cfg, net, st)
        for b in wl.batches:
            seq.ingest_batch(b)
        net.add(seq.id, seq)
    workers = {}
    for r in range(cfg.n_e):
        for s in range(cfg.n_shards):
            nid = NodeId("E", s, r)
            workers[nid] = make_worker(nid)
            net.add(nid, workers[nid])
    net.factory = make_worker
    for nid in sorted(workers):
        net.inject(nid, ("boot", False))
    primary.schedule(net)
    return primary, workers


def row_state(net, cfg, row: int):
    objs = []
    for s in range(cfg.n_shards):
        w = net.nodes.get(NodeId("E", s, row))
        if w is None:
            return None
        objs.extend(w.objects())
    return objs


def run_sim(cfg, wl, faults=(), seed: int | None = None, trace: bool = False,
            check_ckpts: bool = False, budget: float | None = None, hooks=(),
            observers=()) -> RunResult:
    """Run the whole engine on the simulator; raises ScenarioTimeout on a stall.

    ``hooks`` receive every trace event ``(t, kind, node, kw)``; ``observers``
    are called as ``fn(net, node_id)`` after every processed step.
    """
    seed = cfg.seed if seed is None else seed
    shuffle = cfg.transport == "shuffle"
    net = ShuffleNet(cfg, seed) if shuffle else SimNet(cfg, seed)
    n = wl.n
    metrics = Metrics(n_committed=n)
    log = [] if trace else None

    def listen(t, kind, node, kw):
        if kind == "exec":
            metrics.record_exec(t, kw["idx"], kw["aborted"])
        if log is not None:
            log.append((t, kind, str(node), kw))

    net.listeners.append(listen)
    for h in hooks:
        net.listeners.append(h)
    driver = None
    if faults:
        if shuffle:
            raise ValueError("fault schedules need the timed simulator")
        driver = FaultDriver(net, faults)
        net.listeners.append(driver.on_event)
    primary, workers = build(cfg, wl, net)

    def finished():
        if driver is not None and driver.pending():
            return False
        for nid, w in net.nodes.items():
            if nid.kind == "E" and w is not None and w.j < n:
                return False
        return True

    net.stop = finished
    if check_ckpts:
        c = cfg.c

        def ck(nid):
            w = net.nodes.get(nid)
            if nid.kind == "E" and w is not None and len(w.ckpts) > c:
                raise InvariantViolation(f"{nid} holds {len(w.ckpts)} checkpoints (c={c})")
        net.step_hooks.append(ck)
    for ob in observers:
        net.step_hooks.append(lambda nid, ob=ob: ob(net, nid))
    if n == 0:
        done = True
    else:
        b = budget if budget is not None else (cfg.budget if cfg.budget > 0 else float("inf"))
        done = net.run(budget=b)
    if not done:
        err = ScenarioTimeout(f"run stalled at t={getattr(net, 't', 0.0):.6g} with "
                              + ", ".join(f"{k}:j={w.j}" for k, w in sorted(net.nodes.items())
                                          if k.kind == "E" and w is not None))
        err.net = net
        raise err
    for idx, b in wl.batch_of.items():
        metrics.submit[idx] = primary.submit.get(b, 0.0)
    sim_time = net.now()
    metrics.duration = sim_time
    rows = {}
    for r in range(cfg.n_e):
        objs = row_state(net, cfg, r)
        if objs is not None:
            rows[r] = codec.state_digest(objs)
    digest = rows[min(rows)] if rows else ""
    return RunResult(digest, rows, metrics, sim_time, net.steps, log,
                     {k: v for k, v in net.nodes.items() if k.kind == "E"}, net)


def boot_from_checkpoint(cfg, blob: bytes, node: NodeId, env, storage=None, n_tx: int = 0) -> ExecutionWorker:
    """Disaster import: start a fresh replica from an externally supplied checkpoint."""
    from .replication import disaster_import
    shard, _, _, _ = disaster_import(blob)
    if shard != node.shard:
        raise ValueError(f"checkpoint is for shard {shard}, not {node.shard}")
    w = ExecutionWorker(node, cfg, env, storage=storage or MemStorage(), n_tx=n_tx)
    w.load_checkpoint(blob)
    return w


__all__ = ["Primary", "Metrics", "RunResult", "run_sim", "build", "FaultDriver",
           "InvariantViolation", "ScenarioTimeout", "boot_from_checkpoint"]
