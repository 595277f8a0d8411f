"""Running the engine over real sockets, in one process or one process per worker.

The driver hosts the Primary stub and the sequencers; execution workers report
their final shard state and per-transaction outcomes back to the driver with a
``Report`` once their watermark covers the whole workload, then wait for
``Stop``.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import tempfile
import threading
import time

from . import codec
from . import model as m
from .config import RunConfig
from .harness import Metrics, Primary, RunResult
from .model import PRIMARY, NodeId
from .net import SocketNet
from .sequencer import SequencingWorker
from .sim import ScenarioTimeout
from .store import MemStorage
from .worker import ExecutionWorker
from .workload import load_workload, save_workload


def _worker_ids(cfg):
    return [NodeId("E", s, r) for r in range(cfg.n_e) for s in range(cfg.n_shards)]


def _attach_reporter(net: SocketNet, w: ExecutionWorker) -> None:
    outcomes = []
    sent = []

    def on_event(t, kind, node, kw):
        if node != w.id:
            return
        if kind == "exec":
            outcomes.append((kw["idx"], bool(kw["aborted"]), int(time.time() * 1e6)))
        elif kind == "done" and not sent:
            sent.append(True)
            blob = codec.encode_objects(w.objects())
            net.send(w.id, PRIMARY, m.Report(w.shard, w.row, w.j, blob, tuple(outcomes)))

    net.listeners.append(on_event)


class _Driver:
    """Primary stub plus report collection."""

    def __init__(self, cfg, wl, net):
        self.cfg = cfg
        self.wl = wl
        self.net = net
        self.primary = Primary(wl.commits, cfg.n_sequencers, cfg.commit_interval)
        self.reports: dict = {}
        self.all_in = threading.Event()
        self.expect = set(_worker_ids(cfg))
        net.add(PRIMARY, self)
        for s in range(cfg.n_sequencers):
            seq = SequencingWorker(s, cfg, net, MemStorage())
            for b in wl.batches:
                seq.ingest_batch(b)
            net.add(seq.id, seq)

    def handle(self, src, msg) -> None:
        if type(msg) is m.Report:
            self.reports[src] = msg
            if self.expect <= set(self.reports):
                self.all_in.set()

    def go(self) -> None:
        self.wall0 = time.time()
        self.primary.schedule(self.net)

    def collect(self, timeout: float) -> RunResult:
        if not self.all_in.wait(timeout):
            missing = sorted(str(x) for x in self.expect - set(self.reports))
            raise ScenarioTimeout(f"no report from {', '.join(missing)} within {timeout:g}s")
        wl, cfg = self.wl, self.cfg
        metrics = Metrics(n_committed=wl.n)
        for rep in self.reports.values():
            for idx, ab, us in rep.outcomes:
                metrics.record_exec(us / 1e6 - self.wall0, idx, ab)
        for idx, b in wl.batch_of.items():
            metrics.submit[idx] = self.primary.submit.get(b, b * cfg.commit_interval)
        rows = {}
        for r in range(cfg.n_e):
            objs = []
            for s in range(cfg.n_shards):
                objs.extend(codec.decode_objects(self.reports[NodeId("E", s, r)].blob))
            rows[r] = codec.state_digest(objs)
        metrics.duration = max(metrics.executed.values(), default=0.0)
        return RunResult(rows[0], rows, metrics, metrics.duration, 0, None, {}, self.net)

    def stop_all(self) -> None:
        for nid in sorted(self.expect):
            self.net.send(PRIMARY, nid, m.Stop())
        self.net.flush(2.0)


def run_socket(cfg, wl, timeout: float = 120.0) -> RunResult:
    """Every node in this process, each on its own loopback port and thread."""
    net = SocketNet(cfg)
    net.handlers[m.Stop] = lambda host, src, msg: None
    drv = _Driver(cfg, wl, net)
    for nid in _worker_ids(cfg):
        w = ExecutionWorker(nid, cfg, net, storage=MemStorage(), genesis=wl.genesis, n_tx=wl.n)
        net.add(nid, w)
        _attach_reporter(net, w)
        net.inject(nid, ("boot", False))
    net.start()
    try:
        if wl.n == 0:
            drv.all_in.set()
        drv.go()
        return drv.collect(timeout)
    finally:
        net.close()


def run_multiprocess(cfg, wl, timeout: float = 600.0, workdir: str | None = None) -> RunResult:
    """One OS process per execution worker, the driver in this process."""
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="shardex-")
        workdir = tmp.name
    prefix = os.path.join(workdir, "wl")
    save_workload(wl, prefix)
    cfg_path = os.path.join(workdir, "config.json")
    with open(cfg_path, "w") as f:
        json.dump(cfg.to_dict(), f)
    procs = {}
    net = SocketNet(cfg)
    try:
        for nid in _worker_ids(cfg):
            procs[nid] = subprocess.Popen(
                [sys.executable, "-m", "shardex.cluster", "worker", "--node", str(nid),
                 "--config", cfg_path, "--workload", prefix],
                stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True)
        for nid, p in procs.items():
            line = p.stdout.readline().split()
            if len(line) != 2 or line[0] != "PORT":
                raise RuntimeError(f"worker {nid} failed to start")
            net.addrs[nid] = ("127.0.0.1", int(line[1]))
        drv = _Driver(cfg, wl, net)
        table = {str(k): list(v) for k, v in net.addrs.items()}
        for p in procs.values():
            p.stdin.write(json.dumps(table) + "\n")
            p.stdin.flush()
        net.start()
        if wl.n == 0:
            drv.all_in.set()
        drv.go()
        res = drv.collect(timeout)
        drv.stop_all()
        for p in procs.values():
            p.wait(10)
        return res
    finally:
        net.close()
        for p in procs.values():
            if p.poll() is None:
                p.kill()
        if tmp is not None:
            tmp.cleanup()


def worker_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="shardex.cluster worker")
    ap.add_argument("--node", required=True)
    ap.add_argument("--config", required=True)
    ap.add_argument("--workload", required=True)
    a = ap.parse_args(argv)
    cfg = RunConfig.load(a.config)
    wl = load_workload(a.workload)
    nid = NodeId.parse(a.node)
    net = SocketNet(cfg)
    stop = threading.Event()
    w = ExecutionWorker(nid, cfg, net, storage=MemStorage(), genesis=wl.genesis, n_tx=wl.n)
    host = net.add(nid, w)
    net.handlers[m.Stop] = lambda h, src, msg: stop.set()
    _attach_reporter(net, w)
    print("PORT", host.port, flush=True)
    table = json.loads(sys.stdin.readline())
    for k, v in table.items():
        net.addrs[NodeId.parse(k)] = (v[0], int(v[1]))
    net.inject(nid, ("boot", False))
    net.start()
    stop.wait()
    net.flush(2.0)
    net.close()
    return 0


if __name__ == "__main__":
    if len(sys.argv) > 1 and sys.argv[1] == "worker":
        sys.exit(worker_main(sys.argv[2:]))
    sys.exit("usage: python -m shardex.cluster worker --node E0.0 --config F --workload PREFIX")
