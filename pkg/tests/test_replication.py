import random

import pytest

from helpers import cfg
from shardex import model as m
from shardex.harness import InvariantViolation, boot_from_checkpoint, run_sim
from shardex.model import NodeId
from shardex.replication import checkpoint_name, decode_checkpoint
from shardex.sim import parse_fault_schedule, random_fault_schedule
from shardex.store import MemStorage
from shardex.worker import ExecutionWorker
from shardex.workload import WorkloadSpec, generate_workload, sequential_oracle


class Quiet:
    """Minimal env: swallows sends, records events."""

    def __init__(self):
        self.events = []

    def send(self, src, dst, msg):
        pass

    def event(self, kind, node, **kw):
        self.events.append((kind, kw))

    def charge(self, node, s):
        pass

    def now(self):
        return 0.0


def _wl(n=600, seed=1, kind="mixed", bs=20):
    return generate_workload(WorkloadSpec(kind, tx_count=n, seed=seed, batch_size=bs))


def _kinds(res, kind):
    return [(t, node, kw) for t, k, node, kw in res.trace if k == kind]


def test_stability_needs_quorum_of_every_shard():
    c = cfg(n_shards=2, n_e=3, f_e=1, K=10)
    w = ExecutionWorker(NodeId("E", 0, 0), c, Quiet(), storage=MemStorage())
    chk = m.CheckpointedMessage
    assert not w.process_checkpointed(NodeId("E", 0, 0), chk(0, 10))
    assert not w.process_checkpointed(NodeId("E", 0, 1), chk(0, 10))  # shard 1 unheard
    assert not w.process_checkpointed(NodeId("E", 1, 2), chk(1, 10))  # one of shard 1
    assert not w.process_checkpointed(NodeId("E", 1, 2), chk(1, 10))  # duplicate sender
    assert w.stable == 0
    assert w.process_checkpointed(NodeId("E", 1, 0), chk(1, 10))
    assert w.stable == 10 and w.exec_limit == 10 + c.c * c.K
    assert not w.process_checkpointed(NodeId("E", 1, 1), chk(1, 10))  # stale now


@pytest.mark.parametrize("mode", ["base", "dynamic", "split"])
def test_checkpoint_count_bounded_without_faults(mode):
    c = cfg(n_shards=2, n_e=3, f_e=1, K=40, c=2, mode=mode)
    wl = _wl()
    res = run_sim(c, wl, check_ckpts=True, trace=True)
    assert res.digest == sequential_oracle(wl.genesis, wl.txs).digest
    stable = [kw["boundary"] for _, _, kw in _kinds(res, "stable")]
    assert max(stable) >= 560
    for w in res.workers.values():
        assert len(w.ckpts) <= c.c
        assert len(w.storage.list("ckpt-")) <= c.c
        # the last write may still be in flight when the run stops
        for b, complete in w.ckpts.items():
            if complete:
                assert decode_checkpoint(w.storage.read(checkpoint_name(w.shard, b)))[1] == b


def test_check_ckpts_hook_detects_excess():
    c = cfg(n_shards=1, n_e=3, f_e=1, K=40, c=2)
    seen = []

    def sneaky(t, kind, node, kw):
        # plant extra checkpoint entries on one replica: the hook must notice
        if kind == "checkpoint" and not seen:
            seen.append(1)
            res_holder["w"].ckpts.update({10**9: True, 10**9 + 1: True})
    res_holder = {}
    from shardex import harness
    orig = harness.build

    def build(*a, **k):
        p, ws = orig(*a, **k)
        res_holder["w"] = ws[NodeId("E", 0, 0)]
        return p, ws
    harness.build = build
    try:
        with pytest.raises(InvariantViolation):
            run_sim(c, _wl(300), check_ckpts=True, hooks=[sneaky])
    finally:
        harness.build = orig


def test_torn_checkpoint_discarded_on_reboot():
    c = cfg(n_shards=2, n_e=3, f_e=1, K=40)
    wl = _wl()
    faults = parse_fault_schedule("@ckpt_start:3 E1.1 crash\n+0.002 E1.1 recover\n")
    res = run_sim(c, wl, faults=faults, trace=True, check_ckpts=True)
    assert _kinds(res, "ckpt_discarded")
    reboot = [kw for _, node, kw in _kinds(res, "reboot") if node == "E1.1"]
    assert reboot and reboot[0]["boundary"] < 120
    assert res.digest == sequential_oracle(wl.genesis, wl.txs).digest
    assert len(set(res.row_digests.values())) == 1


def test_permanent_crash_survivors_finish():
    c = cfg(n_shards=3, n_e=3, f_e=1, K=40)
    wl = _wl(800, seed=2)
    faults = parse_fault_schedule("@checkpoint:2 E2.0 crash\n")
    res = run_sim(c, wl, faults=faults, trace=True)
    o = sequential_oracle(wl.genesis, wl.txs)
    assert res.digest == o.digest
    assert len(set(res.row_digests.values())) == 1
    got = {node for _, node, _ in _kinds(res, "reconfigured")} | \
          {node for _, node, _ in _kinds(res, "sync_done")}
    assert got & {"E0.0", "E1.0"}, "row 0 survivors never re-routed or synced"


def test_crash_during_sync_still_converges():
    c = cfg(n_shards=2, n_e=3, f_e=1, K=40)
    wl = _wl(800, seed=5)
    faults = parse_fault_schedule(
        "0.002 E1.0 crash\n+0.004 E1.0 recover\n"
        "@sync_start:1 E0.0 crash\n+0.003 E0.0 recover\n")
    res = run_sim(c, wl, faults=faults, trace=True)
    assert res.digest == sequential_oracle(wl.genesis, wl.txs).digest
    assert len(set(res.row_digests.values())) == 1


@pytest.mark.parametrize("seed", range(12))
def test_random_fault_schedules(seed):
    rng = random.Random(seed)
    c = cfg(n_shards=rng.randint(1, 3), n_e=3, f_e=1, K=rng.choice([20, 50]),
            mode=rng.choice(["base", "dynamic", "split"]), seed=seed)
    wl = _wl(rng.randint(200, 800), seed=seed)
    faults = parse_fault_schedule(random_fault_schedule(rng, c.n_shards, 3, 1, horizon=0.01))
    res = run_sim(c, wl, faults=faults, check_ckpts=True)
    o = sequential_oracle(wl.genesis, wl.txs)
    assert res.digest == o.digest and res.metrics.aborted == o.aborted
    assert len(set(res.row_digests.values())) == 1


def test_boot_from_checkpoint_matches_snapshot():
    c = cfg(n_shards=2, n_e=3, f_e=1, K=40)
    wl = _wl()
    res = run_sim(c, wl)
    w = res.workers[NodeId("E", 1, 2)]
    B = max(b for b, complete in w.ckpts.items() if complete)
    name = checkpoint_name(1, B)
    blob = w.storage.read(name)
    shard, B, _, objs = decode_checkpoint(blob)
    assert shard == 1
    fresh = boot_from_checkpoint(c, blob, NodeId("E", 1, 1), Quiet(), n_tx=wl.n)
    assert fresh.j == B and fresh.objects() == list(objs)
    with pytest.raises(ValueError):
        boot_from_checkpoint(c, blob, NodeId("E", 0, 1), Quiet())


def test_row_without_checkpoints_when_single_replica():
    res = run_sim(cfg(n_shards=2, K=40), _wl(200))
    for w in res.workers.values():
        assert not w.ckpt_on and w.storage.list("ckpt-") == []


@pytest.mark.parametrize("seed", [136, 148, 271, 302] + list(range(8)))
def test_pooled_vm_with_faults(seed):
    # a pool of VM lanes lets results come back out of order and across syncs
    rng = random.Random(seed)
    n_e = rng.choice([1, 3])
    S = rng.randint(1, 4)
    c = cfg(n_shards=S, n_e=n_e, f_e=(n_e - 1) // 2, K=rng.choice([20, 50]),
            mode=rng.choice(["base", "dynamic", "split"]), exec_lanes=rng.choice([2, 4, 8]),
            seed=seed, cost_exec=rng.choice([5e-6, 1e-4]))
    wl = generate_workload(WorkloadSpec("mixed", tx_count=rng.randint(100, 1500), seed=seed,
                                        batch_size=rng.randint(5, 60)))
    faults = parse_fault_schedule(random_fault_schedule(rng, S, 3, 1, horizon=0.01)) if n_e == 3 else ()
    res = run_sim(c, wl, faults=faults, check_ckpts=True)
    o = sequential_oracle(wl.genesis, wl.txs)
    assert res.digest == o.digest and res.metrics.aborted == o.aborted
    assert len(set(res.row_digests.values())) == 1

