"""Compute-bound scaling measurement: VM-only loop vs multi-process shard counts."""
from __future__ import annotations

import time

from .config import RunConfig
from .workload import WorkloadSpec, generate_workload, run_one


def vm_only_tps(wl) -> float:
    """Single-threaded loop over the VM alone: no scheduling, no messaging."""
    state = {o.oid: o for o in wl.genesis}
    t0 = time.perf_counter()
    for tx in wl.txs:
        run_one(tx, state)
    return len(wl.txs) / (time.perf_counter() - t0)


def scaling(shards=(1, 2, 4), n: int = 3000, fib: int = 5000, seed: int = 0,
            batch_size: int = 100, timeout: float = 600.0) -> dict:
    """Throughput of MergeAndFib{fib} per shard count, plus the VM-only reference."""
    from .cluster import run_multiprocess
    wl = generate_workload(WorkloadSpec(kind="fib", fib_n=fib, tx_count=n, seed=seed,
                                        batch_size=batch_size))
    out = {"vm_only": vm_only_tps(wl)}
    for s in shards:
        cfg = RunConfig(n_shards=s, batch_size=batch_size, transport="socket").validate()
        out[s] = run_multiprocess(cfg, wl, timeout=timeout).metrics.throughput
    return out
