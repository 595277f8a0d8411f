"""Command line: ``run``, ``simulate``, ``oracle`` and ``check``.

Configuration comes from one JSON or YAML file (RunConfig keys plus an optional
``workload`` section with WorkloadSpec keys); flags override the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, RunConfig
from .sim import FaultScheduleError, ScenarioTimeout, load_fault_schedule
from .workload import WorkloadSpec, generate_workload, load_workload, save_workload, sequential_oracle

# flag -> RunConfig key
_CFG_FLAGS = {
    "shards": "n_shards", "replicas": "n_e", "faulty": "f_e", "c": "c", "K": "K",
    "sequencers": "n_sequencers", "mode": "mode", "transport": "transport",
    "latency_min": "latency_min", "latency_max": "latency_max", "faults": "fault_schedule",
    "budget": "budget", "seed": "seed", "batch_size": "batch_size",
    "commit_interval": "commit_interval",
}


def _read_file(path):
    with open(path) as f:
        text = f.read()
    if path.endswith((".yaml", ".yml")):
        import yaml
        return yaml.safe_load(text) or {}
    return json.loads(text)


def _coerce(v: str):
    try:
        return json.loads(v)
    except ValueError:
        return v


def build_config(a) -> tuple:
    d = _read_file(a.config) if a.config else {}
    if not isinstance(d, dict):
        raise ConfigError("config file must hold a mapping")
    wdict = dict(d.pop("workload", None) or {})
    for flag, key in _CFG_FLAGS.items():
        v = getattr(a, flag, None)
        if v is not None:
            d[key] = v
    for kv in a.set or ():
        k, sep, v = kv.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {kv!r}")
        if k.startswith("workload."):
            wdict[k[len("workload."):]] = _coerce(v)
        else:
            d[k] = _coerce(v)
    if "n_e" in d and "f_e" not in d:
        d["f_e"] = (int(d["n_e"]) - 1) // 2
    if "f_e" in d and "n_e" not in d:
        d["n_e"] = 2 * int(d["f_e"]) + 1
    cfg = RunConfig.from_dict(d)
    if a.workload:
        wdict["kind"] = a.workload
    if a.txs is not None:
        wdict["tx_count"] = a.txs
    if a.workload_seed is not None:
        wdict["seed"] = a.workload_seed
    wdict.setdefault("batch_size", cfg.batch_size)
    wdict.setdefault("n_sequencers", cfg.n_sequencers)
    kind = str(wdict.pop("kind", "transfers"))
    try:
        spec = WorkloadSpec.parse(kind, **wdict)
    except TypeError as e:
        raise ConfigError(f"bad workload section: {e}") from None
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg, spec


def _workload(a, cfg, spec):
    wl = load_workload(a.load_workload) if a.load_workload else generate_workload(spec)
    if a.save_workload:
        save_workload(wl, a.save_workload)
    return wl


def _execute(a, cfg, wl, trace=False):
    if cfg.transport == "socket":
        from .cluster import run_multiprocess, run_socket
        if a.in_process:
            return run_socket(cfg, wl, timeout=a.timeout)
        return run_multiprocess(cfg, wl, timeout=a.timeout)
    from .harness import run_sim
    faults = load_fault_schedule(cfg.fault_schedule) if cfg.fault_schedule else ()
    return run_sim(cfg, wl, faults=faults, trace=trace)


def _emit(a, res) -> None:
    print(res.metrics.table())
    print(f"digest  {res.digest}")
    if a.out:
        res.metrics.write(a.out, a.plot)
    elif a.plot:
        res.metrics.write("/dev/null", a.plot)


def cmd_run(a) -> int:
    cfg, spec = build_config(a)
    wl = _workload(a, cfg, spec)
    _emit(a, _execute(a, cfg, wl))
    return 0


def cmd_simulate(a) -> int:
    cfg, spec = build_config(a)
    if cfg.transport == "socket":
        raise ConfigError("simulate needs transport sim or shuffle")
    wl = _workload(a, cfg, spec)
    res = _execute(a, cfg, wl, trace=bool(a.trace))
    _emit(a, res)
    if a.trace:
        with open(a.trace, "w") as f:
            for t, kind, node, kw in res.trace:
                f.write(json.dumps({"t": t, "event": kind, "node": node, **kw}, default=str) + "\n")
    return 0


def cmd_oracle(a) -> int:
    cfg, spec = build_config(a)
    wl = _workload(a, cfg, spec)
    o = sequential_oracle(wl.genesis, wl.txs)
    print(f"transactions  {wl.n}")
    print(f"aborted       {o.n_aborted}")
    print(f"digest        {o.digest}")
    if a.out:
        with open(a.out, "w") as f:
            for i in sorted(o.aborted):
                f.write(json.dumps({"type": "tx", "index": i, "aborted": o.aborted[i]}) + "\n")
            f.write(json.dumps({"type": "summary", "digest": o.digest, "aborted": o.n_aborted}) + "\n")
    return 0


def cmd_check(a) -> int:
    cfg, spec = build_config(a)
    wl = _workload(a, cfg, spec)
    o = sequential_oracle(wl.genesis, wl.txs)
    res = _execute(a, cfg, wl)
    _emit(a, res)
    bad = []
    if res.digest != o.digest:
        bad.append(f"state digest {res.digest} != oracle {o.digest}")
    if len(set(res.row_digests.values())) > 1:
        bad.append("replica rows disagree")
    diff = [i for i in o.aborted if res.metrics.aborted.get(i) != o.aborted[i]]
    if diff:
        bad.append(f"{len(diff)} abort flags differ, first at tx {min(diff)}")
    for b in bad:
        print("MISMATCH", b)
    print("check", "FAILED" if bad else "OK")
    return 1 if bad else 0


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shardex", description="sharded deterministic execution engine")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name, fn, text in (("run", cmd_run, "benchmark run (sim or sockets)"),
                           ("simulate", cmd_simulate, "deterministic simulation with a fault schedule"),
                           ("oracle", cmd_oracle, "sequential reference execution"),
                           ("check", cmd_check, "run, then diff against the oracle")):
        p = sub.add_parser(name, help=text)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="JSON or YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key; workload.KEY sets a workload key")
        p.add_argument("--workload", help="transfers | fib:N | counters:N | mixed")
        p.add_argument("--txs", type=int, help="transaction count")
        p.add_argument("--workload-seed", type=int)
        p.add_argument("--load-workload", metavar="PREFIX", help="read PREFIX.genesis/.batches/.commits")
        p.add_argument("--save-workload", metavar="PREFIX")
        p.add_argument("--shards", type=int)
        p.add_argument("--replicas", type=int, help="replicas per shard (n_e)")
        p.add_argument("--faulty", type=int, help="tolerated faults per shard (f_e)")
        p.add_argument("-c", type=int, dest="c", help="max checkpoints held")
        p.add_argument("-K", type=int, dest="K", help="checkpoint interval")
        p.add_argument("--sequencers", type=int)
        p.add_argument("--mode", choices=["base", "dynamic", "split"])
        p.add_argument("--transport", choices=["sim", "shuffle", "socket"])
        p.add_argument("--latency-min", type=float)
        p.add_argument("--latency-max", type=float)
        p.add_argument("--faults", metavar="FILE", help="fault schedule file")
        p.add_argument("--budget", type=float, help="simulated seconds before giving up")
        p.add_argument("--seed", type=int, help="latency / interleaving seed")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--commit-interval", type=float)
        p.add_argument("--in-process", action="store_true", help="socket transport without child processes")
        p.add_argument("--timeout", type=float, default=600.0, help="wall-clock limit for socket runs")
        p.add_argument("--out", metavar="FILE", help="line-delimited metrics records")
        p.add_argument("--plot", metavar="FILE", help="two-column throughput/latency data file")
        if name == "simulate":
            p.add_argument("--trace", metavar="FILE", help="write the event trace as JSON lines")
    return ap


def main(argv=None) -> int:
    a = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.WARNING)
    try:
        return a.fn(a)
    except (ConfigError, FaultScheduleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ScenarioTimeout as e:
        print(f"timeout: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
