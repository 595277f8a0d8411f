"""Workload generators and the sequential reference executor."""
from __future__ import annotations

import random
import re
from dataclasses import dataclass, field

from . import codec, vm
from .model import (Batch, Coin, CommitEntry, Counter, DynamicChildAccess, IncrementCounter,
                    MergeAndFib, Object, Table, Transfer, h256, make_tx, sequencer_of)


@dataclass
class WorkloadSpec:
    kind: str = "transfers"  # transfers | fib | counters | mixed
    tx_count: int = 1000
    object_count: int = 0  # counters: number of counters (tx_count = object_count * per)
    seed: int = 0
    fib_n: int = 0
    txs_per_counter: int = 10
    batch_size: int = 100
    n_sequencers: int = 1

    @staticmethod
    def parse(text: str, **kw) -> "WorkloadSpec":
        """Accepts ``transfers``, ``fib:5000`` / ``Fib{5000}``, ``counters:10`` / ``Counters{10}``, ``mixed``."""
        mt = re.fullmatch(r"\s*([A-Za-z]+)\s*(?:[:{]\s*(\d+)\s*}?)?\s*", text)
        if not mt:
            raise ValueError(f"bad workload {text!r}")
        kind, arg = mt.group(1).lower(), mt.group(2)
        spec = WorkloadSpec(kind=kind, **kw)
        if kind == "fib":
            spec.fib_n = int(arg or 0)
        elif kind == "counters":
            spec.txs_per_counter = int(arg or spec.txs_per_counter)
        elif kind not in ("transfers", "mixed"):
            raise ValueError(f"unknown workload kind {kind!r}")
        return spec


@dataclass
class Workload:
    genesis: tuple
    batches: list
    commits: list
    spec: WorkloadSpec | None = None
    batch_of: dict = field(default_factory=dict)  # tx index -> batch index

    @property
    def txs(self) -> list:
        return [tx for b in self.batches for tx in b.txs]

    @property
    def n(self) -> int:
        return sum(len(b.txs) for b in self.batches)


def _oid(seed: int, tag: str, k: int) -> bytes:
    return h256(b"gen", seed.to_bytes(8, "big"), tag.encode(), k.to_bytes(8, "big"))


def _rebuild(tx, nonce):
    ro = tx.read_set
    wo = tx.write_set
    return make_tx(tx.index, tx.entry, ro, wo, tx.blind, nonce=nonce)


def package(genesis, txs, batch_size: int, n_sequencers: int, spec=None) -> Workload:
    """Cut txs into batches; batch b is steered to sequencer b mod n_sequencers."""
    batches, commits, batch_of = [], [], {}
    for b, start in enumerate(range(0, len(txs), max(1, batch_size))):
        chunk = list(txs[start:start + batch_size])
        want = b % n_sequencers
        batch = Batch.of(chunk)
        attempt = 0
        while sequencer_of(batch.batch_id, n_sequencers) != want:
            attempt += 1
            chunk[0] = _rebuild(chunk[0], chunk[0].index | (attempt << 32))
            batch = Batch.of(chunk)
        batches.append(batch)
        commits.append(CommitEntry(b, batch.batch_id))
        for tx in chunk:
            batch_of[tx.index] = b
    return Workload(tuple(genesis), batches, commits, spec, batch_of)


def generate_workload(spec: WorkloadSpec) -> Workload:
    rng = random.Random(spec.seed)
    k, n = spec.kind, spec.tx_count
    if k in ("transfers", "fib"):
        coins = [Object(_oid(spec.seed, "coin", i), 0, None, Coin(rng.randint(100, 1000))) for i in range(2 * n)]
        txs = []
        for i in range(n):
            a, b = coins[2 * i].oid, coins[2 * i + 1].oid
            if k == "transfers":
                e = Transfer(a, b, rng.randint(1, 100))
            else:
                e = MergeAndFib(a, b, spec.fib_n)
            txs.append(make_tx(i + 1, e))
        genesis = coins
    elif k == "counters":
        per = spec.txs_per_counter
        count = spec.object_count or max(1, n // per)
        genesis = [Object(_oid(spec.seed, "ctr", i), 0, None, Counter(0)) for i in range(count)]
        seq = [c for c in range(count) for _ in range(per)]
        rng.shuffle(seq)
        txs = [make_tx(i + 1, IncrementCounter(), write=[genesis[c].oid]) for i, c in enumerate(seq)]
    elif k == "mixed":
        genesis, txs = _mixed(spec.seed, n, rng)
    else:
        raise ValueError(f"unknown workload kind {k!r}")
    return package(genesis, txs, spec.batch_size, spec.n_sequencers, spec)


def _mixed(seed: int, n: int, rng: random.Random):
    """Random conflicting mix of all four entry functions, including failing ones."""
    coins = [_oid(seed, "coin", i) for i in range(max(4, n // 8))]
    counters = [_oid(seed, "ctr", i) for i in range(max(3, n // 10))]
    tables = [_oid(seed, "tbl", i) for i in range(max(1, n // 60))]
    ghosts = [_oid(seed, "ghost", i) for i in range(3)]
    genesis = [Object(c, 0, None, Coin(rng.randint(0, 200))) for c in coins]
    genesis += [Object(c, 0, None, Counter(rng.randint(0, 5))) for c in counters]
    for t_i, t in enumerate(tables):
        entries = {}
        for key in range(rng.randint(0, 3)):
            cid = _oid(seed, f"child{t_i}", key)
            entries[key] = cid
            genesis.append(Object(cid, 0, t, Counter(0)))
        if rng.random() < 0.5:
            entries[100] = _oid(seed, f"dangling{t_i}", 0)  # points at nothing
        genesis.append(Object(t, 0, None, Table(tuple(sorted(entries.items())))))
    fresh = 0
    txs = []
    for i in range(1, n + 1):
        r = rng.random()
        if r < 0.3:
            src, dst = rng.choice(coins), rng.choice(coins)
            if rng.random() < 0.05:
                src = rng.choice(ghosts)
            elif rng.random() < 0.03:
                dst = rng.choice(counters)
            tx = make_tx(i, Transfer(src, dst, rng.randint(0, 150)))
        elif r < 0.4:
            tx = make_tx(i, MergeAndFib(rng.choice(coins), rng.choice(coins), rng.randint(0, 30)))
        elif r < 0.75:
            write = set(rng.sample(counters, rng.randint(1, 2)))
            blind = set()
            if rng.random() < 0.3:
                if rng.random() < 0.5:
                    fresh += 1
                    b = _oid(seed, "fresh", fresh)
                    counters.append(b)  # later txs may use it
                else:
                    b = rng.choice(counters + coins)
                if b not in write:
                    blind.add(b)
            read = set()
            for _ in range(rng.randint(0, 2)):
                x = rng.random()
                c = rng.choice(coins) if x < 0.05 else rng.choice(ghosts) if x < 0.1 else rng.choice(counters)
                if c not in write and c not in blind:
                    read.add(c)
            tx = make_tx(i, IncrementCounter(), read=read, write=write | blind, blind=blind)
        else:
            t = rng.choice(tables) if rng.random() > 0.05 else rng.choice(counters)
            x = rng.random()
            key = rng.randint(0, 3) if x < 0.6 else rng.randint(4, 9) if x < 0.9 else 100
            tx = make_tx(i, DynamicChildAccess(t, key))
        txs.append(tx)
    return genesis, txs


# ---- reference execution ----

@dataclass
class OracleResult:
    objects: dict
    aborted: dict  # tx index -> bool

    @property
    def digest(self) -> str:
        return codec.state_digest(self.objects.values())

    @property
    def n_aborted(self) -> int:
        return sum(self.aborted.values())


def run_one(tx, state: dict):
    """Execute tx against `state` in place; returns (aborted, final tx)."""
    while True:
        objs = {o: state.get(o) for o in tx.read_set | tx.write_set}
        if any(objs[o] is None for o in tx.read_set) or \
                any(objs[o] is None for o in tx.write_set if o not in tx.blind):
            return True, tx
        try:
            res = vm.execute(tx, objs)
        except vm.VMError:
            return True, tx
        if isinstance(res, vm.ChildDiscovered):
            tx = tx.augmented(res.oid)
            continue
        for o in res.mutated:
            state[o.oid] = o
        for oid in res.deleted:
            state.pop(oid, None)
        return False, tx


def sequential_oracle(genesis, txs) -> OracleResult:
    state = {o.oid: o for o in genesis}
    aborted = {}
    for tx in txs:
        aborted[tx.index], _ = run_one(tx, state)
    return OracleResult(state, aborted)


# ---- files ----

def save_workload(wl: Workload, prefix: str) -> None:
    with open(prefix + ".genesis", "wb") as f:
        f.write(codec.encode_objects(wl.genesis))
    with open(prefix + ".batches", "wb") as f:
        f.write(codec.encode_seq(wl.batches))
    with open(prefix + ".commits", "wb") as f:
        f.write(codec.encode_seq(wl.commits))


def load_workload(prefix: str) -> Workload:
    with open(prefix + ".genesis", "rb") as f:
        genesis = codec.decode_objects(f.read())
    with open(prefix + ".batches", "rb") as f:
        batches = codec.decode_seq(f.read())
    with open(prefix + ".commits", "rb") as f:
        commits = codec.decode_seq(f.read())
    by_id = {b.batch_id: b for b in batches}
    batch_of = {}
    for e in commits:
        for tx in by_id[e.batch_id].txs:
            batch_of[tx.index] = e.batch_idx
    ordered = [by_id[e.batch_id] for e in sorted(commits, key=lambda e: e.batch_idx)]
    return Workload(tuple(genesis), ordered, commits, None, batch_of)
