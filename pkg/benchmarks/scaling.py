"""Compare a VM-only loop with 1, 2 and 4 shard processes on MergeAndFib.

    python benchmarks/scaling.py [--txs N] [--fib N] [--shards 1 2 4]
"""
import argparse
import os

from shardex.bench import scaling


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--txs", type=int, default=4000)
    ap.add_argument("--fib", type=int, default=5000)
    ap.add_argument("--shards", type=int, nargs="+", default=[1, 2, 4])
    a = ap.parse_args()
    r = scaling(tuple(a.shards), n=a.txs, fib=a.fib)
    print(f"cores        {os.cpu_count()}")
    print(f"vm-only      {r['vm_only']:10.1f} tx/s")
    prev = None
    for s in a.shards:
        ratio = f"  x{r[s] / prev:.2f}" if prev else ""
        print(f"{s} shard(s)   {r[s]:10.1f} tx/s{ratio}")
        prev = r[s]


if __name__ == "__main__":
    main()
