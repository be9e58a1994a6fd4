"""Compare the numba and pure-numpy paths of the hot kernels.

Both implementations live side by side in ``gaplab._kernels``, so one process
can time them directly and check that they agree.  Run with

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Numba compile time is excluded (one warm-up call per kernel).
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from gaplab import _kernels as K


def _inputs(seed: int = 0):
    rng = np.random.default_rng(seed)
    words = [f"tok{i}".encode() for i in rng.integers(0, 5000, size=400)]
    buf = np.frombuffer(b"".join(words), dtype=np.uint8)
    offsets = np.concatenate([[0], np.cumsum([len(w) for w in words])]).astype(np.int64)
    n = 400
    rewards = rng.normal(size=n)
    values = rng.normal(size=n)
    next_values = np.append(values[1:], 0.0)
    dones = (rng.random(n) < 0.01).astype(np.float64)
    logits = rng.normal(size=1005)
    return {
        "hash_tokens": ((buf, offsets, 256), "_hash_tokens"),
        "gae": ((rewards, values, next_values, dones, 0.99, 0.95), "_gae"),
        "discounted": ((rewards, 0.99), "_discounted"),
        "sample": ((logits, 0.37), "_sample"),
    }


def run(repeat: int = 200) -> dict:
    results = {}
    for name, (args, stem) in _inputs().items():
        py = getattr(K, stem + "_py")
        row = {"numpy_us": 1e6 * min(timeit.repeat(lambda: py(*args), number=1, repeat=repeat))}
        ref = py(*args)
        if K.HAS_NUMBA:
            nb = getattr(K, stem + "_nb")
            out = nb(*args)  # warm-up and compile
            row["numba_us"] = 1e6 * min(timeit.repeat(lambda: nb(*args), number=1, repeat=repeat))
            row["speedup"] = row["numpy_us"] / row["numba_us"]
            row["max_abs_diff"] = float(np.max(np.abs(np.asarray(out, dtype=np.float64) - np.asarray(ref, dtype=np.float64))))
        results[name] = row
    return results


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200, help="timing repetitions (best is reported)")
    ap.add_argument("--json", default=None, help="also write results to this file")
    args = ap.parse_args(argv)

    if not K.HAS_NUMBA:
        print("numba unavailable or disabled; timing the numpy path only", file=sys.stderr)
    res = run(args.repeat)
    print(f"{'kernel':<12} {'numpy us':>10} {'numba us':>10} {'speedup':>8} {'max diff':>10}")
    for name, row in res.items():
        nb = row.get("numba_us")
        print(
            f"{name:<12} {row['numpy_us']:>10.1f} "
            + (f"{nb:>10.2f} {row['speedup']:>8.1f} {row['max_abs_diff']:>10.2e}" if nb is not None else f"{'-':>10} {'-':>8} {'-':>10}")
        )
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(res, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
