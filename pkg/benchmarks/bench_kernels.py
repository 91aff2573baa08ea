"""Time the numba and numpy kernel paths against each other.

    python benchmarks/bench_kernels.py [--repeat 3] [--sizes 6 7 8]

Each path runs in its own subprocess so the env flag is read fresh and JIT
warm-up is excluded (one untimed call first).
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

INSTANCES = {
    6: (364, (3, 8, 25, 50, 75, 100)),
    7: (812, (2, 5, 9, 13, 27, 44, 61)),
    8: (517, (3, 7, 11, 19, 23, 40, 58, 91)),
}


def _child(sizes, repeat):
    import numpy as np

    from asyncthink import kernels
    from asyncthink.tasks.countdown import CountdownInstance, enumerate_solutions

    out = {"path": kernels.active_path()}
    for n in sizes:
        target, nums = INSTANCES[n]
        inst = CountdownInstance(target, nums)
        enumerate_solutions(inst)
        best = float("inf")
        for _ in range(repeat):
            t0 = time.perf_counter()
            keys = enumerate_solutions(inst)
            best = min(best, time.perf_counter() - t0)
        out[f"enumerate_{n}"] = (best, len(keys))

    rng = np.random.default_rng(0)
    starts = rng.integers(1, 50_000, 200_000)
    ends = starts + rng.integers(0, 500, starts.size)
    kernels.interval_counts(starts, ends, 50_000)
    t0 = time.perf_counter()
    for _ in range(repeat):
        kernels.interval_counts(starts, ends, 50_000)
    out["interval_counts"] = ((time.perf_counter() - t0) / repeat, 0)
    print(json.dumps(out))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--sizes", type=int, nargs="+", default=[6, 7, 8])
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        _child(args.sizes, args.repeat)
        return

    results = {}
    for flag in ("0", "1"):
        env = dict(os.environ, ASYNCTHINK_DISABLE_NUMBA=flag)
        cmd = [sys.executable, __file__, "--child", "--repeat", str(args.repeat), "--sizes", *map(str, args.sizes)]
        res = json.loads(subprocess.run(cmd, env=env, check=True, capture_output=True, text=True).stdout)
        results[res.pop("path")] = res

    if "numba" not in results:
        print("numba is not installed; only the numpy path was timed")
    paths = list(results)
    print(f"{'kernel':<18}" + "".join(f"{p:>12}" for p in paths) + ("     speedup" if len(paths) == 2 else ""))
    for name in results[paths[0]]:
        times = [results[p][name][0] for p in paths]
        counts = {results[p][name][1] for p in paths}
        assert len(counts) == 1, f"{name}: paths disagree on result size {counts}"
        line = f"{name:<18}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times)
        if len(times) == 2:
            line += f"{times[1] / times[0]:>11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
