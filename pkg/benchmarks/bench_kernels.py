"""Compare the compiled and pure-Python attention kernels.

Usage: python3 benchmarks/bench_kernels.py [--sizes 1000,4000,16000] [--repeats 5]
"""

import argparse
import statistics
import time

import numpy as np
from threadpoolctl import threadpool_limits

from caprmil import kernels
from caprmil.attention import init_attention
from caprmil.numerics.rng import Rng


def time_backend(name, args, repeats):
    with kernels.backend_scope(name):
        times = []
        for _ in range(repeats + 1):
            t0 = time.perf_counter()
            w, tok, _ = kernels.assign_aggregate(*args)
            kernels.broadcast(w, tok)
            times.append(time.perf_counter() - t0)
    return statistics.median(times[1:])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="1000,4000,16000")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--heads", type=int, default=8)
    ap.add_argument("--clusters", type=int, default=4)
    ap.add_argument("--d-model", type=int, default=128)
    args = ap.parse_args()
    backends = kernels.available()
    print(f"backends: {', '.join(backends)}")
    print(f"{'N':>7} {'dtype':>8} " + " ".join(f"{b:>10}" for b in backends) + "   speedup")
    rng = Rng(0)
    p = init_attention(args.d_model, args.heads, args.clusters, rng.spawn("init"))
    inner = p["w_x"].shape[1]
    with threadpool_limits(limits=1):
        for n in (int(s) for s in args.sizes.split(",")):
            for dtype in (np.float32, np.float64):
                x = rng.spawn("x", n).normal((n, inner), dtype=dtype)
                f = rng.spawn("f", n).normal((n, inner), dtype=dtype)
                call = (x, f, p["w_cluster"].astype(dtype), p["b_cluster"].astype(dtype),
                        p["tau"].astype(dtype), args.heads, 1e-8)
                t = {b: time_backend(b, call, args.repeats) for b in backends}
                speed = t["python"] / t["compiled"] if "compiled" in t else 1.0
                cols = " ".join(f"{t[b] * 1e3:>8.2f}ms" for b in backends)
                print(f"{n:>7} {np.dtype(dtype).name:>8} {cols}   {speed:6.2f}x")


if __name__ == "__main__":
    main()
