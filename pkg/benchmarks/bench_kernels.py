"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--frames 400] [--batch 16] [--hidden 32] [--repeat 5]

Each kernel is run once per backend to compile and to check that both agree,
then timed over ``--repeat`` calls; the best time is reported.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from dcsep import cluster
from dcsep.nnet import kernels


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def lstm_cases(T, B, H, rng):
    xproj = rng.normal(size=(T, B, 4 * H))
    wh = rng.uniform(-0.1, 0.1, size=(H, 4 * H))
    rmask = np.ones((B, H))
    gh = rng.normal(size=(T, B, H))
    state = {}

    def fwd(backend):
        state[backend] = kernels.lstm_forward(xproj, wh, rmask, backend)
        return state[backend][0]

    def bwd(backend):
        h, c, gates, tc = state[backend]
        return kernels.lstm_backward(gh, gates, c, tc, h, wh, rmask, backend)[0]

    return [("lstm_forward", fwd), ("lstm_backward", bwd)]


def cluster_cases(N, D, C, iters, rng):
    V = rng.normal(size=(N, D))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    w = (rng.random(N) > 0.3).astype(float)
    cfg = cluster.ClusterConfig(n_clusters=C, alpha=5.0, iters=iters, seed=0)
    g = rng.normal(size=(N, C))
    state = {}

    def fwd(backend):
        post, state[backend] = cluster.soft_kmeans_unfold(V, w, cfg, backend=backend)
        return post.gamma

    def bwd(backend):
        return cluster.soft_kmeans_backward(g, state[backend])

    return [("soft_kmeans_forward", fwd), ("soft_kmeans_backward", bwd)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=400)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--bins", type=int, default=129)
    ap.add_argument("--dim", type=int, default=10)
    ap.add_argument("--sources", type=int, default=2)
    ap.add_argument("--iters", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed")

    rng = np.random.default_rng(0)
    cases = lstm_cases(args.frames, args.batch, args.hidden, rng)
    # one utterance-sized clustering problem: every TF bin of a segment
    cases += cluster_cases(args.frames * args.bins, args.dim, args.sources, args.iters, rng)

    print(f"{'kernel':<22}{'numpy_s':>10}{'numba_s':>10}{'speedup':>9}{'max_abs_diff':>14}")
    for name, fn in cases:
        ref = fn("numpy")
        diff = float(np.max(np.abs(fn("numba") - ref)))
        t_np = best_time(lambda: fn("numpy"), args.repeat)
        t_nb = best_time(lambda: fn("numba"), args.repeat)
        print(f"{name:<22}{t_np:>10.4f}{t_nb:>10.4f}{t_np / t_nb:>9.2f}{diff:>14.2e}")


if __name__ == "__main__":
    main()
