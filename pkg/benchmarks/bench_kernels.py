"""Time each kernel through its numba and pure-numpy implementation.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Sizes mirror one training batch at desk scale: 288 triples (32 items x 3
repetitions x 3 views) of 32x32 RGB images and 36-way overclustering heads.
"""

import argparse
import json
import time

import numpy as np

from fuzzyoc.kernels import implementations


def workloads(rng):
    n, k = 288, 36
    p = rng.dirichlet(np.ones(k), n)
    q = rng.dirichlet(np.ones(k), n)
    u, v = p[: n // 3], q[: n // 3]
    qq = u.T @ v / u.shape[0]
    P = 0.5 * (qq + qq.T)
    imgs = rng.random((n, 32, 32, 3), dtype=np.float32)
    crop = np.column_stack([rng.uniform(0, 12, n), rng.uniform(0, 12, n), rng.uniform(0.6, 1.0, n)])
    flip = rng.random(n) < 0.5
    bright = rng.uniform(0.75, 1.25, n)
    hue = rng.uniform(-18, 18, n)
    assign = rng.integers(0, k, 3800)
    truth = rng.integers(0, 6, 3800)
    return {
        "ce_rows": (p, q, 1e-12),
        "ce_inverse_rows": (p, q, 1e-6),
        "mi_from_joint": (P, 1e-12),
        "joint_mi": (u, v, 1e-12),
        "contingency": (assign, truth, k, 6),
        "augment_batch": (imgs, crop, flip, bright, hue),
        "sobel_batch": (imgs,),
    }


def bench(fn, args, repeat):
    fn(*args)  # compile / warm caches
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return float(np.median(times))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':18s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, a in workloads(rng).items():
        impl = implementations(name)
        t_nb = bench(impl["numba"], a, args.repeat)
        t_np = bench(impl["numpy"], a, args.repeat)
        rows.append({"kernel": name, "numba_s": t_nb, "numpy_s": t_np, "speedup": t_np / t_nb})
        print(f"{name:18s} {t_nb * 1e3:10.3f} {t_np * 1e3:10.3f} {t_np / t_nb:8.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
