"""Time the compiled kernels against the NumPy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]
"""
import argparse
import json
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from mercatran.kernels import _pykernels, compiled


def cases(rng):
    x = rng.standard_normal((4096, 22)).astype(np.float32)
    g = rng.standard_normal((4096, 22)).astype(np.float32)
    ln_x = rng.standard_normal((8192, 64)).astype(np.float32)
    gamma = np.ones(64, dtype=np.float32)
    beta = np.zeros(64, dtype=np.float32)
    emb = rng.standard_normal((20000, 64)).astype(np.float32)
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    q = emb[0].astype(np.float64)
    rank = np.arange(len(emb), dtype=np.int64)

    def ln_bwd_args(k):
        _, xhat, rstd = k.layer_norm_fwd(ln_x, gamma, beta, 1e-5)
        return (ln_x, xhat, rstd, gamma)

    return [
        ("softmax_rows_fwd [4096x22]", lambda k: (x,), "softmax_rows_fwd"),
        ("softmax_rows_bwd [4096x22]", lambda k: (x, g), "softmax_rows_bwd"),
        ("layer_norm_fwd [8192x64]", lambda k: (ln_x, gamma, beta, 1e-5), "layer_norm_fwd"),
        ("layer_norm_bwd [8192x64]", ln_bwd_args, "layer_norm_bwd"),
        ("topk_scan [20000x64, k=20]", lambda k: (emb, q, rank, 20), "topk_scan"),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()
    ext = compiled()
    rng = np.random.default_rng(0)
    rows = []
    with threadpool_limits(1):
        for label, make_args, fn in cases(rng):
            row = {"kernel": label}
            for name, mod in (("python", _pykernels), ("cython", ext)):
                if mod is None:
                    row[name] = None
                    continue
                a = make_args(mod)
                f = getattr(mod, fn)
                row[name] = min(timeit.repeat(lambda: f(*a), number=3, repeat=args.repeat)) / 3
            rows.append(row)
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for r in rows:
        py, cy = r["python"], r["cython"]
        sp = f"{py / cy:8.1f}" if cy else "     n/a"
        cy_s = f"{cy * 1e3:10.2f}" if cy else "       n/a"
        print(f"{r['kernel']:32s} {py * 1e3:10.2f} {cy_s} {sp}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
