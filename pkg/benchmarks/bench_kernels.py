"""Compare the compiled and numpy kernel backends on representative shapes.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``.
"""

import argparse
import timeit

import numpy as np

from nodulenet.kernels import backends


def cases(rng):
    vol = rng.normal(-800, 100, size=(48, 64, 64)).astype(np.float32)
    coords = np.ascontiguousarray(rng.uniform(-2, 62, size=(60 * 60, 3)))
    x1 = rng.random((96, 64, 64, 1), dtype=np.float32)
    x8 = rng.random((96, 32, 32, 8), dtype=np.float32)
    cols5 = rng.random((96 * 64 * 64, 25), dtype=np.float32)
    cols3 = rng.random((96 * 32 * 32, 72), dtype=np.float32)
    pool_in = rng.random((96, 64, 64, 8), dtype=np.float32)
    X = np.ascontiguousarray(rng.normal(size=(400, 4097)))
    y = np.where(rng.random(400) > 0.5, 1.0, -1.0)
    qd = np.einsum("ij,ij->i", X, X)
    order = np.arange(400, dtype=np.intp)

    def pool_pair(k):
        out, idx = k.maxpool2_forward(pool_in)
        return out, idx

    return {
        "trilinear 3600 pts": lambda k: k.trilinear(vol, coords, -1200.0),
        "im2col k5 C1": lambda k: k.im2col(x1, 5),
        "im2col k3 C8": lambda k: k.im2col(x8, 3),
        "col2im k5 C1": lambda k: k.col2im(cols5, 96, 64, 64, 1, 5),
        "col2im k3 C8": lambda k: k.col2im(cols3, 96, 32, 32, 8, 3),
        "maxpool fwd": pool_pair,
        "maxpool bwd": lambda k: k.maxpool2_backward(pool_in[:, ::2, ::2].copy(), k.maxpool2_forward(pool_in)[1]),
        "svm pass 400x4097": lambda k: k.svm_dual_cd_pass(X, y, np.zeros(4097), np.zeros(400), order, qd, 1.0),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    mods = backends()
    names = sorted(mods)
    print(f"{'kernel':<22}" + "".join(f"{n + ' (ms)':>16}" for n in names)
          + ("   speedup" if len(names) == 2 else ""))
    for label, fn in cases(np.random.default_rng(0)).items():
        t = {}
        for n in names:
            k = mods[n]
            fn(k)  # warm-up
            t[n] = min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) * 1e3
        row = f"{label:<22}" + "".join(f"{t[n]:>16.2f}" for n in names)
        if len(names) == 2:
            row += f"{t['python'] / t['cython']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
