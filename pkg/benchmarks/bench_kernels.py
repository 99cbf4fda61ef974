"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each row runs both paths on identical inputs in the same process, checks
that they agree, and reports the best-of-N wall time.  Setting
HD3D_DISABLE_NUMBA only changes the default path; both are timed here.
"""
import argparse
import time

import numpy as np

from hd3d import conv, metrics
from hd3d.rng import Rng


def best_of(fn, repeat):
    fn()                                    # warm-up / compile
    ts = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return min(ts)


def cases():
    r = Rng(0, "bench")
    x = r.normal(2 * 8 * 19 ** 3).reshape(2, 8, 19, 19, 19).astype(np.float32)
    w = (0.1 * r.normal(16 * 8 * 27)).reshape(16, 8, 3, 3, 3).astype(np.float32)
    b = np.zeros(16, np.float32)
    go = r.normal(2 * 16 * 17 ** 3).reshape(2, 16, 17, 17, 17).astype(np.float32)
    m = r.random(48 ** 3).reshape(48, 48, 48) < 0.6

    yield ("conv3d forward direct", lambda nb: conv.forward_direct(x, w, b, use_numba=nb))
    yield ("conv3d backward direct", lambda nb: conv.backward_direct(go, x, w, use_numba=nb)[0])
    yield ("rng 10^6 normals", lambda nb: Rng(1, use_numba=nb).normal(10 ** 6))
    yield ("surface 48^3", lambda nb: metrics.surface_mask(m, use_numba=nb))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3, help="timed repetitions per path")
    a = ap.parse_args()
    print(f"{'kernel':<26s} {'numba s':>9s} {'numpy s':>9s} {'speedup':>8s}  agree")
    for name, fn in cases():
        y_nb, y_np = fn(True), fn(False)
        if y_nb.dtype == bool or np.issubdtype(y_nb.dtype, np.integer):
            agree = bool(np.array_equal(y_nb, y_np))
        else:
            scale = max(float(np.abs(y_np).max()), 1e-30)
            agree = bool(np.abs(y_nb - y_np).max() / scale < 1e-5)
        t_nb = best_of(lambda: fn(True), a.repeat)
        t_np = best_of(lambda: fn(False), a.repeat)
        print(f"{name:<26s} {t_nb:9.4f} {t_np:9.4f} {t_np / t_nb:7.1f}x  {agree}")
    # the lowered (patch-matrix + BLAS) path is what training uses by default
    r = Rng(2)
    x = r.normal(2 * 8 * 19 ** 3).reshape(2, 8, 19, 19, 19).astype(np.float32)
    w = (0.1 * r.normal(16 * 8 * 27)).reshape(16, 8, 3, 3, 3).astype(np.float32)
    b = np.zeros(16, np.float32)
    t = best_of(lambda: conv.conv3d_forward(x, w, b, method="lowered"), a.repeat)
    print(f"{'conv3d forward lowered':<26s} {t:9.4f} {'':>9s} {'':>8s}  (BLAS)")


if __name__ == "__main__":
    main()
