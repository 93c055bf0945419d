"""Benchmark the compiled kernel core against the pure NumPy/SciPy fallback.

Runs each hot kernel on representative problem sizes and prints median wall
times plus the speedup.  Usage::

    python3 benchmarks/bench_kernels.py [--reps 5] [--scale 1.0]

The full pipeline selects its backend at import time; set
``SPECSTREAM_PURE_PYTHON=1`` to force the fallback there.
"""
from __future__ import annotations

import argparse
import time

import numpy as np
import scipy.sparse as sp

from specstream._kernels import _pykernels

try:
    from specstream._kernels import _core
except ImportError:  # pragma: no cover - depends on build environment
    _core = None


def median_time(fn, reps: int) -> float:
    times = []
    for _ in range(reps):
        tic = time.perf_counter()
        fn()
        times.append(time.perf_counter() - tic)
    return float(np.median(times))


def bench_csr_matmat(rng: np.random.Generator, scale: float):
    n = int(5000 * scale)
    density = 5.0 / n
    mat = sp.random(n, n, density=density, format="csr", random_state=7,
                    data_rvs=rng.standard_normal)
    x = rng.standard_normal((n, 64))
    out = np.zeros((n, 64))

    def run(impl):
        return lambda: impl.csr_matmat(mat.indptr, mat.indices, mat.data, x, out)

    return f"csr_matmat (n={n}, avg deg 5, 64 cols)", run


def bench_mgs_qr(rng: np.random.Generator, scale: float):
    n, k = int(20000 * scale), 100
    a = rng.standard_normal((n, k))

    def run(impl):
        def call():
            q = np.zeros((n, k))
            r = np.zeros((k, k))
            impl.mgs_qr_core(a, q, r, 1e-12)
        return call

    return f"mgs_qr_core ({n}x{k})", run


def bench_memory_replay(rng: np.random.Generator, scale: float):
    n_events = int(20000 * scale)
    n_nodes, d_msg, d_mem, hidden = 2000, 100, 100, 100
    msgs = rng.standard_normal((n_events, d_msg))
    src = rng.integers(0, n_nodes // 2, n_events)
    dst = rng.integers(n_nodes // 2, n_nodes, n_events)
    w1 = rng.standard_normal((hidden, d_mem + d_msg)) * 0.05
    b1 = np.zeros(hidden)
    w2 = rng.standard_normal((d_mem, hidden)) * 0.05
    b2 = np.zeros(d_mem)

    def run(impl):
        def call():
            mem = np.zeros((n_nodes, d_mem))
            last_z = np.zeros((n_nodes, d_mem + d_msg))
            has_z = np.zeros(n_nodes, dtype=np.uint8)
            impl.memory_replay(msgs, src, dst, mem, last_z, has_z, w1, b1, w2, b2)
        return call

    return f"memory_replay ({n_events} events, d={d_msg})", run


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--reps", type=int, default=5)
    parser.add_argument("--scale", type=float, default=1.0,
                        help="problem-size multiplier")
    args = parser.parse_args()
    rng = np.random.Generator(np.random.PCG64(0))
    if _core is None:
        print("compiled core is not available; timing the fallback only")
    header = f"{'kernel':<44} {'compiled':>10} {'python':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for bench in (bench_csr_matmat, bench_mgs_qr, bench_memory_replay):
        label, run = bench(rng, args.scale)
        t_py = median_time(run(_pykernels), args.reps)
        if _core is not None:
            t_c = median_time(run(_core), args.reps)
            print(f"{label:<44} {t_c * 1e3:>8.2f}ms {t_py * 1e3:>8.2f}ms "
                  f"{t_py / t_c:>7.2f}x")
        else:
            print(f"{label:<44} {'-':>10} {t_py * 1e3:>8.2f}ms {'-':>8}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
