"""Compare the numba kernels against the pure-numpy reference versions.

    python benchmarks/bench_kernels.py [--repeat 200] [--end-to-end]

Kernel timings run in-process. ``--end-to-end`` also times the default
``benchmark`` grid in two subprocesses, one with ``MEMVI_DISABLE_NUMBA=1``.
"""
import argparse
import os
import subprocess
import sys
import tempfile
import time
import timeit

import numpy as np

from memvi import kernels


def _best(fn, repeat):
    fn()  # warm-up (and JIT compilation)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for n, d in ((100, 16), (2000, 16), (2000, 128)):
        z = rng.standard_normal(d)
        p = rng.standard_normal((n, d))
        prec = rng.uniform(0.5, 2.0, d)
        cases = {
            "sq_dists": (z, p),
            "gmm_readout": (z, p, 0.5),
            "mchn_readout": (z, p, 4.0),
            "diag_precision_readout": (z, p, prec),
            "precision_unrolled": (z, p[0], p, prec, 3),
        }
        for name, args in cases.items():
            ref = getattr(kernels, "np_" + name)
            t_np = _best(lambda: ref(*args), repeat)
            fast = getattr(kernels, "nb_" + name, None)
            t_nb = _best(lambda: fast(*args), repeat) if fast is not None else float("nan")
            rows.append((name, n, d, t_np * 1e6, t_nb * 1e6))
    return rows


def end_to_end():
    out = {}
    for label, flag in (("numba", ""), ("numpy", "1")):
        env = dict(os.environ, MEMVI_DISABLE_NUMBA=flag)
        with tempfile.TemporaryDirectory() as tmp:
            t0 = time.perf_counter()
            subprocess.run(
                [sys.executable, "-m", "memvi.cli", "benchmark", "--out", tmp, "--workers", "1"],
                env=env, check=True, capture_output=True,
            )
            out[label] = time.perf_counter() - t0
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args(argv)
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<24}{'N':>6}{'d':>5}{'numpy us':>12}{'numba us':>12}{'speedup':>9}")
    for name, n, d, t_np, t_nb in kernel_table(args.repeat):
        print(f"{name:<24}{n:>6}{d:>5}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>9.2f}")
    if args.end_to_end:
        t = end_to_end()
        print(f"default benchmark grid: numba {t['numba']:.2f}s, numpy {t['numpy']:.2f}s (includes interpreter start)")


if __name__ == "__main__":
    main()
