"""Compare the compiled and pure-Python grid mirror-descent kernels.

Usage: ``python benchmarks/bench_kernels.py [--repeat N]``. Prints the best
wall time per kernel and backend, and the speed-up of the compiled one.
"""

import argparse
import timeit

import numpy as np

from manifold_explore import _kernels_py as python_backend
from manifold_explore import kernels


def _md_case(backend, n=64, K=20_000, seed=0):
    rng = np.random.default_rng(seed)
    h0 = rng.standard_normal(n)
    vol = np.ones(n)
    gam = 1.0 / np.arange(1, K + 1)
    bias = 1.0 / np.arange(1, K + 1)
    shape = np.cos(np.arange(n))
    noise = rng.uniform(-1, 1, (K, n))
    ulog = np.full(n, -np.log(n))
    outs = [np.empty(K) for _ in range(4)]
    return lambda: backend.md_dual_run(h0.copy(), vol, gam, bias, shape, noise, ulog, *outs)


def _flow_case(backend, n=64, steps=20_000, seed=0):
    h0 = np.random.default_rng(seed).standard_normal(n)
    vol = np.ones(n)
    ent, var = np.empty(steps + 1), np.empty(steps + 1)
    return lambda: backend.mirror_flow_euler(h0.copy(), vol, 1e-3, steps, ent, var)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)
    backends = {"python": python_backend}
    if kernels.compiled_backend is not None:
        backends["cython"] = kernels.compiled_backend
    else:
        print("compiled extension not built; timing the Python backend only")
    for name, make in (("md_dual_run (64 cells, 20k iters)", _md_case),
                       ("mirror_flow_euler (64 cells, 20k steps)", _flow_case)):
        times = {b: min(timeit.repeat(make(mod), number=1, repeat=args.repeat)) for b, mod in backends.items()}
        cells = "  ".join(f"{b} {t * 1e3:8.1f} ms" for b, t in times.items())
        speedup = f"  speed-up x{times['python'] / times['cython']:.1f}" if "cython" in times else ""
        print(f"{name:42s} {cells}{speedup}")


if __name__ == "__main__":
    main()
