"""Time the compiled kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both backends run on identical inputs and their outputs are compared, so a
speedup is only reported for kernels that agree.
"""
import argparse
import timeit

import numpy as np

from hta_peft import _core_py, _kernels
from hta_peft.adapters import gelu_and_tanh


def _svd_inputs(n, seed=0):
    a = np.random.default_rng(seed).standard_normal((n, n))
    return np.array(a.T, order="C"), np.eye(n)


def bench_jacobi(impl, n, repeat):
    def run():
        g, vt = _svd_inputs(n)
        impl(g, vt, 1e-14, 60)
        return g

    t = min(timeit.repeat(run, number=1, repeat=repeat))
    return t, run()


def bench_gelu(impl, size, repeat):
    x = np.random.default_rng(1).standard_normal(size)
    g = np.random.default_rng(2).standard_normal(size)
    _, t_ = gelu_and_tanh(x)
    out = np.empty(size)
    t = min(timeit.repeat(lambda: impl(g, x, t_, out), number=1, repeat=repeat))
    return t, out.copy()


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    if _kernels.BACKEND != "cython":
        print("compiled extension not built; only the numpy twins are available")
        return
    from hta_peft import _core

    print(f"{'kernel':<24}{'python ms':>12}{'cython ms':>12}{'speedup':>10}{'max diff':>12}")
    for n in (8, 32, 64):
        tp, rp = bench_jacobi(_core_py.jacobi_sweeps, n, args.repeat)
        tc, rc = bench_jacobi(_core.jacobi_sweeps, n, args.repeat)
        print(f"{f'jacobi_sweeps {n}x{n}':<24}{tp * 1e3:>12.3f}{tc * 1e3:>12.3f}{tp / tc:>10.1f}"
              f"{np.abs(rp - rc).max():>12.1e}")
    for size in (64 * 17 * 256, 256 * 5 * 256):
        tp, rp = bench_gelu(_core_py.gelu_backward, size, args.repeat)
        tc, rc = bench_gelu(_core.gelu_backward, size, args.repeat)
        print(f"{f'gelu_backward {size}':<24}{tp * 1e3:>12.3f}{tc * 1e3:>12.3f}{tp / tc:>10.1f}"
              f"{np.abs(rp - rc).max():>12.1e}")


if __name__ == "__main__":
    main()
