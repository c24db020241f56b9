"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Inputs follow the toy encoder's GaLore gradients (attention 64x64, MLP
64x256, projection 64x32; the kernel works on the short side) and 32x32
instance masks cut into 8x8 patches.
"""

import argparse
import timeit

import numpy as np

from eagle.kernels import backends


def jacobi_case(n, m, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, m))

    def run(mod):
        at = a.copy()
        vt = np.eye(n)
        mod.jacobi_sweeps(at, vt, 1e-15, 60)

    return run


def coverage_case(seed):
    rng = np.random.default_rng(seed)
    masks = rng.random((200, 32, 32)) < 0.3

    def run(mod):
        for m in masks:
            mod.patch_coverage(m, 8)

    return run


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    mods = backends()
    cases = {
        "jacobi 64x64": jacobi_case(64, 64, 0),
        "jacobi 64x256": jacobi_case(64, 256, 1),
        "jacobi 32x64": jacobi_case(32, 64, 2),
        "coverage 200 masks": coverage_case(3),
    }
    names = list(mods)
    print(f"{'case':22s}" + "".join(f"{n + ' (ms)':>16s}" for n in names) + ("    speedup" if len(names) > 1 else ""))
    for title, run in cases.items():
        best = {n: min(timeit.repeat(lambda: run(mods[n]), number=1, repeat=args.repeat)) * 1e3 for n in names}
        line = f"{title:22s}" + "".join(f"{best[n]:16.2f}" for n in names)
        if "cython" in best:
            line += f"{best['python'] / best['cython']:10.1f}x"
        print(line)


if __name__ == "__main__":
    main()
