"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Checks that both backends agree before timing them.
"""
import argparse
import timeit

import numpy as np

from omnisonic import kernels
from omnisonic.numerics import Rng


def cases():
    rng = Rng(0, 0xBE7)
    a = rng.integers(0, 30, 400)
    b = rng.integers(0, 30, 380)
    x = rng.normal(40960, 1.0, np.float64)
    freq = np.linspace(300.0, 2500.0, x.size)
    return {
        "levenshtein 400x380": lambda be: kernels.levenshtein(a, b, backend=be),
        "resonator 40960 samples": lambda be: kernels.resonator(x, freq, 120.0, 16000, backend=be),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.BACKEND != "cython":
        print("compiled kernels not built; only the Python backend is available")
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    print(f"{'kernel':<26}{'backend':<9}{'best ms':>10}{'speedup':>10}")
    for name, fn in cases().items():
        results = {be: fn(be) for be in backends}
        if len(backends) == 2:
            assert np.array_equal(results["python"], results["cython"]), f"{name}: backends disagree"
        times = {be: min(timeit.repeat(lambda be=be: fn(be), number=1, repeat=args.repeat)) for be in backends}
        for be in backends:
            print(f"{name:<26}{be:<9}{times[be] * 1e3:>10.2f}{times['python'] / times[be]:>9.1f}x")


if __name__ == "__main__":
    main()
