"""Time the compiled kernels against the numpy / pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from imconnect import _kernels_py as py

try:
    from imconnect import _kernels as cy
except ImportError:
    cy = None


def cases():
    rng = np.random.default_rng(0)
    act = rng.normal(size=(32, 16, 64))
    lam = np.linspace(-4, -0.05, 50)
    gam = np.linspace(0.05, 3, 50)
    return [
        ("explicit_errors n=200", "explicit_errors", (-0.5, 1.0, 200, 1e300)),
        ("implicit_errors n=200", "implicit_errors", (-0.5, 1.0, 200, 1e300)),
        ("scan explicit 50x50 n=200", "scan_final_errors", (lam, gam, 1.0, 200, False, 1e300)),
        ("scan implicit 50x50 n=6000", "scan_final_errors", (lam, gam, 1.0, 6000, True, 1e300)),
        ("gelu 32x16x64", "gelu", (act,)),
        ("gelu_grad 32x16x64", "gelu_grad", (act,)),
        ("gelu_grad2 32x16x64", "gelu_grad2", (act,)),
    ]


def best_of(fn, args, repeat):
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if cy is None:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'kernel':<30}{'fallback':>14}{'compiled':>14}{'speedup':>10}")
    for label, name, call_args in cases():
        t_py = best_of(getattr(py, name), call_args, args.repeat)
        if cy is None:
            print(f"{label:<30}{t_py * 1e6:>12.1f}us")
            continue
        t_cy = best_of(getattr(cy, name), call_args, args.repeat)
        print(f"{label:<30}{t_py * 1e6:>12.1f}us{t_cy * 1e6:>12.1f}us{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
