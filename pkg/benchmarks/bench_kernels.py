"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is timed on both backends with identical inputs; outputs are
checked for agreement before timing.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from perturb_learn import kernels


def cases(rng):
    n, d = 256, 784
    X = rng.uniform(0, 1, (n, d))
    V = X + 0.1 * rng.standard_normal((n, d))
    lo, hi = np.zeros(d), np.ones(d)
    G = rng.standard_normal((n, d))
    P = rng.standard_normal((2000, 50))
    Q = rng.standard_normal((n, 50))
    K = 8
    means = rng.standard_normal((K, 50))
    inv_var = rng.uniform(0.5, 2.0, (K, 50))
    log_norm = rng.standard_normal(K)
    Xt0 = np.clip(X + 0.01 * G, 0, 1)

    def pgd(impl, linf):
        def run():
            Xt = Xt0.copy()
            kernels.pgd_step(X, Xt, G, 0.01, 0.1, linf, lo, hi, impl=impl)
            return Xt
        return run

    return {
        f"prox_l0_box {n}x{d}": lambda impl: lambda: kernels.prox_l0_box(V, X, 0.003, lo, hi,
                                                                         impl=impl),
        f"pgd_step l2 {n}x{d}": lambda impl: pgd(impl, False),
        f"pgd_step linf {n}x{d}": lambda impl: pgd(impl, True),
        f"kde_logsum_grad {n}x2000x50": lambda impl: lambda: kernels.kde_logsum_grad(
            Q, P, 0.7, impl=impl),
        f"gmm_logsum_grad {n}x{K}x50": lambda impl: lambda: kernels.gmm_logsum_grad(
            Q, means, inv_var, log_norm, impl=impl),
    }


def _close(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(p, q, rtol=1e-10, atol=1e-12) for p, q in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the results to this file")
    args = ap.parse_args(argv)
    try:
        fast = kernels.backend("cython")
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return 1
    slow = kernels.backend("python")
    rows = []
    print(f"{'kernel':34s} {'cython ms':>10s} {'python ms':>10s} {'speedup':>8s}")
    for name, make in cases(np.random.default_rng(0)).items():
        f_fast, f_slow = make(fast), make(slow)
        if not _close(f_fast(), f_slow()):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        t = {}
        for label, fn in (("cython", f_fast), ("python", f_slow)):
            number, _ = timeit.Timer(fn).autorange()
            t[label] = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
        rows.append({"kernel": name, "cython_s": t["cython"], "python_s": t["python"],
                     "speedup": t["python"] / t["cython"]})
        print(f"{name:34s} {1e3 * t['cython']:10.3f} {1e3 * t['python']:10.3f} "
              f"{t['python'] / t['cython']:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
