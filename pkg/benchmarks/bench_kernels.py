"""Compare the numba and numpy kernel backends.

Times a full direct solve of the exclusive switch and repeated evaluations
of the order-5 closed moment right-hand side, once per backend, and checks
that both backends agree.

    python benchmarks/bench_kernels.py --t-end 20 --repeat 3
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from cmekit import _kernels
from cmekit.closure import close_system, init_moments_from_state, integrate_moments
from cmekit.direct import TruncationConfig, integrate, point_mass
from cmekit.network import builtin_model


def best_of(fn, repeat):
    best, value = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        value = fn()
        best = min(best, time.perf_counter() - t0)
    return best, value


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--t-end", type=float, default=20.0, help="direct-solve horizon")
    ap.add_argument("--delta", type=float, default=1e-10)
    ap.add_argument("--order", type=int, default=5, help="closure order for the rhs benchmark")
    ap.add_argument("--rhs-calls", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    net = builtin_model("exclusive_switch")
    cfg = TruncationConfig(t_end=args.t_end, delta1=args.delta, step_size=0.05)
    system = close_system(net, args.order)
    mv = integrate_moments(system, init_moments_from_state(net.initial_state, system), 10.0)
    m = np.array([mv[a] for a in system.tracked])

    backends = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])
    results = {}
    previous = _kernels.backend
    try:
        for name in backends:
            _kernels.set_backend(name)
            # warm-up compiles the numba kernels outside the timed region
            integrate(net, point_mass(net), TruncationConfig(t_end=0.2, delta1=args.delta, step_size=0.05))
            system.rhs(0.0, m)
            t_direct, dist = best_of(lambda: integrate(net, point_mass(net), cfg), args.repeat)
            t_rhs, r = best_of(lambda: [system.rhs(0.0, m) for _ in range(args.rhs_calls)][-1], args.repeat)
            results[name] = (t_direct, t_rhs, dist, r)
            print(f"{name:6s} direct solve t={args.t_end:g}: {t_direct:8.3f} s ({len(dist)} states)   "
                  f"moment rhs x{args.rhs_calls}: {t_rhs:8.3f} s")
    finally:
        _kernels.set_backend(previous)

    if len(results) == 2:
        a, b = results["numpy"], results["numba"]
        same_states = len(a[2]) == len(b[2])
        pa = dict(zip(map(tuple, a[2].states), a[2].probs))
        diff = max(abs(pa.get(tuple(s), 0.0) - p) for s, p in zip(b[2].states, b[2].probs))
        rdiff = float(np.max(np.abs(a[3] - b[3]) / np.maximum(1.0, np.abs(a[3]))))
        print(f"speedup numba/numpy: direct {a[0] / b[0]:.1f}x, rhs {a[1] / b[1]:.1f}x")
        print(f"agreement: same support={same_states}, max |dp|={diff:.2e}, max rel rhs diff={rdiff:.2e}")


if __name__ == "__main__":
    main()
