"""Compare the numba kernels with the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Reports the median wall
time of each kernel on both backends, the maximum absolute difference
between them, and the time of a short sampler run on each backend.
"""
import argparse
import time

import numpy as np

from galqr import _accel, kernels
from galqr.mcmc import SamplerConfig, run_sampler
from galqr.sim import ScenarioSpec, replicate_dataset


def timeit(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def kernel_cases(n, rng):
    y = rng.normal(0, 3, n)
    mu = np.zeros(n)
    sigma = np.full(n, 1.3)
    t = rng.uniform(0, 8, n)
    cd4 = rng.uniform(1, 4, n)
    subj = rng.integers(0, 15, n)
    beta = np.array([11.5, 5.5, 3.5, 0.05, 0.01])
    b = rng.normal(0, 0.5, (15, 4))
    return {
        "AL logpdf": lambda: kernels.family_logpdf(y, mu, sigma, 0.0, 0.3),
        "GAL logpdf": lambda: kernels.family_logpdf(y, mu, sigma, -0.4, 0.3),
        "cGAL logpdf": lambda: kernels.family_logpdf(y, mu, sigma, -0.4, 0.3, 0.05, 10.0),
        "biphasic mean": lambda: kernels.biphasic_mu(t, cd4, subj, beta, b),
    }


def run_backend(flag, fn):
    saved = _accel.USE_NUMBA
    _accel.USE_NUMBA = flag
    try:
        return fn()
    finally:
        _accel.USE_NUMBA = saved


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[135, 10_000, 1_000_000])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--sampler-iter", type=int, default=1000)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; only the numpy backend is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<15}{'n':>10}{'numba (s)':>14}{'numpy (s)':>14}{'speed-up':>10}{'max |diff|':>13}")
    for n in args.sizes:
        for name, fn in kernel_cases(n, rng).items():
            repeat = max(3, args.repeat if n < 100_000 else args.repeat // 4)
            t_nb = run_backend(True, lambda: timeit(fn, repeat))
            t_np = run_backend(False, lambda: timeit(fn, repeat))
            diff = np.max(np.abs(run_backend(True, fn) - run_backend(False, fn)))
            print(f"{name:<15}{n:>10}{t_nb:>14.2e}{t_np:>14.2e}{t_np / t_nb:>10.1f}{diff:>13.1e}")
    s = ScenarioSpec(0.5, 0.05)
    data = replicate_dataset(s, 1, 0)
    cfg = SamplerConfig(n_chains=1, n_adapt=args.sampler_iter // 2, n_burnin=0, n_iter=args.sampler_iter // 2,
                        thin=1, seed=1, keep_b=False)
    spec = s.model_spec("cGAL")
    run_backend(True, lambda: run_sampler(spec, data, cfg))
    for label, flag in (("numba", True), ("numpy", False)):
        t0 = time.perf_counter()
        run_backend(flag, lambda: run_sampler(spec, data, cfg))
        dt = time.perf_counter() - t0
        print(f"sampler ({label}): {args.sampler_iter} iterations, 135 observations: {dt:.2f} s")


if __name__ == "__main__":
    main()
