"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 200] [--width 8 16 32]

Prints one row per (kernel, width) with the median time per call for each
backend and the speed-up. Also checks the two backends agree.
"""

import argparse
import statistics
import time

import numpy as np

from kgfewshot import _kernels


def gated_inputs(rng, rows, width):
    mats = [rng.normal(size=(width, width)) * 0.3 for _ in range(6)]
    a, h = rng.normal(size=(rows, width)), np.tanh(rng.normal(size=(rows, width)))
    ub, bz, br = (rng.normal(size=(1, width)) for _ in range(3))
    wza, wzh, wra, wrh, wua, wuh = mats
    return (a, h, ub, wza, wzh, bz, wra, wrh, br, wua, wuh)


def time_call(fn, args, repeat):
    fn(*args)  # warm-up
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def cases(rng, widths, rows):
    for w in widths:
        fwd = gated_inputs(rng, rows, w)
        a, h, ub, wza, wzh, bz, wra, wrh, br, wua, wuh = fwd
        _, z, r, u = _kernels.get_backend("python").gated_forward(*fwd)
        g = rng.normal(size=h.shape)
        bwd = (g, a, h, z, r, u, wza, wzh, wra, wrh, wua, wuh)
        yield "gated_forward", w, fwd
        yield "gated_backward", w, bwd
    for n in (200, 1000):
        scores = np.round(rng.random((n, 40)), 2)
        truths = (rng.random((n, 40)) < 0.2).astype(float)
        yield "ap_columns", n, (scores, truths)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=200)
    p.add_argument("--width", type=int, nargs="+", default=[8, 16, 32])
    p.add_argument("--rows", type=int, default=24, help="active nodes per gated call")
    args = p.parse_args(argv)

    backends = _kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels are not built; only the fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'size':>6}" + "".join(f"{b + ' us':>14}" for b in backends) + f"{'speed-up':>10}")
    for name, size, kargs in cases(rng, args.width, args.rows):
        fns = [getattr(_kernels.get_backend(b), name) for b in backends]
        outs = [f(*kargs) for f in fns]
        if len(outs) == 2:
            pairs = zip(outs[0], outs[1]) if isinstance(outs[0], tuple) else [(outs[0], outs[1])]
            for x, y in pairs:
                np.testing.assert_allclose(x, y, rtol=0, atol=1e-10, equal_nan=True)
        med = [time_call(f, kargs, args.repeat) * 1e6 for f in fns]
        speed = f"{med[0] / med[1]:>9.1f}x" if len(med) == 2 else ""
        print(f"{name:<16}{size:>6}" + "".join(f"{m:>14.1f}" for m in med) + speed)


if __name__ == "__main__":
    main()
