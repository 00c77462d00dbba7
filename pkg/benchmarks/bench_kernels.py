"""Timing of the compiled and numpy kernels on synthetic MoE problems.

Usage: python benchmarks/bench_kernels.py [--n 1000 10000 100000] [--repeat 5]
"""
import argparse
import time

import numpy as np

from quadmoe import SynthConfig, generate_dataset, sample_true_measure
from quadmoe import kernels


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(o) for o in out])
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[1000, 10000, 100000])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the numpy kernels are available")
    print(f"{'expert':>6} {'n':>7} {'op':>9} " + " ".join(f"{b:>10}" for b in backends) + "   speedup  max|diff|")
    for expert in ("linear", "relu", "tanh"):
        cfg = SynthConfig(d=2, N_star=4, expert=expert)
        G = sample_true_measure(cfg, 0)
        A, B, C, Eta = G.packed()
        for n in args.n:
            data = generate_dataset(G, cfg, n, 0)
            X, Y = data.X, data.Y
            ops = {
                "predict": lambda impl: kernels.predict(X, A, B, C, Eta, G.family, impl=impl),
                "loss_grad": lambda impl: kernels.loss_grad(X, Y, A, B, C, Eta, G.family, impl=impl),
            }
            for op, fn in ops.items():
                times = {b: _best(lambda m=m: fn(m), args.repeat) for b, m in backends.items()}
                outs = [_flat(fn(m)) for m in backends.values()]
                diff = float(np.max(np.abs(outs[0] - outs[-1])))
                speed = times["python"] / times["cython"] if "cython" in times else float("nan")
                cols = " ".join(f"{times[b] * 1e3:>8.2f}ms" for b in backends)
                print(f"{expert:>6} {n:>7} {op:>9} {cols} {speed:>8.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
