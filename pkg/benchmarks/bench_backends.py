"""Timing comparison of the pure-numpy and compiled kernel backends.

Two views:
  1. Microbenchmarks of each hot kernel on both backends, in-process.
  2. Wall time of a short training run per backend, in subprocesses with
     TSCA_BACKEND forced, since consumers bind the backend at import.

Usage:
  python benchmarks/bench_backends.py [--repeat N] [--epochs N] [--no-train]
"""

import argparse
import os
import subprocess
import sys
import tempfile
import timeit

import numpy as np

from tsca.backend import get_backend
from tsca.data import GenConfig, generate, save_split

SHAPES = [(16, 16), (64, 64), (256, 128), (512, 512)]


def kernel_cases(k):
    """(label, callable) pairs covering every kernel of a backend module."""
    r = np.random.default_rng(0)
    cases = []
    for n, m in SHAPES:
        x = np.ascontiguousarray(r.normal(size=(n, m)))
        gy = np.ascontiguousarray(r.normal(size=(n, m)))
        alpha = np.ascontiguousarray(r.dirichlet(np.ones(m)))
        y = k.softmax_rows(x)
        ny, norms = k.l2norm_cols(x, 1e-12)
        p, u = k.cond_plan(x, alpha)
        shape = f"{n}x{m}"
        cases += [
            (f"softmax_rows      {shape}", lambda x=x: k.softmax_rows(x)),
            (f"softmax_rows_vjp  {shape}", lambda y=y, gy=gy: k.softmax_rows_vjp(y, gy)),
            (f"l2norm_cols       {shape}", lambda x=x: k.l2norm_cols(x, 1e-12)),
            (f"l2norm_cols_vjp   {shape}",
             lambda ny=ny, norms=norms, gy=gy: k.l2norm_cols_vjp(ny, norms, gy, 1e-12)),
            (f"cond_plan         {shape}", lambda x=x, a=alpha: k.cond_plan(x, a)),
            (f"cond_plan_vjp     {shape}",
             lambda p=p, u=u, gy=gy: k.cond_plan_vjp(p, u, gy)),
        ]
    return cases


def best_seconds(fn, repeat):
    number = max(1, int(0.002 / max(timeit.timeit(fn, number=1), 1e-9)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def bench_kernels(repeat):
    py = get_backend("python")
    try:
        ct = get_backend("cython")
    except ImportError:
        print("compiled backend unavailable; micro-benchmarking python only\n")
        ct = None

    label_w = 28
    header = f"{'kernel':<{label_w}} {'python':>12}"
    if ct is not None:
        header += f" {'cython':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    ct_cases = kernel_cases(ct) if ct is not None else None
    for idx, (label, fn) in enumerate(kernel_cases(py)):
        t_py = best_seconds(fn, repeat)
        line = f"{label:<{label_w}} {t_py * 1e6:>10.2f}us"
        if ct_cases is not None:
            t_ct = best_seconds(ct_cases[idx][1], repeat)
            line += f" {t_ct * 1e6:>10.2f}us {t_py / t_ct:>8.2f}x"
        print(line)


def bench_training(epochs):
    names = ["python"]
    try:
        get_backend("cython")
        names.append("cython")
    except ImportError:
        pass
    print(f"\ntraining wall time ({epochs} epochs, 4x4 grid, fresh process):")
    with tempfile.TemporaryDirectory() as tmp:
        data_dir = os.path.join(tmp, "data")
        space, samples = generate(GenConfig(seed=1))
        save_split(data_dir, space, samples)
        for name in names:
            out = os.path.join(tmp, f"run_{name}")
            argv = [sys.executable, "-m", "tsca.cli", "train", "--data", data_dir,
                    "-o", out, "--epochs", str(epochs)]
            env = dict(os.environ, TSCA_BACKEND=name)
            start = timeit.default_timer()
            proc = subprocess.run(argv, env=env, capture_output=True, text=True)
            elapsed = timeit.default_timer() - start
            if proc.returncode != 0:
                sys.stderr.write(proc.stderr)
                raise SystemExit(f"training failed under backend {name}")
            print(f"  {name:<8} {elapsed:8.2f}s")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5,
                        help="timing repetitions per kernel (default 5)")
    parser.add_argument("--epochs", type=int, default=5,
                        help="epochs for the end-to-end run (default 5)")
    parser.add_argument("--no-train", action="store_true",
                        help="skip the end-to-end training comparison")
    args = parser.parse_args(argv)
    bench_kernels(args.repeat)
    if not args.no_train:
        bench_training(args.epochs)


if __name__ == "__main__":
    main()
