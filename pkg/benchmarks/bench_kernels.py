"""Timing comparison of the compiled and pure kernel backends.

Runs each workload with both backends in-process (the pure module is always
importable; the compiled one may be absent) and prints a table of per-call
times plus the speedup.  Workloads cover the hot paths: dense matmul,
batchnorm forward/backward, the Bernoulli log-likelihood, and a full VAE
training step driven through the tape.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--size small|large]
"""

import argparse
import importlib
import time

from vaemix import _kernels_py

try:
    from vaemix import _kernels as _kernels_c
except ImportError:
    _kernels_c = None

from array import array

from vaemix.rng import CounterRng
from vaemix.tensor import Tensor


def _rand(nm, rng):
    buf = array("d", bytes(8 * nm))
    rng.fill_normal(buf, nm)
    return buf


def bench(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_workloads(K, n, k, m, rng):
    a = _rand(n * k, rng)
    b = _rand(k * m, rng)
    out = array("d", bytes(8 * n * m))
    g = _rand(n * m, rng)
    acc = array("d", bytes(8 * n * k))

    gamma = array("d", [1.0] * m)
    beta = array("d", bytes(8 * m))
    bn_out = array("d", bytes(8 * n * m))
    xhat = array("d", bytes(8 * n * m))
    mean = array("d", bytes(8 * m))
    var = array("d", bytes(8 * m))

    p = array("d", [0.3 + 0.4 * (i % 7) / 7.0 for i in range(n * m)])
    xb = array("d", [float(i % 2) for i in range(n * m)])
    rows = array("d", bytes(8 * n))

    return [
        ("matmul", lambda: K.matmul(a, b, out, n, k, m)),
        ("matmul_nt_acc", lambda: K.matmul_nt_acc(g, b, acc, n, m, k)),
        ("bn_train", lambda: K.bn_train(out, gamma, beta, bn_out, xhat,
                                        mean, var, n, m, 1e-5)),
        ("bernoulli_ll", lambda: K.bernoulli_ll(p, xb, rows, n, m,
                                                1e-7, 1.0 - 1e-7)),
        ("logsumexp", lambda: K.logsumexp(g, n * m)),
    ]


def train_step_workload(pure, n, d, h):
    import os
    import subprocess
    import sys

    code = (
        "import time\n"
        "from vaemix.rng import CounterRng\n"
        "from vaemix.tensor import Tensor\n"
        "from vaemix.vae import VaeConfig, VaeModel\n"
        f"cfg = VaeConfig(input_dim={d}, hidden_dim={h}, latent_dim=4,\n"
        "                decoder_kind='bernoulli', architecture='asymmetric')\n"
        "m = VaeModel(cfg, CounterRng(1, 0), CounterRng(1, 1), tag='b')\n"
        f"x = Tensor(({n}, {d}))\n"
        "r = CounterRng(2, 9)\n"
        "for i in range(x.size):\n"
        "    x.data[i] = 1.0 if r.uniform() > 0.5 else 0.0\n"
        "m.train_step(x)\n"
        "t0 = time.perf_counter()\n"
        "for _ in range(5):\n"
        "    m.train_step(x)\n"
        "print((time.perf_counter() - t0) / 5)\n"
    )
    env = dict(os.environ)
    env["VAEMIX_PURE_KERNELS"] = "1" if pure else ""
    out = subprocess.run([sys.executable, "-c", code], capture_output=True,
                         text=True, env=env, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", choices=("small", "large"), default="small")
    args = ap.parse_args()

    n, k, m = (64, 128, 64) if args.size == "small" else (256, 512, 256)
    rng = CounterRng(0, 12345)

    print(f"matrix sizes: ({n} x {k}) @ ({k} x {m})")
    print(f"{'kernel':<16} {'pure (ms)':>12} {'compiled (ms)':>14} {'speedup':>9}")
    pure_work = kernel_workloads(_kernels_py, n, k, m, rng)
    comp_work = (kernel_workloads(_kernels_c, n, k, m, rng)
                 if _kernels_c else None)
    for i, (name, fn) in enumerate(pure_work):
        tp = bench(fn, args.repeat) * 1e3
        if comp_work:
            tc = bench(comp_work[i][1], args.repeat) * 1e3
            print(f"{name:<16} {tp:>12.3f} {tc:>14.3f} {tp / tc:>8.1f}x")
        else:
            print(f"{name:<16} {tp:>12.3f} {'n/a':>14} {'n/a':>9}")

    bs, d, h = (128, 256, 100) if args.size == "small" else (500, 784, 200)
    tp = train_step_workload(True, bs, d, h) * 1e3
    print(f"\nfull train step (batch={bs}, input={d}, hidden={h}):")
    print(f"  pure:     {tp:9.1f} ms")
    if _kernels_c:
        tc = train_step_workload(False, bs, d, h) * 1e3
        print(f"  compiled: {tc:9.1f} ms  ({tp / tc:.1f}x)")
    else:
        print("  compiled backend not built")


if __name__ == "__main__":
    main()
