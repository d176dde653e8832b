"""Numba vs numpy kernel timings at the tiny-ViT training shapes.

    python benchmarks/bench_kernels.py [--repeat N] [--train-step]

Each kernel runs on identical inputs through both backends; the max abs
difference is printed next to the timings. ``--train-step`` additionally
times one batch-32 forward/backward per backend in a subprocess, because the
backend is fixed at import time by ``IMPACT_NUMBA``.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from impact.numerics import kernels as K

B, T, D, H = 32, 65, 64, 4


def _inputs(rng: np.random.Generator) -> dict[str, tuple]:
    x = rng.standard_normal((B * T, D)).astype(np.float32)
    w = rng.standard_normal(D).astype(np.float32)
    b = rng.standard_normal(D).astype(np.float32)
    g = rng.standard_normal((B * T, D)).astype(np.float32)
    _, mean, rstd = K.layernorm_fwd_np(x, w, b, 1e-6)
    att = K.softmax_fwd_np(rng.standard_normal((B * H * T, T)).astype(np.float32))
    gatt = rng.standard_normal((B * H * T, T)).astype(np.float32)
    h = rng.standard_normal((B * T, 4 * D)).astype(np.float32)
    gh = rng.standard_normal((B * T, 4 * D)).astype(np.float32)
    scores = rng.standard_normal((1000, 256))
    labels = rng.random(1000) < 0.3
    return {
        "layernorm_fwd": (x, w, b, 1e-6),
        "layernorm_bwd": (g, x, mean, rstd, w),
        "softmax_bwd": (att, gatt),
        "gelu_fwd": (h,),
        "gelu_bwd": (h, gh),
        "auroc_columns": (scores, labels),
    }


def _maxdiff(a, b) -> float:
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(u, np.float64) - np.asarray(v, np.float64)))) for u, v in zip(a, b))


def bench_kernels(repeat: int) -> None:
    if not K.NUMBA_KERNELS:
        print("numba not importable; nothing to compare")
        return
    args = _inputs(np.random.default_rng(0))
    print(f"{'kernel':<16}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}{'max|diff|':>12}")
    for name, a in args.items():
        fnp, fnb = K.NUMPY_KERNELS[name], K.NUMBA_KERNELS[name]
        fnb(*a)  # compile / load cache
        t_np = min(timeit.repeat(lambda: fnp(*a), number=1, repeat=repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fnb(*a), number=1, repeat=repeat)) * 1e3
        print(f"{name:<16}{t_np:>11.3f}{t_nb:>11.3f}{t_np / t_nb:>9.2f}{_maxdiff(fnp(*a), fnb(*a)):>12.2e}")


_STEP = """
import time, numpy as np
from impact.model import ModelConfig, init_model
from impact.model.train import loss_and_grads
m = init_model(ModelConfig())
rng = np.random.default_rng(0)
x = rng.random((32, 1, 32, 32), dtype=np.float32); y = rng.integers(0, 10, 32)
loss_and_grads(m, x, y)
ts = []
for _ in range({n}):
    t = time.perf_counter(); loss_and_grads(m, x, y); ts.append(time.perf_counter() - t)
print(min(ts) * 1e3)
"""


def bench_train_step(repeat: int) -> None:
    for flag in ("0", "1"):
        env = dict(os.environ, IMPACT_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", _STEP.format(n=repeat)], env=env, capture_output=True,
                             text=True, check=True)
        print(f"train step ({'numba' if flag == '1' else 'numpy'}): {float(out.stdout):.1f} ms")


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--train-step", action="store_true")
    args = ap.parse_args()
    bench_kernels(args.repeat)
    if args.train_step:
        bench_train_step(max(3, args.repeat // 4))


if __name__ == "__main__":
    main()
