"""Benchmark the hot kernels on the numba and pure-numpy backends.

Runs the quadrature projection forms and the multi-start likelihood
maximization on a realistic workload (near-singular design, k = 5, one
conditional-quantile batch) in two subprocesses, one per backend, and prints
a timing table. Usage: python benchmarks/bench_kernels.py
"""

from __future__ import annotations

import json
import os
import subprocess
import sys

_PAYLOAD = r"""
import json
import time

import numpy as np

from weakiv import _kernels
from weakiv.designs import DesignSpec, assemble, draw_vec_r0
from weakiv.model import STContext
from weakiv.numerics import RngStream, gauss_legendre_split
from weakiv.statistics import ILContext, LRContext

K = 5
N_DRAWS = 1001          # one observed statistic + 1000 quantile draws
N_DRAWS_LR = 64         # the uncompiled fallback is ~100x slower; keep it polite
N_STARTS = 51           # 50 random + the null angle

sigma0, mu = assemble(DesignSpec(kind="ns", k=K))
stctx = STContext(sigma0, 0.0)
rng = RngStream(0)
vec_obs = draw_vec_r0(sigma0, mu, 0.0, 1, rng.child("obs"))[0]
_, t = stctx.st(vec_obs.reshape((K, 2), order="F"))
s_rows = rng.child("sims").generator().standard_normal((N_DRAWS, K))
vec_rows = stctx.reconstruct(s_rows, t)

ilctx = ILContext(sigma0, gauss_legendre_split(201, 0.0))
w_rows = vec_rows @ ilctx.inv_sqrt.T
lognode = ilctx.log_weight("il")
t_sq = float(t @ t)

lrctx = LRContext(sigma0)
q = vec_rows[:N_DRAWS_LR] @ lrctx.sigma_inv.T
v1s = np.ascontiguousarray(q[:, :K])
v2s = np.ascontiguousarray(q[:, K:])
starts = rng.child("starts").generator().uniform(
    -np.pi / 2, np.pi / 2, size=(N_DRAWS_LR, N_STARTS - 1)
)
fixed = np.array([0.0])


def timeit(fn, repeat):
    fn()  # warm-up / JIT compile
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


qf_time = timeit(lambda: _kernels.qf_batch(ilctx.basis, w_rows), 20)
il_time = timeit(
    lambda: ilctx.log_values(w_rows, t_sq, lognode), 20
)
lr_time = timeit(
    lambda: _kernels.multistart_batch(
        lrctx.m11, lrctx.m12, lrctx.m22, v1s, v2s, starts, fixed,
        1e-10, 200, 0.004, 2.0,
    ),
    3,
)
print(json.dumps({
    "backend": "numba" if _kernels.NUMBA_ENABLED else "numpy",
    "qf_batch_ms": qf_time * 1e3,
    "il_logvalues_ms": il_time * 1e3,
    "lr_multistart_ms": lr_time * 1e3,
}))
"""


def run(backend_flag: str) -> dict:
    env = dict(os.environ, WEAKIV_NUMBA=backend_flag)
    out = subprocess.run(
        [sys.executable, "-c", _PAYLOAD],
        capture_output=True,
        text=True,
        env=env,
        check=True,
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main() -> None:
    results = [run("1"), run("0")]
    if results[0]["backend"] == results[1]["backend"]:
        print("numba unavailable: both runs used the numpy backend")
    names = [
        ("qf_batch_ms", "quadrature forms (201 nodes x 1001 draws)"),
        ("il_logvalues_ms", "integrated-likelihood log values"),
        ("lr_multistart_ms", "LR multi-start (64 draws x 51 starts)"),
    ]
    print(f"{'kernel':<45} " + " ".join(f"{r['backend']:>12}" for r in results)
          + f" {'speedup':>9}")
    for key, label in names:
        vals = [r[key] for r in results]
        speedup = vals[1] / vals[0] if vals[0] > 0 else float("nan")
        print(f"{label:<45} " + " ".join(f"{v:>10.2f}ms" for v in vals)
              + f" {speedup:>8.1f}x")


if __name__ == "__main__":
    main()
