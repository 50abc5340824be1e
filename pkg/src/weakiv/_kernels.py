"""Hot numeric kernels with numba JIT and pure-numpy fallbacks.

Two inner loops dominate runtime: (a) the projection quadratic forms
evaluated at every quadrature node for every Monte Carlo draw of the
integrated-likelihood statistic, and (b) the multi-start bounded scalar
maximization of the likelihood-ratio objective, re-run for every draw when
simulating conditional critical values.

Set ``WEAKIV_NUMBA=0`` to select the pure-numpy/python path for the whole
process (the default uses numba when importable). The backends implement the
same algorithms from a single source; ``benchmarks/bench_kernels.py``
compares their speed.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


def _env_enabled() -> bool:
    return os.environ.get("WEAKIV_NUMBA", "1").strip().lower() not in (
        "0",
        "false",
        "no",
        "off",
    )


NUMBA_ENABLED = HAVE_NUMBA and _env_enabled()

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0
_INVPHI2 = (3.0 - math.sqrt(5.0)) / 2.0
_HALF_PI = math.pi / 2.0


# ---------------------------------------------------------------------------
# quadrature projection forms: qf[node, draw] = || basis[node] @ w[draw] ||^2


def qf_batch_numpy(basis: np.ndarray, w: np.ndarray) -> np.ndarray:
    """basis: (n_nodes, k, 2k) orthonormal row blocks; w: (n_draws, 2k)."""
    proj = np.einsum("nij,dj->nid", basis, w)
    return np.einsum("nid,nid->nd", proj, proj)


def _qf_batch_loop(basis, w):
    n_nodes, k, two_k = basis.shape
    n_draws = w.shape[0]
    out = np.empty((n_nodes, n_draws))
    for d in prange(n_draws):
        for n in range(n_nodes):
            qf = 0.0
            for i in range(k):
                acc = 0.0
                for j in range(two_k):
                    acc += basis[n, i, j] * w[d, j]
                qf += acc * acc
            out[n, d] = qf
    return out


def logsumexp_rows(logvals: np.ndarray) -> np.ndarray:
    """log(sum_n exp(logvals[n, d])) per draw d; tolerates -inf entries."""
    m = np.max(logvals, axis=0)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore"):
        s = np.exp(logvals - m[None, :]).sum(axis=0)
    return m + np.log(s)


# ---------------------------------------------------------------------------
# likelihood-ratio objective
#
# f(theta) = v(theta)' M(theta)^{-1} v(theta) with
#   M(theta) = s^2 m11 + 2 s c m12 + c^2 m22   (k x k, PD for every theta)
#   v(theta) = s v1 + c v2                     (k,)
# where (s, c) = (sin theta, cos theta). m11/m12/m22 come from the blocks of
# the inverse variance and are shared across draws; (v1, v2) vary per draw.


def _objective_eval(m11, m12, m22, v1, v2, s, c):
    k = v1.shape[0]
    mat = np.empty((k, k))
    rhs = np.empty(k)
    ss = s * s
    sc = 2.0 * s * c
    cc = c * c
    for i in range(k):
        rhs[i] = s * v1[i] + c * v2[i]
        for j in range(i, k):
            mat[i, j] = ss * m11[i, j] + sc * m12[i, j] + cc * m22[i, j]
    # Cholesky (lower) in place, then two triangular solves; PD by construction.
    for i in range(k):
        for j in range(i, k):
            acc = mat[i, j]
            for p in range(i):
                acc -= mat[i, p] * mat[j, p]
            if i == j:
                mat[i, i] = math.sqrt(acc)
            else:
                mat[j, i] = acc / mat[i, i]
    f = 0.0
    for i in range(k):
        acc = rhs[i]
        for p in range(i):
            acc -= mat[i, p] * rhs[p]
        rhs[i] = acc / mat[i, i]
        f += rhs[i] * rhs[i]
    return f


def _golden_refine(m11, m12, m22, v1, v2, a, b, xtol, maxiter):
    """Golden-section maximization on [a, b], then one parabolic step."""
    lo = -_HALF_PI
    hi = _HALF_PI
    width = b - a
    c1 = a + _INVPHI2 * width
    c2 = a + _INVPHI * width
    fc1 = _objective_eval(m11, m12, m22, v1, v2, math.sin(c1), math.cos(c1))
    fc2 = _objective_eval(m11, m12, m22, v1, v2, math.sin(c2), math.cos(c2))
    it = 0
    while (b - a) > xtol and it < maxiter:
        if fc1 > fc2:
            b = c2
            c2 = c1
            fc2 = fc1
            width = b - a
            c1 = a + _INVPHI2 * width
            fc1 = _objective_eval(m11, m12, m22, v1, v2, math.sin(c1), math.cos(c1))
        else:
            a = c1
            c1 = c2
            fc1 = fc2
            width = b - a
            c2 = a + _INVPHI * width
            fc2 = _objective_eval(m11, m12, m22, v1, v2, math.sin(c2), math.cos(c2))
        it += 1
    if fc1 >= fc2:
        xb = c1
        fb = fc1
    else:
        xb = c2
        fb = fc2

    # one quadratic-interpolation refinement through (c1, midpoint, c2)
    xm2 = 0.5 * (a + b)
    fm2 = _objective_eval(m11, m12, m22, v1, v2, math.sin(xm2), math.cos(xm2))
    if fm2 > fb:
        xb = xm2
        fb = fm2
    d21 = xm2 - c1
    d23 = xm2 - c2
    num = d21 * d21 * (fm2 - fc2) - d23 * d23 * (fm2 - fc1)
    den = d21 * (fm2 - fc2) - d23 * (fm2 - fc1)
    if abs(den) > 1e-300:
        xv = xm2 - 0.5 * num / den
        if lo < xv < hi:
            fv = _objective_eval(m11, m12, m22, v1, v2, math.sin(xv), math.cos(xv))
            if fv > fb:
                xb = xv
                fb = fv
    return xb, fb


def _local_max(m11, m12, m22, v1, v2, x0, xtol, maxiter, h0, grow):
    """Bounded local maximization from x0: probe both sides at step h0, climb
    uphill in the better direction with steps growing by ``grow``, then
    golden-section + one parabolic step inside the resulting bracket.

    (h0, grow) set the locality scale: how far a start can wander from its
    own basin before committing.
    """
    lo = -_HALF_PI
    hi = _HALF_PI
    f0 = _objective_eval(m11, m12, m22, v1, v2, math.sin(x0), math.cos(x0))
    xr = x0 + h0 if x0 + h0 < hi else hi
    xl = x0 - h0 if x0 - h0 > lo else lo
    fr = _objective_eval(m11, m12, m22, v1, v2, math.sin(xr), math.cos(xr))
    fl = _objective_eval(m11, m12, m22, v1, v2, math.sin(xl), math.cos(xl))
    direction = 1.0 if fr >= fl else -1.0
    fprobe = fr if fr >= fl else fl

    if fprobe < f0:
        # both probes downhill: the start sits on a peak at this resolution
        xb, fb = _golden_refine(m11, m12, m22, v1, v2, xl, xr, xtol, maxiter)
    else:
        xm = x0
        fm = f0
        a = x0
        step = h0
        xn = x0 + direction * h0
        if xn > hi:
            xn = hi
        if xn < lo:
            xn = lo
        fn = fprobe
        while True:
            if fn < fm or xn == hi or xn == lo:
                b = xn
                break
            a = xm
            xm = xn
            fm = fn
            step *= grow
            xn = xm + direction * step
            if xn > hi:
                xn = hi
            if xn < lo:
                xn = lo
            fn = _objective_eval(m11, m12, m22, v1, v2, math.sin(xn), math.cos(xn))
        if direction > 0.0:
            xb, fb = _golden_refine(m11, m12, m22, v1, v2, a, b, xtol, maxiter)
        else:
            xb, fb = _golden_refine(m11, m12, m22, v1, v2, b, a, xtol, maxiter)
    if f0 > fb:
        xb = x0
        fb = f0
    return xb, fb


def _multistart_batch_loop(m11, m12, m22, v1s, v2s, rand_starts, fixed_starts,
                           xtol, maxiter, h0, grow):
    n_draws = v1s.shape[0]
    n_rand = rand_starts.shape[1]
    n_fixed = fixed_starts.shape[0]
    best_f = np.empty(n_draws)
    best_x = np.empty(n_draws)
    best_i = np.empty(n_draws, dtype=np.int64)
    for d in prange(n_draws):
        bf = -np.inf
        bx = 0.0
        bi = -1
        for s in range(n_rand + n_fixed):
            x0 = rand_starts[d, s] if s < n_rand else fixed_starts[s - n_rand]
            x, f = _local_max(
                m11, m12, m22, v1s[d], v2s[d], x0, xtol, maxiter, h0, grow
            )
            if f > bf:
                bf = f
                bx = x
                bi = s
        best_f[d] = bf
        best_x[d] = bx
        best_i[d] = bi
    return best_f, best_x, best_i


def _grid_eval_loop(m11, m12, m22, v1, v2, thetas):
    n = thetas.shape[0]
    out = np.empty(n)
    for i in prange(n):
        out[i] = _objective_eval(
            m11, m12, m22, v1, v2, math.sin(thetas[i]), math.cos(thetas[i])
        )
    return out


def objective_grid_numpy(m11, m12, m22, v1, v2, thetas):
    """Vectorized objective over a theta grid for a single draw."""
    s = np.sin(thetas)
    c = np.cos(thetas)
    mats = (
        (s * s)[:, None, None] * m11
        + (2.0 * s * c)[:, None, None] * m12
        + (c * c)[:, None, None] * m22
    )
    vs = s[:, None] * v1 + c[:, None] * v2
    sol = np.linalg.solve(mats, vs[..., None])[..., 0]
    return np.einsum("ni,ni->n", vs, sol)


if NUMBA_ENABLED:
    # Rebind the shared names so numba resolves the jitted call chain when it
    # compiles the outer loops on first use.
    _objective_eval = njit(cache=True)(_objective_eval)
    _golden_refine = njit(cache=True)(_golden_refine)
    _local_max = njit(cache=True)(_local_max)
    _multistart_compiled = njit(parallel=True, cache=True)(_multistart_batch_loop)
    _qf_compiled = njit(parallel=True, cache=True)(_qf_batch_loop)
    _grid_compiled = njit(parallel=True, cache=True)(_grid_eval_loop)

    def qf_batch(basis, w):
        return _qf_compiled(np.ascontiguousarray(basis), np.ascontiguousarray(w))

    def multistart_batch(m11, m12, m22, v1s, v2s, rand_starts, fixed_starts,
                         xtol, maxiter, h0, grow):
        return _multistart_compiled(
            np.ascontiguousarray(m11),
            np.ascontiguousarray(m12),
            np.ascontiguousarray(m22),
            np.ascontiguousarray(v1s),
            np.ascontiguousarray(v2s),
            np.ascontiguousarray(rand_starts),
            np.ascontiguousarray(fixed_starts),
            float(xtol),
            int(maxiter),
            float(h0),
            float(grow),
        )

    def objective_grid(m11, m12, m22, v1, v2, thetas):
        return _grid_compiled(
            np.ascontiguousarray(m11),
            np.ascontiguousarray(m12),
            np.ascontiguousarray(m22),
            np.ascontiguousarray(v1),
            np.ascontiguousarray(v2),
            np.ascontiguousarray(thetas),
        )

else:
    qf_batch = qf_batch_numpy
    multistart_batch = _multistart_batch_loop
    objective_grid = objective_grid_numpy


def set_num_threads(n: int) -> None:
    """Cap kernel parallelism; no-op on the fallback backend."""
    if NUMBA_ENABLED and n > 0:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
