"""Deterministic numerical kernel.

Symmetric matrix roots, orthogonal projections, Gauss-Legendre quadrature on
the open angle interval, counter-based RNG streams, and empirical quantiles.
Everything here is a pure function of its inputs and safe to call from any
thread.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1

HALF_PI = math.pi / 2.0


class NumericalError(RuntimeError):
    """A numerical precondition failed (non-PD matrix, rank deficiency, ...)."""


@dataclass(frozen=True)
class SymPD:
    """A dense symmetric positive definite matrix, validated on construction.

    Parameters
    ----------
    values : ndarray of shape (dim, dim)
        Symmetric to 1e-12 relative; all eigenvalues must be strictly positive.

    Raises
    ------
    NumericalError
        If the matrix is not square, not symmetric, or not positive definite.
        The error names the offending (smallest) eigenvalue.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.values, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise NumericalError(f"expected a square matrix, got shape {a.shape}")
        scale = max(1.0, float(np.max(np.abs(a))))
        if np.max(np.abs(a - a.T)) > 1e-12 * scale:
            raise NumericalError("matrix is not symmetric to 1e-12 relative")
        a = 0.5 * (a + a.T)
        lam_min = float(np.linalg.eigvalsh(a)[0])
        if not lam_min > 0.0:
            raise NumericalError(
                f"matrix is not positive definite: smallest eigenvalue {lam_min:.6e}"
            )
        a.setflags(write=False)
        object.__setattr__(self, "values", a)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def sym_sqrt(a: SymPD) -> SymPD:
    """Unique symmetric PD square root of ``a`` (eigendecomposition convention)."""
    lam, v = np.linalg.eigh(a.values)
    return SymPD((v * np.sqrt(lam)) @ v.T)


def sym_inv_sqrt(a: SymPD) -> SymPD:
    """Unique symmetric PD inverse square root ``B`` with ``B a B = I``.

    Uses the eigendecomposition convention, so the result commutes with ``a``.
    """
    lam, v = np.linalg.eigh(a.values)
    return SymPD((v / np.sqrt(lam)) @ v.T)


def projection(a: np.ndarray) -> np.ndarray:
    """Orthogonal projector ``N_A = A (A'A)^{-1} A'`` onto the column span of ``a``.

    Parameters
    ----------
    a : ndarray of shape (n, m)
        Must have full column rank.

    Raises
    ------
    NumericalError
        If ``a`` is rank deficient.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.ndim != 2:
        raise NumericalError(f"expected a matrix, got shape {a.shape}")
    if a.shape[1] > a.shape[0]:
        raise NumericalError("more columns than rows: cannot have full column rank")
    sv = np.linalg.svd(a, compute_uv=False)
    if sv.size == 0 or sv[-1] <= max(a.shape) * np.finfo(float).eps * sv[0]:
        raise NumericalError("rank-deficient matrix passed to projection")
    q, _ = np.linalg.qr(a)
    return q @ q.T


def annihilator(a: np.ndarray) -> np.ndarray:
    """``M_A = I - N_A``, the projector onto the orthogonal complement."""
    n_a = projection(a)
    return np.eye(n_a.shape[0]) - n_a


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature nodes and weights on the open interval (-pi/2, pi/2)."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise ValueError("nodes and weights must be 1-d arrays of equal length")
        if np.any(nodes <= -HALF_PI) or np.any(nodes >= HALF_PI):
            raise ValueError("nodes must lie strictly inside (-pi/2, pi/2)")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("nodes must be strictly increasing")
        if np.any(weights <= 0):
            raise ValueError("weights must be positive")
        if abs(weights.sum() - math.pi) > 1e-10:
            raise ValueError("weights must sum to the interval length pi")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def n(self) -> int:
        return self.nodes.size


DEFAULT_QUADRATURE_NODES = 201


def gauss_legendre(n: int) -> QuadratureRule:
    """n-point Gauss-Legendre rule mapped from [-1, 1] to (-pi/2, pi/2)."""
    if n < 2:
        raise ValueError("quadrature order must be at least 2")
    x, w = np.polynomial.legendre.leggauss(int(n))
    return QuadratureRule(nodes=x * HALF_PI, weights=w * HALF_PI)


def gauss_legendre_split(n: int, split_at: float = 0.0) -> QuadratureRule:
    """Composite Gauss-Legendre rule on (-pi/2, pi/2) split at an interior point.

    The integrands here carry an |angle - split_at| kink (an absolute value
    raised to an odd power); a single panel converges only algebraically
    through it, while panels meeting at the kink restore exponential
    convergence. Falls back to the single-panel rule when the split point
    sits at the boundary.
    """
    if n < 4:
        raise ValueError("a split rule needs at least 4 nodes")
    if not -HALF_PI < split_at < HALF_PI:
        raise ValueError("split point must lie inside (-pi/2, pi/2)")
    if min(split_at + HALF_PI, HALF_PI - split_at) < 1e-9:
        return gauss_legendre(n)
    n_left = n // 2
    n_right = n - n_left
    x, w = np.polynomial.legendre.leggauss(n_left)
    a, b = -HALF_PI, split_at
    nodes_l = 0.5 * (b - a) * x + 0.5 * (a + b)
    weights_l = 0.5 * (b - a) * w
    x, w = np.polynomial.legendre.leggauss(n_right)
    a, b = split_at, HALF_PI
    nodes_r = 0.5 * (b - a) * x + 0.5 * (a + b)
    weights_r = 0.5 * (b - a) * w
    return QuadratureRule(
        nodes=np.concatenate([nodes_l, nodes_r]),
        weights=np.concatenate([weights_l, weights_r]),
    )


def empirical_quantile(xs, p: float) -> float:
    """Ceiling-convention empirical quantile: the ceil(p*M)-th order statistic.

    The ceiling convention is conservative for test size. ``p*M`` values that
    sit within 1e-9 of an integer are treated as exact to avoid off-by-one
    artifacts from binary floating point.
    """
    xs = np.asarray(xs, dtype=float).ravel()
    if xs.size == 0:
        raise ValueError("empirical_quantile of an empty sample")
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    m = xs.size
    t = p * m
    r = round(t)
    idx = int(r) if abs(t - r) < 1e-9 else math.ceil(t)
    idx = min(max(idx, 1), m)
    return float(np.partition(xs, idx - 1)[idx - 1])


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _index_to_word(ix) -> int:
    if isinstance(ix, (int, np.integer)):
        return int(ix) & _MASK64
    if isinstance(ix, str):
        digest = hashlib.blake2b(ix.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"stream index must be int or str, got {type(ix).__name__}")


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream addressed by (seed, stream_id).

    Identical (seed, stream_id) pairs produce identical draw sequences
    regardless of thread count or platform; child streams are derived by a
    stable 64-bit mix so that replication- and draw-level streams can be
    reproduced independently of execution order.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array(
            [self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64
        )
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *indices) -> "RngStream":
        sid = self.stream_id & _MASK64
        for ix in indices:
            sid = _splitmix64(sid ^ _index_to_word(ix))
        return RngStream(seed=self.seed, stream_id=sid)
