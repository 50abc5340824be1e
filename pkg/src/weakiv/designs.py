"""Simulation designs: homoskedastic/Kronecker, near-singular, and custom blocks.

Designs specify the null-rotated variance Sigma0 and the instrument-strength
vector mu directly; draws of R0 at any alternative delta follow
``R0 ~ N(mu * (delta, 1), Sigma0)`` by Cholesky sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import AlternativePoint
from .numerics import NumericalError, RngStream, SymPD

NS_C11 = 1.0
NS_C12 = 100.0
NS_C22 = NS_C12**2 + NS_C12**-3


@dataclass(frozen=True)
class DesignSpec:
    """Parameters of one simulation design.

    kind
        ``"homoskedastic"``: structural errors with unit variance and
        correlation ``rho``; reduced-form variance evaluated at the null, so
        Sigma0 = Omega kron I_k; mu = sqrt(lam)/sqrt(k) * ones.
        ``"ns"``: near-singular blocks Sigma11 = c11 I, Sigma12 = c12 J,
        Sigma22 = c22 I with J the anti-diagonal flip; mu = sqrt(lam) e1.
        ``"custom"``: user-supplied (Sigma11, Sigma12, Sigma22) blocks.
    """

    kind: str
    k: int = 5
    lambda_per_k: float = 2.0
    rho: float = 0.0
    c11: float = NS_C11
    c12: float = NS_C12
    c22: float = NS_C22
    mu_shape: str = ""
    beta0: float = 0.0
    custom_blocks: tuple | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("homoskedastic", "ns", "custom"):
            raise ValueError(f"unknown design kind {self.kind!r}")
        if self.k < 2:
            raise ValueError("designs require k >= 2")
        if self.lambda_per_k <= 0:
            raise ValueError("lambda_per_k must be positive")
        if self.kind == "homoskedastic" and not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")
        if self.kind == "custom" and self.custom_blocks is None:
            raise ValueError("custom designs need custom_blocks=(S11, S12, S22)")
        if not self.mu_shape:
            shape = "ones" if self.kind == "homoskedastic" else "e1"
            object.__setattr__(self, "mu_shape", shape)
        if self.mu_shape not in ("e1", "ones"):
            raise ValueError("mu_shape must be 'e1' or 'ones'")

    @property
    def lam(self) -> float:
        return self.lambda_per_k * self.k


@dataclass(frozen=True)
class DrawBatch:
    """A batch of R0 draws with the generating truth attached."""

    draws: np.ndarray  # (n_draws, k, 2)
    truth: AlternativePoint
    sigma0: SymPD


def anti_diagonal(k: int) -> np.ndarray:
    """J_k: ones on the anti-diagonal. Satisfies J_k @ J_k = I_k."""
    return np.eye(k)[::-1].copy()


def structural_to_reduced(psi: np.ndarray, beta: float) -> np.ndarray:
    """Map the structural 2x2 variance of (u, v2) to that of (v1, v2).

    Uses v1 = u + v2 * beta, i.e. Omega = A Psi A' with A = [[1, beta], [0, 1]].
    """
    a = np.array([[1.0, beta], [0.0, 1.0]])
    return a @ np.asarray(psi, dtype=float) @ a.T


def assemble(spec: DesignSpec) -> tuple[SymPD, np.ndarray]:
    """Build (Sigma0, mu) for a design.

    Raises :class:`NumericalError` with the smallest eigenvalue when the
    assembled variance is not positive definite.
    """
    k = spec.k
    lam = spec.lam
    if spec.kind == "homoskedastic":
        psi = np.array([[1.0, spec.rho], [spec.rho, 1.0]])
        omega = structural_to_reduced(psi, spec.beta0)
        b0 = np.array([[1.0, 0.0], [-spec.beta0, 1.0]])
        omega0 = b0.T @ omega @ b0
        sigma0 = np.kron(omega0, np.eye(k))
    elif spec.kind == "ns":
        j = anti_diagonal(k)
        sigma0 = np.block(
            [[spec.c11 * np.eye(k), spec.c12 * j], [spec.c12 * j, spec.c22 * np.eye(k)]]
        )
    else:
        s11, s12, s22 = (np.asarray(b, dtype=float) for b in spec.custom_blocks)
        if s11.shape != (k, k) or s12.shape != (k, k) or s22.shape != (k, k):
            raise ValueError(f"custom blocks must each be {k} x {k}")
        sigma0 = np.block([[s11, s12], [s12.T, s22]])

    lam_min = float(np.linalg.eigvalsh(0.5 * (sigma0 + sigma0.T))[0])
    if lam_min <= 0:
        raise NumericalError(
            f"assembled variance is not positive definite: "
            f"smallest eigenvalue {lam_min:.6e}"
        )
    if spec.mu_shape == "e1":
        mu = np.zeros(k)
        mu[0] = np.sqrt(lam)
    else:
        mu = np.full(k, np.sqrt(lam) / np.sqrt(k))
    return SymPD(sigma0), mu


def draw_r0(
    sigma0: SymPD,
    mu: np.ndarray,
    delta: float,
    n_draws: int,
    rng: RngStream,
) -> DrawBatch:
    """Sample R0 ~ N(mu * (delta, 1), Sigma0) by Cholesky."""
    mu = np.asarray(mu, dtype=float).ravel()
    k = mu.size
    if sigma0.dim != 2 * k:
        raise ValueError("sigma0 dimension must be 2k")
    mean = np.concatenate([delta * mu, mu])
    chol = np.linalg.cholesky(sigma0.values)
    z = rng.generator().standard_normal((n_draws, 2 * k))
    flat = mean[None, :] + z @ chol.T
    draws = np.stack([flat[:, :k], flat[:, k:]], axis=2)
    truth = AlternativePoint(
        beta=delta, delta=delta, mu=mu, lam=float(mu @ mu)
    )
    return DrawBatch(draws=draws, truth=truth, sigma0=sigma0)


def draw_vec_r0(
    sigma0: SymPD, mu: np.ndarray, delta: float, n_draws: int, rng: RngStream
) -> np.ndarray:
    """Stacked vec(R0) rows, shape (n_draws, 2k); fast path for the harness."""
    mu = np.asarray(mu, dtype=float).ravel()
    mean = np.concatenate([delta * mu, mu])
    chol = np.linalg.cholesky(sigma0.values)
    z = rng.generator().standard_normal((n_draws, 2 * mu.size))
    return mean[None, :] + z @ chol.T
