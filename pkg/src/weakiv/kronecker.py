"""Kronecker-structured variance: factorization, Q statistic, noncentral density.

When ``Sigma = Omega kron Phi`` the likelihood-ratio statistic has a closed
form equal to the quasi-likelihood-ratio statistic, the maximal invariant
collapses to the Gram matrix of [S : T], and its density involves a modified
Bessel function of the first kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, ive

from .model import STDecomposition
from .numerics import SymPD


@dataclass(frozen=True)
class KroneckerForm:
    """Factorization Sigma = Omega kron Phi, with Phi normalized to trace k."""

    omega: SymPD
    phi: SymPD
    omega0: SymPD  # B0' Omega B0 at the beta0 the factorization was built for

    @property
    def k(self) -> int:
        return self.phi.dim


@dataclass(frozen=True)
class QStat:
    """Gram matrix entries (S'S, S'T, T'T) of the [S : T] pair."""

    q_s: float
    q_st: float
    q_t: float

    def __post_init__(self) -> None:
        if self.q_s < 0 or self.q_t < 0:
            raise ValueError("diagonal Gram entries must be nonnegative")
        scale = max(self.q_s * self.q_t, 1.0)
        if self.q_s * self.q_t - self.q_st**2 < -1e-10 * scale:
            raise ValueError("Gram matrix violates Cauchy-Schwarz")

    @property
    def det(self) -> float:
        return self.q_s * self.q_t - self.q_st**2


def detect_kronecker(
    sigma: SymPD, k: int, beta0: float = 0.0, tol: float = 1e-8
) -> KroneckerForm | None:
    """Nearest Kronecker factorization by the rank-one rearrangement test.

    Rearranges the 2k x 2k variance into a 4 x k^2 matrix whose best rank-one
    approximation yields candidate factors; returns the factorization only if
    the relative reconstruction error is below ``tol`` and both factors are
    positive definite. Phi is normalized to trace k.
    """
    s = sigma.values
    if sigma.dim != 2 * k:
        raise ValueError("sigma dimension must be 2k")
    blocks = np.empty((4, k * k))
    for j in range(2):  # column-major block order matches vec convention
        for i in range(2):
            blocks[j * 2 + i] = s[i * k : (i + 1) * k, j * k : (j + 1) * k].reshape(
                -1, order="F"
            )
    u, sv, vt = np.linalg.svd(blocks, full_matrices=False)
    omega_vec = u[:, 0] * math.sqrt(sv[0])
    phi_vec = vt[0] * math.sqrt(sv[0])
    omega = omega_vec.reshape((2, 2), order="F")
    phi = phi_vec.reshape((k, k), order="F")
    if omega[0, 0] < 0:  # joint sign is unidentified; make factors PD-signed
        omega = -omega
        phi = -phi
    omega = 0.5 * (omega + omega.T)
    phi = 0.5 * (phi + phi.T)
    scale = np.trace(phi) / k
    if scale <= 0:
        return None
    phi = phi / scale
    omega = omega * scale
    recon = np.kron(omega, phi)
    err = np.linalg.norm(recon - s) / np.linalg.norm(s)
    if err > tol:
        return None
    if np.linalg.eigvalsh(omega)[0] <= 0 or np.linalg.eigvalsh(phi)[0] <= 0:
        return None
    b0 = np.array([[1.0, 0.0], [-beta0, 1.0]])
    return KroneckerForm(
        omega=SymPD(omega), phi=SymPD(phi), omega0=SymPD(b0.T @ omega @ b0)
    )


def c_d_coefficients(
    omega: SymPD, beta: float, beta0: float
) -> tuple[float, float]:
    """Scalars (c, d) with E[S] = c Phi^{-1/2} mu and E[T] = d Phi^{-1/2} mu.

    ``d`` carries the -1/2 normalization on (a0' Omega^{-1} a0): the mean of
    T follows from its definition, and simulated moments confirm this
    normalization (see the moment-matching tests).
    """
    b0 = np.array([1.0, -beta0])
    a0 = np.array([beta0, 1.0])
    a = np.array([beta, 1.0])
    om = omega.values
    om_inv = np.linalg.inv(om)
    c = (beta - beta0) / math.sqrt(float(b0 @ om @ b0))
    d = float(a @ om_inv @ a0) / math.sqrt(float(a0 @ om_inv @ a0))
    return c, d


def q_stat(st: STDecomposition) -> QStat:
    """Maximal invariant Gram entries (S'S, S'T, T'T)."""
    return QStat(
        q_s=float(st.S @ st.S),
        q_st=float(st.S @ st.T),
        q_t=float(st.T @ st.T),
    )


def xi_beta(q: QStat, c: float, d: float) -> float:
    """Noncentrality form c^2 q_S + 2 c d q_ST + d^2 q_T."""
    return c * c * q.q_s + 2.0 * c * d * q.q_st + d * d * q.q_t


def _log_bessel_ratio(nu: float, z: float) -> float:
    """log of z^{-nu} I_nu(z), continuous through z = 0."""
    if z < 1e-6:
        # I_nu(z) ~ (z/2)^nu / Gamma(nu+1) * (1 + z^2/(4(nu+1)))
        return (
            -nu * math.log(2.0)
            - gammaln(nu + 1.0)
            + math.log1p(z * z / (4.0 * (nu + 1.0)))
        )
    # ive is the exponentially scaled Bessel function: I_nu(z) = ive * e^z
    return math.log(float(ive(nu, z))) + z - nu * math.log(z)


def q_log_density(
    q: QStat, beta: float, lam: float, omega: SymPD, beta0: float, k: int
) -> float:
    """Log density of the maximal invariant Q at parameters (beta, lam)."""
    if k < 2:
        raise ValueError("the Q density requires k >= 2")
    detq = q.det
    if detq <= 0.0:
        raise ValueError("Q must be strictly positive definite (|q| > 0)")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    c, d = c_d_coefficients(omega, beta, beta0)
    nu = 0.5 * (k - 2)
    log_k0 = -(0.5 * (k + 2) * math.log(2.0) + 0.5 * math.log(math.pi)
               + float(gammaln(0.5 * (k - 1))))
    xi = max(xi_beta(q, c, d), 0.0)
    z = math.sqrt(lam * xi)
    # (lam*xi)^{-nu/2} I_nu(sqrt(lam*xi)) = z^{-nu} I_nu(z)
    return (
        log_k0
        - 0.5 * lam * (c * c + d * d)
        + 0.5 * (k - 3) * math.log(detq)
        - 0.5 * (q.q_s + q.q_t)
        + _log_bessel_ratio(nu, z)
    )


def q_density(
    q: QStat, beta: float, lam: float, omega: SymPD, beta0: float, k: int
) -> float:
    """Density of the maximal invariant Q, evaluated in log space."""
    return math.exp(q_log_density(q, beta, lam, omega, beta0, k))


def structural_action(
    g2: np.ndarray, delta: float, lam: float, psi: SymPD
) -> tuple[float, float, SymPD]:
    """Induced action on (delta, lam, structural variance Psi).

    ``g2`` is 2 x 2 lower triangular. Returns
    (delta*g11/(delta*g21 + g22), (delta*g21 + g22)^2 * lam, Gamma Psi Gamma').
    """
    g2 = np.asarray(g2, dtype=float)
    if g2.shape != (2, 2) or g2[0, 1] != 0.0:
        raise ValueError("g2 must be 2 x 2 lower triangular")
    g11, g21, g22 = g2[0, 0], g2[1, 0], g2[1, 1]
    denom = delta * g21 + g22
    if denom == 0.0:
        raise ValueError("delta*g21 + g22 == 0: transformed point escapes to infinity")
    gamma = np.array([[g11 * g22 / denom, 0.0], [g21, denom]])
    return (
        delta * g11 / denom,
        denom * denom * lam,
        SymPD(gamma @ psi.values @ gamma.T),
    )
