"""IV model data: sufficient statistics, S/T decomposition, null rotation, group actions.

The sufficient data for every test is the pair ``(R, Sigma)`` where
``R = (Z'Z)^{-1/2} Z'Y`` is the k x 2 moment matrix and ``Sigma`` is the
2k x 2k variance of ``vec(R)``. ``vec`` stacks columns (column-major)
throughout, so that ``(b' kron I) vec(R) = R b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NumericalError, SymPD, sym_inv_sqrt, sym_sqrt


class DataError(ValueError):
    """Input data violates a shape, rank, or format requirement."""


def vec(m: np.ndarray) -> np.ndarray:
    """Column-major stacking of a matrix into a vector."""
    return np.asarray(m, dtype=float).reshape(-1, order="F")


def unvec(v: np.ndarray, k: int) -> np.ndarray:
    """Inverse of :func:`vec` for a k x 2 matrix."""
    return np.asarray(v, dtype=float).reshape((k, 2), order="F")


@dataclass(frozen=True)
class IVDataset:
    """Raw data for one linear IV regression.

    Parameters
    ----------
    y1 : ndarray of shape (n,)
        Outcome.
    y2 : ndarray of shape (n,)
        Endogenous regressor.
    x : ndarray of shape (n, p)
        Exogenous controls; may have zero columns.
    ztilde : ndarray of shape (n, k)
        Instruments. ``[ztilde : x]`` must have full column rank and
        ``n > k + p``.
    """

    y1: np.ndarray
    y2: np.ndarray
    x: np.ndarray
    ztilde: np.ndarray

    def __post_init__(self) -> None:
        y1 = np.asarray(self.y1, dtype=float).ravel()
        y2 = np.asarray(self.y2, dtype=float).ravel()
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        z = np.atleast_2d(np.asarray(self.ztilde, dtype=float))
        n = y1.size
        if x.size == 0:
            x = np.empty((n, 0))
        if y2.size != n or z.shape[0] != n or x.shape[0] != n:
            raise DataError("y1, y2, x, ztilde must share the observation count")
        k, p = z.shape[1], x.shape[1]
        if k < 1:
            raise DataError("at least one instrument column is required")
        if n <= k + p:
            raise DataError(f"need n > k + p, got n={n}, k={k}, p={p}")
        zbar = np.hstack([z, x])
        sv = np.linalg.svd(zbar, compute_uv=False)
        if sv[-1] <= max(zbar.shape) * np.finfo(float).eps * sv[0]:
            raise DataError("[ztilde : x] is rank deficient")
        for name, arr in (("y1", y1), ("y2", y2), ("x", x), ("ztilde", z)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
            arr.setflags(write=False)
        object.__setattr__(self, "y1", y1)
        object.__setattr__(self, "y2", y2)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "ztilde", z)

    @property
    def n(self) -> int:
        return self.y1.size

    @property
    def k(self) -> int:
        return self.ztilde.shape[1]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class ReducedForm:
    """The pair (R, Sigma): k x 2 moment matrix and 2k x 2k variance."""

    R: np.ndarray
    sigma: SymPD

    def __post_init__(self) -> None:
        r = np.asarray(self.R, dtype=float)
        if r.ndim != 2 or r.shape[1] != 2:
            raise DataError(f"R must be k x 2, got shape {r.shape}")
        if not np.all(np.isfinite(r)):
            raise DataError("R contains non-finite values")
        if self.sigma.dim != 2 * r.shape[0]:
            raise DataError(
                f"sigma must be {2 * r.shape[0]} x {2 * r.shape[0]} for k={r.shape[0]}"
            )
        r = r.copy()
        r.setflags(write=False)
        object.__setattr__(self, "R", r)

    @property
    def k(self) -> int:
        return self.R.shape[0]


@dataclass(frozen=True)
class Hypothesis:
    """Null value beta0 and test level alpha."""

    beta0: float
    alpha: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not np.isfinite(self.beta0):
            raise ValueError("beta0 must be finite")

    @property
    def a0(self) -> np.ndarray:
        return np.array([self.beta0, 1.0])

    @property
    def b0(self) -> np.ndarray:
        return np.array([1.0, -self.beta0])

    @property
    def b0_matrix(self) -> np.ndarray:
        """Null rotation matrix [[1, 0], [-beta0, 1]]."""
        return np.array([[1.0, 0.0], [-self.beta0, 1.0]])


@dataclass(frozen=True)
class STDecomposition:
    """Pivotal statistic S and complete statistic T at the null value.

    ``c_mat`` and ``d_mat`` are the k x k SymPD weighting matrices: S has
    mean (beta - beta0) * c_mat @ mu and T has mean that reduces to
    d_mat @ mu at beta = beta0.
    """

    S: np.ndarray
    T: np.ndarray
    c_mat: SymPD
    d_mat: SymPD


@dataclass(frozen=True)
class NullRotated:
    """Data rotated so the first-column mean of R0 vanishes under the null."""

    R0: np.ndarray
    sigma0: SymPD
    beta0: float = 0.0

    def __post_init__(self) -> None:
        r = np.asarray(self.R0, dtype=float)
        if r.ndim != 2 or r.shape[1] != 2:
            raise DataError(f"R0 must be k x 2, got shape {r.shape}")
        if self.sigma0.dim != 2 * r.shape[0]:
            raise DataError("sigma0 dimension must be twice the instrument count")
        r = r.copy()
        r.setflags(write=False)
        object.__setattr__(self, "R0", r)

    @property
    def k(self) -> int:
        return self.R0.shape[0]


@dataclass(frozen=True)
class AlternativePoint:
    """A point (beta, delta, mu) in the alternative, with concentration lam."""

    beta: float
    delta: float
    mu: np.ndarray
    lam: float

    def __post_init__(self) -> None:
        mu = np.asarray(self.mu, dtype=float).ravel()
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)


@dataclass(frozen=True)
class GroupElement:
    """An element (g1, g2) of GL(k) x lower-triangular GL(2).

    ``g1`` is any invertible k x k matrix; ``g2`` is 2 x 2 lower triangular
    with nonzero diagonal and an exactly-zero upper-right entry. The density
    multipliers are ``chi1 = det(g1)^2`` and ``chi2 = |det(g2)|^k``.
    """

    g1: np.ndarray
    g2: np.ndarray

    def __post_init__(self) -> None:
        g1 = np.asarray(self.g1, dtype=float)
        g2 = np.asarray(self.g2, dtype=float)
        if g1.ndim != 2 or g1.shape[0] != g1.shape[1]:
            raise ValueError("g1 must be square")
        if g2.shape != (2, 2):
            raise ValueError("g2 must be 2 x 2")
        if g2[0, 1] != 0.0:
            raise ValueError("g2 must be lower triangular (upper-right exactly 0)")
        if abs(np.linalg.det(g1)) <= 0.0:
            raise ValueError("g1 must be invertible")
        if g2[0, 0] * g2[1, 1] == 0.0:
            raise ValueError("g2 diagonal entries must be nonzero")
        g1 = g1.copy()
        g2 = g2.copy()
        g1.setflags(write=False)
        g2.setflags(write=False)
        object.__setattr__(self, "g1", g1)
        object.__setattr__(self, "g2", g2)

    @property
    def g11(self) -> float:
        return float(self.g2[0, 0])

    @property
    def g21(self) -> float:
        return float(self.g2[1, 0])

    @property
    def g22(self) -> float:
        return float(self.g2[1, 1])

    @property
    def chi1(self) -> float:
        return float(np.linalg.det(self.g1) ** 2)

    def chi2(self, k: int) -> float:
        return float(abs(np.linalg.det(self.g2)) ** k)

    def __matmul__(self, other: "GroupElement") -> "GroupElement":
        """Left-action composition: act(self @ other, x) == act(self, act(other, x))."""
        return GroupElement(self.g1 @ other.g1, self.g2 @ other.g2)


# ---------------------------------------------------------------------------
# operations


def partial_out(data: IVDataset) -> tuple[np.ndarray, np.ndarray]:
    """Project the instruments off the controls: Z = M_X ztilde, Y = [y1 : y2].

    Raises :class:`DataError` when the projected instruments are rank
    deficient (e.g. instruments collinear with controls).
    """
    y = np.column_stack([data.y1, data.y2])
    if data.p == 0:
        z = data.ztilde.copy()
    else:
        coef, *_ = np.linalg.lstsq(data.x, data.ztilde, rcond=None)
        z = data.ztilde - data.x @ coef
    sv = np.linalg.svd(z, compute_uv=False)
    scale = sv[0] if sv[0] > 0 else 1.0
    if sv[-1] <= 1e-10 * scale:
        raise DataError("instruments are rank deficient after partialling out controls")
    return z, y


def reduce(z: np.ndarray, y: np.ndarray, sigma: SymPD) -> ReducedForm:
    """Build the sufficient data R = (Z'Z)^{-1/2} Z'Y paired with ``sigma``."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if z.ndim != 2 or y.ndim != 2 or y.shape[1] != 2 or z.shape[0] != y.shape[0]:
        raise DataError(f"incompatible shapes Z {z.shape}, Y {y.shape}")
    ztz = z.T @ z
    sv = np.linalg.eigvalsh(ztz)
    if sv[0] <= 1e-12 * max(sv[-1], 1.0):
        raise DataError("Z'Z is singular: instruments lack full column rank")
    r = sym_inv_sqrt(SymPD(ztz)).values @ (z.T @ y)
    return ReducedForm(R=r, sigma=sigma)


def estimate_sigma_plugin(z: np.ndarray, y: np.ndarray, bandwidth: int = 0) -> SymPD:
    """Bartlett-kernel (Newey-West) plug-in estimate of Var(vec((Z'Z)^{-1/2} Z'V)).

    Reduced-form residuals come from OLS of each column of Y on Z.
    ``bandwidth=0`` gives the heteroskedasticity-only estimator. The result is
    symmetrized and eigenvalue-floored at ``1e-10 * trace / (2k)`` so the
    SymPD contract always holds for non-degenerate residuals.
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = z.shape
    if bandwidth < 0 or bandwidth >= n:
        raise ValueError(f"bandwidth must lie in [0, n), got {bandwidth}")
    coef, *_ = np.linalg.lstsq(z, y, rcond=None)
    resid = y - z @ coef
    y_scale = max(1.0, float(np.max(np.abs(y))))
    if float(np.max(np.abs(resid))) <= 1e-12 * y_scale:
        raise NumericalError("degenerate residuals: V is numerically zero")
    f = sym_inv_sqrt(SymPD(z.T @ z)).values
    zf = z @ f  # rows are F z_i
    # h_i = v_i kron (F z_i), stacked as (n, 2k)
    h = np.concatenate([resid[:, :1] * zf, resid[:, 1:2] * zf], axis=1)
    sig = h.T @ h
    for lag in range(1, bandwidth + 1):
        w = 1.0 - lag / (bandwidth + 1.0)
        gam = h[lag:].T @ h[:-lag]
        sig = sig + w * (gam + gam.T)
    sig = 0.5 * (sig + sig.T)
    lam, v = np.linalg.eigh(sig)
    floor = 1e-10 * float(np.trace(sig)) / (2 * k)
    if floor <= 0:
        raise NumericalError("degenerate residual covariance")
    lam = np.maximum(lam, floor)
    return SymPD((v * lam) @ v.T)


class STContext:
    """Cached pieces of the S/T decomposition for a fixed (sigma, beta0).

    Also provides the linear reconstruction
    ``vec(R) = rec_s @ S + rec_t @ T`` used when simulating the pivotal
    statistic at a held-fixed value of T.
    """

    def __init__(self, sigma: SymPD, beta0: float):
        self.sigma = sigma
        self.beta0 = float(beta0)
        k = sigma.dim // 2
        self.k = k
        b0 = np.array([1.0, -beta0])
        a0 = np.array([beta0, 1.0])
        s = sigma.values
        s11, s12 = s[:k, :k], s[:k, k:]
        s21, s22 = s[k:, :k], s[k:, k:]
        # (b0' kron I) Sigma (b0 kron I)
        sb = (
            b0[0] * b0[0] * s11
            + b0[0] * b0[1] * (s12 + s21)
            + b0[1] * b0[1] * s22
        )
        self.sigma_inv = np.linalg.inv(s)
        si = self.sigma_inv
        sa = (
            a0[0] * a0[0] * si[:k, :k]
            + a0[0] * a0[1] * (si[:k, k:] + si[k:, :k])
            + a0[1] * a0[1] * si[k:, k:]
        )
        self.c_mat = sym_inv_sqrt(SymPD(0.5 * (sb + sb.T)))
        sa_spd = SymPD(0.5 * (sa + sa.T))
        self.d_bar = sym_inv_sqrt(sa_spd)  # [(a0' kron I) Sigma^{-1} (a0 kron I)]^{-1/2}
        self.d_mat = sym_sqrt(sa_spd)
        self.a0 = a0
        self.b0 = b0
        # reconstruction maps: vec(R) = rec_s @ S + rec_t @ T
        sig_b = b0[0] * s[:, :k] + b0[1] * s[:, k:]  # Sigma (b0 kron I)
        self.rec_s = sig_b @ self.c_mat.values
        a_kron = np.vstack([a0[0] * np.eye(k), a0[1] * np.eye(k)])
        self.rec_t = a_kron @ self.d_bar.values

    def st(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(S, T) for a single k x 2 moment matrix."""
        s_vec = self.c_mat.values @ (r @ self.b0)
        q = self.sigma_inv @ vec(r)
        t_vec = self.d_bar.values @ (self.a0[0] * q[: self.k] + self.a0[1] * q[self.k:])
        return s_vec, t_vec

    def st_batch(self, vec_r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(S, T) rows for a batch of stacked vec(R) rows, shape (m, 2k)."""
        k = self.k
        rb = self.b0[0] * vec_r[:, :k] + self.b0[1] * vec_r[:, k:]
        s_rows = rb @ self.c_mat.values.T
        q = vec_r @ self.sigma_inv.T
        at_q = self.a0[0] * q[:, :k] + self.a0[1] * q[:, k:]
        t_rows = at_q @ self.d_bar.values.T
        return s_rows, t_rows

    def reconstruct(self, s_rows: np.ndarray, t_vec: np.ndarray) -> np.ndarray:
        """vec(R) rows for simulated S draws at fixed T = t_vec."""
        base = self.rec_t @ t_vec
        return s_rows @ self.rec_s.T + base[None, :]


def st_decompose(rf: ReducedForm, hyp: Hypothesis) -> STDecomposition:
    """Split R into the pivotal S and the complete T at the hypothesized beta0."""
    ctx = STContext(rf.sigma, hyp.beta0)
    s_vec, t_vec = ctx.st(rf.R)
    return STDecomposition(S=s_vec, T=t_vec, c_mat=ctx.c_mat, d_mat=ctx.d_mat)


def null_rotate(rf: ReducedForm, hyp: Hypothesis) -> NullRotated:
    """Rotate to R0 = R B0 and Sigma0 = (B0' kron I) Sigma (B0 kron I)."""
    b0m = hyp.b0_matrix
    k = rf.k
    bk = np.kron(b0m.T, np.eye(k))
    sigma0 = SymPD(bk @ rf.sigma.values @ bk.T)
    return NullRotated(R0=rf.R @ b0m, sigma0=sigma0, beta0=hyp.beta0)


def null_rotate_inverse(nr: NullRotated) -> ReducedForm:
    """Undo the null rotation, reproducing (R, Sigma)."""
    b0m = np.array([[1.0, 0.0], [-nr.beta0, 1.0]])
    binv = np.array([[1.0, 0.0], [nr.beta0, 1.0]])
    k = nr.k
    bk = np.kron(binv.T, np.eye(k))
    sigma = SymPD(bk @ nr.sigma0.values @ bk.T)
    return ReducedForm(R=nr.R0 @ binv, sigma=sigma)


def null_stats(nr: NullRotated, alpha: float = 0.05) -> STDecomposition:
    """S/T decomposition computed directly in the rotated coordinates.

    Equals ``st_decompose`` on the unrotated data: the decomposition commutes
    with the null rotation.
    """
    rf0 = ReducedForm(R=nr.R0, sigma=nr.sigma0)
    return st_decompose(rf0, Hypothesis(beta0=0.0, alpha=alpha))


def act(g: GroupElement, nr: NullRotated) -> NullRotated:
    """Apply the sample-space action (R0, Sigma0) -> (g1 R0 g2', G Sigma0 G')."""
    big = np.kron(g.g2, g.g1)
    sigma0 = SymPD(big @ nr.sigma0.values @ big.T)
    return NullRotated(R0=g.g1 @ nr.R0 @ g.g2.T, sigma0=sigma0, beta0=nr.beta0)


def act_params(
    g: GroupElement, pt: AlternativePoint, sigma0: SymPD
) -> tuple[AlternativePoint, SymPD]:
    """Apply the induced parameter action to (delta, mu) and Sigma0.

    delta -> delta*g11 / (delta*g21 + g22); mu -> g1 mu (delta*g21 + g22).
    Raises when the denominator vanishes (the image escapes to infinity).
    """
    denom = pt.delta * g.g21 + g.g22
    if denom == 0.0:
        raise ValueError(
            "transformed parameter escapes to infinity: delta*g21 + g22 == 0"
        )
    delta_new = pt.delta * g.g11 / denom
    mu_new = (g.g1 @ pt.mu) * denom
    beta0 = pt.beta - pt.delta
    big = np.kron(g.g2, g.g1)
    sigma_new = SymPD(big @ sigma0.values @ big.T)
    new_pt = AlternativePoint(
        beta=beta0 + delta_new,
        delta=delta_new,
        mu=mu_new,
        lam=float(mu_new @ mu_new),
    )
    return new_pt, sigma_new
