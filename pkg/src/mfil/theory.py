"""Second-order analysis of scan orderings versus spatial filters.

A traversal reordering is a permutation matrix P, and the cross-covariance
of two reordered copies of the same random map is P_i Sigma P_j^T: the
spatial covariance is only shuffled, never reshaped, and its eigenvalue
multiset is untouched. A convolution is a structured (doubly block Toeplitz)
operator F, and the corresponding identity Sigma_ij = F_i Sigma F_j^T
reweights and reorients the covariance, moving the spectrum. Both identities
are linear in Sigma, so they hold exactly on finite-sample moments; this
module checks them numerically on small grids where the operators fit in
explicit matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LinearOperatorMatrix", "EmpiricalMoments", "empirical_moments",
    "permutation_matrix", "conv_as_matrix", "cross_covariance",
    "verify_permutation_identity", "verify_filter_identity",
    "jacobi_eigvals", "spectrum_report", "IdentityReport", "SpectrumReport",
]

_MAX_GRID = 16


@dataclass(frozen=True)
class LinearOperatorMatrix:
    """Explicit matrix form of a permutation or a vectorized convolution."""

    matrix: np.ndarray
    kind: str  # "permutation" | "filter"

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise ValueError("operator matrix must be two-dimensional")

    @property
    def shape(self):
        return self.matrix.shape

    def apply(self, vec: np.ndarray) -> np.ndarray:
        return self.matrix @ vec

    def is_permutation(self, tol: float = 0.0) -> bool:
        m = self.matrix
        if m.shape[0] != m.shape[1]:
            return False
        ones = np.abs(m - 1.0) <= tol
        zeros = np.abs(m) <= tol
        return bool(np.all(ones | zeros)
                    and np.all(ones.sum(axis=0) == 1)
                    and np.all(ones.sum(axis=1) == 1))


def permutation_matrix(perm) -> LinearOperatorMatrix:
    """Operator that maps x to x[perm]."""
    perm = np.asarray(perm, dtype=np.int64)
    n = perm.size
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError("perm must be a permutation of 0..n-1")
    m = np.zeros((n, n))
    m[np.arange(n), perm] = 1.0
    return LinearOperatorMatrix(m, "permutation")


def conv_as_matrix(kernel: np.ndarray, H: int, W: int,
                   padding: int = 0) -> LinearOperatorMatrix:
    """Stride-1 single-channel convolution as an explicit [H'W', HW] matrix.

    Row r holds the kernel taps contributing to output position r (doubly
    block Toeplitz). Grids are capped at 16x16 so the matrices stay small
    enough for exact-arithmetic-friendly eigenwork.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2:
        raise ValueError("kernel must be 2-D")
    if H > _MAX_GRID or W > _MAX_GRID:
        raise ValueError(f"grid {H}x{W} too large (max {_MAX_GRID})")
    kh, kw = kernel.shape
    oh = H + 2 * padding - kh + 1
    ow = W + 2 * padding - kw + 1
    if oh < 1 or ow < 1:
        raise ValueError("kernel larger than padded grid")
    m = np.zeros((oh * ow, H * W))
    for oy in range(oh):
        for ox in range(ow):
            row = oy * ow + ox
            for dy in range(kh):
                for dx in range(kw):
                    iy = oy - padding + dy
                    ix = ox - padding + dx
                    if 0 <= iy < H and 0 <= ix < W:
                        m[row, iy * W + ix] += kernel[dy, dx]
    return LinearOperatorMatrix(m, "filter")


@dataclass
class EmpiricalMoments:
    """Sample mean and biased (1/n) covariance of vectorized maps."""

    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def symmetry_error(self) -> float:
        return float(np.max(np.abs(self.covariance - self.covariance.T)))

    def min_eigenvalue(self) -> float:
        return float(jacobi_eigvals(self.covariance)[0])


def empirical_moments(samples) -> EmpiricalMoments:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = (xc.T @ xc) / n
    cov = 0.5 * (cov + cov.T)  # kill asymmetric roundoff
    return EmpiricalMoments(mu, cov, n)


def cross_covariance(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Biased sample cross-covariance E[(x - mu_x)(y - mu_y)^T]."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    n = xs.shape[0]
    xc = xs - xs.mean(axis=0)
    yc = ys - ys.mean(axis=0)
    return (xc.T @ yc) / n


@dataclass
class IdentityReport:
    name: str
    max_abs_error: float
    tolerance: float
    passed: bool

    def lines(self):
        return [f"{self.name}.max_abs_error: {self.max_abs_error:.3e}",
                f"{self.name}.tolerance: {self.tolerance:.1e}",
                f"{self.name}.passed: {self.passed}"]

    def __str__(self):
        return "\n".join(self.lines())


def _verify_identity(name, op_i: LinearOperatorMatrix,
                     op_j: LinearOperatorMatrix, moments: EmpiricalMoments,
                     samples, tol: float) -> IdentityReport:
    x = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    xi = x @ op_i.matrix.T
    xj = x @ op_j.matrix.T
    lhs = cross_covariance(xi, xj)
    rhs = op_i.matrix @ moments.covariance @ op_j.matrix.T
    err = float(np.max(np.abs(lhs - rhs)))
    return IdentityReport(name, err, tol, err <= tol)


def verify_permutation_identity(p_i: LinearOperatorMatrix,
                                p_j: LinearOperatorMatrix,
                                moments: EmpiricalMoments, samples,
                                tol: float = 1e-10) -> IdentityReport:
    """Cross-covariance of reordered copies equals P_i Sigma P_j^T.

    An exact linear-algebra identity on the empirical moments; errors above
    float roundoff indicate an implementation bug, hence the tight default
    tolerance.
    """
    for name, op in (("P_i", p_i), ("P_j", p_j)):
        if not op.is_permutation(tol=1e-12):
            raise ValueError(f"{name} is not a permutation matrix")
    return _verify_identity("permutation_identity", p_i, p_j, moments,
                            samples, tol)


def verify_filter_identity(f_i: LinearOperatorMatrix,
                           f_j: LinearOperatorMatrix,
                           moments: EmpiricalMoments, samples,
                           tol: float = 1e-10) -> IdentityReport:
    """Cross-covariance of filtered copies equals F_i Sigma F_j^T."""
    return _verify_identity("filter_identity", f_i, f_j, moments, samples,
                            tol)


def jacobi_eigvals(sym: np.ndarray, tol: float = 1e-12,
                   max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Self-contained (no external solver); sweeps until the off-diagonal
    Frobenius norm drops below ``tol`` (scaled by the matrix norm for
    conditioning safety). Returns eigenvalues sorted ascending.
    """
    a = np.asarray(sym, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if np.max(np.abs(a - a.T)) > 1e-8 * max(1.0, np.max(np.abs(a))):
        raise ValueError("matrix must be symmetric")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    if n == 1:
        return a.diagonal().copy()
    scale = max(1.0, float(np.linalg.norm(a)))
    for _ in range(max_sweeps):
        off = np.sqrt(max(0.0, np.sum(a * a) - np.sum(a.diagonal() ** 2)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                else:
                    # hypot avoids overflow for extreme theta
                    t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
    return np.sort(a.diagonal())


@dataclass
class SpectrumReport:
    eig_base: np.ndarray
    eig_permuted: np.ndarray
    eig_filtered: np.ndarray
    permutation_distance: float
    filter_distance: float
    tolerance: float = 1e-8

    @property
    def permutation_invariant(self) -> bool:
        return self.permutation_distance <= self.tolerance

    def lines(self):
        return [
            f"spectrum.permutation_distance: {self.permutation_distance:.3e}",
            f"spectrum.filter_distance: {self.filter_distance:.3e}",
            f"spectrum.permutation_invariant: {self.permutation_invariant}",
        ]

    def __str__(self):
        return "\n".join(self.lines())


def spectrum_report(sigma: np.ndarray, perm: LinearOperatorMatrix,
                    filt: LinearOperatorMatrix,
                    tolerance: float = 1e-8) -> SpectrumReport:
    """Compare eigenvalues of Sigma, P Sigma P^T and F Sigma F^T.

    Conjugation by an orthogonal permutation is a similarity transform, so
    the first two spectra must agree (asserted); a genuine filter reshapes
    the spectrum, and the report carries that distance.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.max(np.abs(sigma - sigma.T)) > 1e-10 * max(1.0, np.max(np.abs(sigma))):
        raise ValueError("sigma must be symmetric")
    eig_base = jacobi_eigvals(sigma)
    eig_perm = jacobi_eigvals(perm.matrix @ sigma @ perm.matrix.T)
    eig_filt = jacobi_eigvals(filt.matrix @ sigma @ filt.matrix.T)
    perm_dist = float(np.max(np.abs(eig_perm - eig_base)))
    if eig_filt.shape == eig_base.shape:
        filt_dist = float(np.max(np.abs(eig_filt - eig_base)))
    else:  # non-square filter output; compare padded spectra
        k = max(eig_filt.size, eig_base.size)
        a = np.zeros(k)
        b = np.zeros(k)
        a[-eig_base.size:] = eig_base
        b[-eig_filt.size:] = eig_filt
        filt_dist = float(np.max(np.abs(a - b)))
    report = SpectrumReport(eig_base, eig_perm, eig_filt, perm_dist,
                            filt_dist, tolerance)
    if not report.permutation_invariant:
        raise AssertionError(
            f"permutation conjugation moved the spectrum by {perm_dist:.3e} "
            f"(tolerance {tolerance:.1e})")
    return report
