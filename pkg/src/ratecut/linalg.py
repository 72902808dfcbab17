"""Dense symmetric linear algebra primitives shared by all modules.

Everything runs in float64. The factorizations are backed by LAPACK via
numpy/scipy; a slow cyclic-Jacobi eigensolver lives in the test suite as an
independent oracle.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

SYM_TOL = 1e-10
PSD_TOL = 1e-8


class FactorizationError(RuntimeError):
    """Raised when a Cholesky factorization fails (matrix not SPD)."""


def _as_symmetric(m, name="matrix", tol=SYM_TOL):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    if m.size:
        skew = float(np.abs(m - m.T).max())
        if skew > tol:
            raise ValueError(f"{name} is not symmetric: max |m - m.T| = {skew:.3e}")
    return m


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition of a symmetric matrix, eigenvalues ascending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns are orthonormal eigenvectors


def sym_eig(m) -> SymEig:
    """Eigendecomposition of a symmetric matrix.

    Raises ValueError if the input is not square or not symmetric within
    ``SYM_TOL``.
    """
    m = _as_symmetric(m)
    w, v = np.linalg.eigh(m)
    return SymEig(w, v)


def logdet_ipsd(m, scale: float) -> float:
    """log det(I + scale * m) for symmetric PSD ``m`` and positive ``scale``.

    Computed from the eigenvalues of ``m``: sum of log(1 + scale * lam).
    Callers holding a tall matrix Z should pass whichever of Z Z^T / Z^T Z
    is smaller; both give the same value.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    w = sym_eig(m).eigenvalues
    if w.size and w[0] < -PSD_TOL:
        raise ValueError(f"matrix is not PSD: smallest eigenvalue {w[0]:.3e}")
    w = np.clip(w, 0.0, None)
    return float(np.log1p(scale * w).sum())


def solve_spd(m, b) -> np.ndarray:
    """Solve m x = b for symmetric positive-definite m via Cholesky."""
    m = _as_symmetric(m)
    b = np.asarray(b, dtype=np.float64)
    try:
        c, lower = scipy.linalg.cho_factor(m, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise FactorizationError(f"Cholesky failed, matrix is not SPD: {exc}") from exc
    return scipy.linalg.cho_solve((c, lower), b, check_finite=False)
