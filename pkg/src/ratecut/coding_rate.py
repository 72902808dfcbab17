"""Coding-rate objective terms and their analytic gradients.

For a batch of unit-norm embeddings Z (d x n) and a row-stochastic soft
membership Pi (n x k):

    R(Z)      = logdet(I + (d / (n eps^2)) Z Z^T)
    Rc(Z, Pi) = (1/n) sum_l N_l logdet(I + (d / (N_l eps^2)) Z Diag(Pi_l) Z^T)

with soft cluster mass N_l = sum_i pi_{il}. The training loss is the negated
rate reduction -R + Rc. Each per-cluster logdet is evaluated on whichever
Gram side is smaller, and a single eigendecomposition per term serves both
the value and the gradient.
"""

from dataclasses import dataclass, field

import numpy as np

# Clusters with soft mass below this contribute zero value and zero gradient,
# avoiding 0/0 in the d / (N_l eps^2) scale.
MIN_CLUSTER_MASS = 1e-8

UNIT_NORM_TOL = 1e-6
ROW_SUM_TOL = 1e-6


@dataclass
class EmbeddingBatch:
    """A d x n matrix of unit-norm embedding columns with precision eps."""

    z: np.ndarray
    eps: float
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 2:
            raise ValueError(f"z must be 2-d, got shape {self.z.shape}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.validate and self.z.shape[1] > 0:
            norms = np.linalg.norm(self.z, axis=0)
            err = float(np.abs(norms - 1.0).max())
            if err > UNIT_NORM_TOL:
                raise ValueError(f"columns of z must be unit norm (max deviation {err:.3e})")

    @property
    def d(self):
        return self.z.shape[0]

    @property
    def n(self):
        return self.z.shape[1]


@dataclass
class Membership:
    """An n x k row-stochastic matrix of soft cluster assignments."""

    pi: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        if self.pi.ndim != 2:
            raise ValueError(f"pi must be 2-d, got shape {self.pi.shape}")
        if self.validate:
            if self.pi.min(initial=0.0) < -1e-12:
                raise ValueError("pi entries must be nonnegative")
            row_sums = self.pi.sum(axis=1)
            if row_sums.size:
                err = float(np.abs(row_sums - 1.0).max())
                if err > ROW_SUM_TOL:
                    raise ValueError(f"pi rows must sum to 1 (max deviation {err:.3e})")

    @property
    def n(self):
        return self.pi.shape[0]

    @property
    def k(self):
        return self.pi.shape[1]


def _eigh_psd(m):
    # Symmetrize before eigh to shed accumulation error from the Gram product.
    w, u = np.linalg.eigh((m + m.T) / 2.0)
    return np.clip(w, 0.0, None), u


def rate_R(zb: EmbeddingBatch):
    """Whole-batch coding rate and its gradient w.r.t. Z.

    Returns (value, grad_z) where grad_z = 2a (I + a Z Z^T)^{-1} Z with
    a = d / (n eps^2), evaluated through the n x n Gram side.
    """
    d, n = zb.z.shape
    if n == 0:
        raise ValueError("empty batch: rate is undefined for n = 0")
    alpha = d / (n * zb.eps**2)
    gram = zb.z.T @ zb.z
    w, u = _eigh_psd(gram)
    value = float(np.log1p(alpha * w).sum())
    # (I + a Z Z^T)^{-1} Z = Z U diag(1 / (1 + a w)) U^T  (push-through identity)
    grad_z = 2.0 * alpha * (zb.z @ ((u / (1.0 + alpha * w)) @ u.T))
    return value, grad_z


def rate_Rc(zb: EmbeddingBatch, m: Membership):
    """Per-cluster coding rate and its gradients w.r.t. Z and Pi.

    The Pi gradient combines the logdet dependence through Diag(Pi_l) with
    the dependence through the soft mass N_l:

        d value / d pi_{il} = (logdet(M_l) + N_l a_l z_i^T M_l^{-1} z_i
                               - a_l tr(M_l^{-1} Z P_l Z^T)) / n

    where M_l = I + a_l Z Diag(Pi_l) Z^T and a_l = d / (N_l eps^2).
    """
    d, n = zb.z.shape
    if m.pi.shape[0] != n:
        raise ValueError(f"pi has {m.pi.shape[0]} rows but batch has {n} columns")
    if n == 0:
        raise ValueError("empty batch: rate is undefined for n = 0")
    k = m.pi.shape[1]
    value = 0.0
    grad_z = np.zeros_like(zb.z)
    grad_pi = np.zeros((n, k))
    col_sq = np.einsum("ij,ij->j", zb.z, zb.z)  # |z_i|^2, used on the n-side path
    for ell in range(k):
        weights = np.clip(m.pi[:, ell], 0.0, None)
        mass = float(weights.sum())
        if mass < MIN_CLUSTER_MASS:
            continue
        alpha = d / (mass * zb.eps**2)
        sq = np.sqrt(weights)
        y = zb.z * sq  # d x n, so that Z Diag(pi_l) Z^T = Y Y^T
        if d <= n:
            w, v = _eigh_psd(y @ y.T)
            ld = float(np.log1p(alpha * w).sum())
            inv_scaled = v / (1.0 + alpha * w)  # V diag(1/(1+a w))
            minv_y = inv_scaled @ (v.T @ y)  # M^{-1} Y
            grad_z += (mass / n) * 2.0 * alpha * (minv_y * sq)
            proj = v.T @ zb.z  # d x n
            quad = np.einsum("ji,ji->i", proj, proj / (1.0 + alpha * w)[:, None])
            trace_term = float((w / (1.0 + alpha * w)).sum())
        else:
            w, u = _eigh_psd(y.T @ y)
            ld = float(np.log1p(alpha * w).sum())
            kernel = (u / (1.0 + alpha * w)) @ u.T  # (I + a Y^T Y)^{-1}
            grad_z += (mass / n) * 2.0 * alpha * ((y @ kernel) * sq)
            zy = zb.z.T @ y  # n x n, row i = z_i^T Y
            # z_i^T M^{-1} z_i via Woodbury: |z_i|^2 - a (z_i^T Y) K (Y^T z_i)
            quad = col_sq - alpha * np.einsum("ij,ij->i", zy @ kernel, zy)
            trace_term = float((w / (1.0 + alpha * w)).sum())
        value += (mass / n) * ld
        grad_pi[:, ell] = (ld + mass * alpha * quad - alpha * trace_term) / n
    return value, grad_z, grad_pi


def rate_reduction_loss(zb: EmbeddingBatch, m: Membership):
    """Negated rate reduction -R + Rc as a loss, with gradients."""
    r_value, r_grad = rate_R(zb)
    rc_value, rc_grad_z, rc_grad_pi = rate_Rc(zb, m)
    return rc_value - r_value, rc_grad_z - r_grad, rc_grad_pi
