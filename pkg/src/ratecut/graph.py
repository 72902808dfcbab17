"""Sparse affinity graph, relaxed normalized-cut loss, and a spectral oracle.

The affinity keeps the s largest entries of each row of the cosine Gram
matrix (or of a Gaussian kernel), clamps negatives to zero, and symmetrizes
by averaging. The relaxed cut loss is

    trace((Pi V)^T L (Pi V)) + (gamma/2) ||(Pi V)^T D (Pi V) - I||_F^2

with the volume rescaling V = Diag(sum_i pi_{il} d_ii)^{-1/2}, differentiated
through both Pi and V. The classical eigenvector route (normalized Laplacian
+ k-means) is kept as a non-differentiable oracle and as the "SC on
embeddings" evaluation path.
"""

from dataclasses import dataclass

import numpy as np

from ratecut.coding_rate import EmbeddingBatch, Membership

# Soft volumes below this drop the cluster from both loss terms.
MIN_CLUSTER_VOLUME = 1e-10


class DegenerateGraphError(RuntimeError):
    """Raised when the affinity graph has an isolated node."""


@dataclass(frozen=True)
class AffinityGraph:
    """Symmetric nonnegative affinity with precomputed degrees."""

    weights: np.ndarray  # n x n dense, nonnegative
    degrees: np.ndarray  # row sums of weights
    symmetric: bool = True

    @property
    def n(self):
        return self.weights.shape[0]

    def laplacian(self):
        return np.diag(self.degrees) - self.weights

    def triples(self):
        """Yield (i, j, w) for every stored nonzero entry, row-major."""
        rows, cols = np.nonzero(self.weights)
        for i, j in zip(rows.tolist(), cols.tolist()):
            yield i, j, float(self.weights[i, j])


def build_affinity(zb: EmbeddingBatch, s: int, mode: str = "cosine",
                   sigma: float | None = None, include_self: bool = True,
                   symmetrize: bool = True) -> AffinityGraph:
    """Top-s sparse affinity from a batch of embeddings.

    cosine mode uses the raw Gram Z^T Z (negatives clamped to 0 before
    selection); gaussian mode uses exp(-|z_i - z_j|^2 / (2 sigma^2)). Each
    row keeps its s largest entries (the self entry competes like any other
    unless include_self is False), then A <- (A + A^T) / 2.
    """
    n = zb.n
    if not 1 <= s <= n:
        raise ValueError(f"sparsity s must be in [1, {n}], got {s}")
    if mode == "cosine":
        if sigma is not None:
            raise ValueError("sigma is only meaningful in gaussian mode")
        sim = np.clip(zb.z.T @ zb.z, 0.0, None)
    elif mode == "gaussian":
        if sigma is None or sigma <= 0:
            raise ValueError("gaussian mode requires a positive sigma")
        sq = np.einsum("ij,ij->j", zb.z, zb.z)
        dist2 = np.clip(sq[:, None] + sq[None, :] - 2.0 * (zb.z.T @ zb.z), 0.0, None)
        sim = np.exp(-dist2 / (2.0 * sigma**2))
    else:
        raise ValueError(f"unknown affinity mode {mode!r}")

    if not include_self:
        np.fill_diagonal(sim, -np.inf)
    keep = np.argpartition(-sim, s - 1, axis=1)[:, :s]
    a = np.zeros_like(sim)
    rows = np.arange(n)[:, None]
    a[rows, keep] = sim[rows, keep]
    if not include_self:
        a[a == -np.inf] = 0.0
    if symmetrize:
        a = (a + a.T) / 2.0
    return AffinityGraph(weights=a, degrees=a.sum(axis=1), symmetric=symmetrize)


def ncut_loss(g: AffinityGraph, m: Membership, gamma: float):
    """Relaxed normalized-cut loss and its gradient w.r.t. Pi.

    The gradient flows through Pi both directly and through the soft
    volumes. Clusters whose soft volume falls below MIN_CLUSTER_VOLUME are
    dropped from both terms with zero gradient.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    if m.pi.shape[0] != g.n:
        raise ValueError(f"pi has {m.pi.shape[0]} rows but graph has {g.n} nodes")
    deg = g.degrees
    if deg.min(initial=np.inf) <= 0:
        bad = int(np.argmin(deg))
        raise DegenerateGraphError(
            f"node {bad} is isolated (degree {deg[bad]:.3e}); "
            "raise the sparsity s or check the embeddings")

    pi = m.pi
    n, k = pi.shape
    vol = pi.T @ deg  # soft volume per cluster
    retained = vol >= MIN_CLUSTER_VOLUME
    grad_pi = np.zeros((n, k))
    if not retained.any():
        return 0.0, grad_pi

    p = pi[:, retained]
    u = vol[retained]
    v = 1.0 / np.sqrt(u)

    lap_p = deg[:, None] * p - g.weights @ p  # L pi_l per retained column
    quad = np.einsum("ij,ij->j", p, lap_p)  # pi_l^T L pi_l
    trace_term = float((quad / u).sum())

    dp = deg[:, None] * p
    c = p.T @ dp  # pi^T D pi on retained clusters
    b = (v[:, None] * v[None, :]) * c
    e = b - np.eye(u.size)
    penalty = 0.5 * gamma * float((e * e).sum())

    # trace term: 2 (L pi)_i / u_l  -  (pi_l^T L pi_l / u_l^2) d_i
    grad_r = 2.0 * lap_p / u - np.outer(deg, quad / u**2)
    if gamma > 0:
        # direct path through pi^T D pi
        w = e * (v[:, None] * v[None, :])
        grad_r += 2.0 * gamma * (dp @ w)
        # path through the volumes: d penalty / d v_l = 2 gamma [(E o C) v]_l
        s_v = 2.0 * gamma * ((e * c) @ v)
        grad_r += np.outer(deg, -s_v / (2.0 * u**1.5))

    grad_pi[:, retained] = grad_r
    return trace_term + penalty, grad_pi


def _kmeans_pp_init(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
        else:
            centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _kmeans(x, k, rng, restarts=20, max_iter=100):
    best_labels, best_inertia = None, np.inf
    n = x.shape[0]
    for _ in range(restarts):
        centers = _kmeans_pp_init(x, k, rng)
        labels = np.zeros(n, dtype=np.int64)
        for _ in range(max_iter):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = d2.argmin(axis=1)
            for j in range(k):
                mask = new_labels == j
                if mask.any():
                    centers[j] = x[mask].mean(axis=0)
                else:  # re-seed empty cluster at the farthest point
                    centers[j] = x[d2.min(axis=1).argmax()]
                    new_labels[d2.min(axis=1).argmax()] = j
            if (new_labels == labels).all():
                labels = new_labels
                break
            labels = new_labels
        inertia = float(((x - centers[labels]) ** 2).sum())
        if inertia < best_inertia:
            best_inertia, best_labels = inertia, labels.copy()
    return best_labels


def spectral_labels(g: AffinityGraph, k: int, kmeans_seed: int = 0) -> np.ndarray:
    """Hard labels from the k minor eigenvectors of the normalized Laplacian.

    Rows of the eigenvector matrix are normalized to unit length and
    clustered by k-means (k-means++ init, 20 restarts, best inertia).
    """
    if not 1 <= k <= g.n:
        raise ValueError(f"k must be in [1, {g.n}], got {k}")
    deg = g.degrees
    if deg.min(initial=np.inf) <= 0:
        raise DegenerateGraphError("graph has an isolated node")
    dinv = 1.0 / np.sqrt(deg)
    norm_l = np.eye(g.n) - (dinv[:, None] * g.weights) * dinv[None, :]
    _, vecs = np.linalg.eigh((norm_l + norm_l.T) / 2.0)
    basis = vecs[:, :k]
    norms = np.linalg.norm(basis, axis=1, keepdims=True)
    norms[norms < 1e-15] = 1.0
    basis = basis / norms
    rng = np.random.default_rng(kmeans_seed)
    return _kmeans(basis, k, rng)
