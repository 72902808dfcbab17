"""Clustering metrics: optimal-matching accuracy and normalized mutual information."""

import numpy as np
from scipy.optimize import linear_sum_assignment


def hungarian(cost) -> np.ndarray:
    """Minimum-cost perfect matching on a square cost matrix.

    Returns the assigned column index per row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    assignment = np.empty(cost.shape[0], dtype=np.int64)
    assignment[rows] = cols
    return assignment


def _check_labels(pred, truth):
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.ndim != 1 or truth.ndim != 1:
        raise ValueError("labels must be 1-d")
    if pred.shape != truth.shape:
        raise ValueError(f"label lengths differ: {pred.shape[0]} vs {truth.shape[0]}")
    if pred.size == 0:
        raise ValueError("empty label vectors")
    if pred.min() < 0 or truth.min() < 0:
        raise ValueError("labels must be nonnegative")
    return pred, truth


def _contingency(pred, truth):
    k = int(max(pred.max(), truth.max())) + 1
    table = np.zeros((k, k), dtype=np.int64)
    np.add.at(table, (pred, truth), 1)
    return table


def clustering_accuracy(pred, truth) -> float:
    """Fraction of points matched after the optimal label permutation."""
    pred, truth = _check_labels(pred, truth)
    table = _contingency(pred, truth)
    assignment = hungarian(-table.astype(np.float64))
    matched = table[np.arange(table.shape[0]), assignment].sum()
    return float(matched) / pred.size


def nmi(pred, truth, normalization: str = "sqrt") -> float:
    """Normalized mutual information of two labelings.

    Default normalization is the geometric mean sqrt(H(pred) * H(truth));
    'min', 'max' and 'arithmetic' variants cover other reporting conventions.
    Two constant labelings score 1.0; a constant labeling against a
    non-constant one scores 0.0.
    """
    pred, truth = _check_labels(pred, truth)
    table = _contingency(pred, truth).astype(np.float64)
    n = table.sum()
    joint = table / n
    p_pred = joint.sum(axis=1)
    p_truth = joint.sum(axis=0)

    nz = joint > 0
    outer = np.outer(p_pred, p_truth)
    mi = float((joint[nz] * np.log(joint[nz] / outer[nz])).sum())
    h_pred = float(-(p_pred[p_pred > 0] * np.log(p_pred[p_pred > 0])).sum())
    h_truth = float(-(p_truth[p_truth > 0] * np.log(p_truth[p_truth > 0])).sum())

    if h_pred == 0.0 and h_truth == 0.0:
        return 1.0  # both constant: identical partitions
    if normalization == "sqrt":
        denom = np.sqrt(h_pred * h_truth)
    elif normalization == "min":
        denom = min(h_pred, h_truth)
    elif normalization == "max":
        denom = max(h_pred, h_truth)
    elif normalization == "arithmetic":
        denom = (h_pred + h_truth) / 2.0
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    if denom == 0.0:
        return 0.0
    return max(0.0, mi / denom)
