"""Cross-entropy losses."""
from __future__ import annotations

import numpy as np

from ..exceptions import ShapeError

EPS = 1e-7


def cross_entropy(p, q, eps=EPS):
    """``H(p, q) = -sum p(n) log q(n)`` with ``q`` clamped to ``[eps, 1-eps]``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.clip(np.asarray(q, dtype=np.float64), eps, 1 - eps)
    return float(-np.sum(p * np.log(q)))


def bce_voxelwise(prob, truth, eps=EPS):
    """Mean two-class cross-entropy between per-voxel probabilities and labels."""
    prob = np.asarray(prob)
    truth = np.asarray(truth)
    if prob.shape != truth.shape:
        raise ShapeError(f"bce_voxelwise: prob shape {prob.shape} != truth shape {truth.shape}")
    q = np.clip(prob.astype(np.float64), eps, 1 - eps)
    t = truth.astype(np.float64)
    return float(-np.mean(t * np.log(q) + (1 - t) * np.log(1 - q)))


def bce_voxelwise_grad(prob, truth, eps=EPS):
    """Gradient of :func:`bce_voxelwise` w.r.t. ``prob`` (zero where clamped)."""
    q = np.asarray(prob)
    t = np.asarray(truth, dtype=q.dtype)
    inside = (q > eps) & (q < 1 - eps)
    qc = np.clip(q, eps, 1 - eps)
    g = (-t / qc + (1 - t) / (1 - qc)) / q.size
    return np.where(inside, g, 0).astype(q.dtype)
