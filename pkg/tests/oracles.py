"""Independent reference implementations used as test oracles.

These are deliberately naive (explicit loops, direct definitions) and share
no code with the package.
"""
from collections import deque
from itertools import product

import numpy as np


def conv3d_naive(x, k, b=None, stride=1, pad=(1, 1)):
    """Direct 3x3x3 cross-correlation by summing over output voxels."""
    B, C, D, H, W = x.shape
    O = k.shape[0]
    lo, hi = pad
    xp = np.zeros((B, C, D + lo + hi, H + lo + hi, W + lo + hi), dtype=np.float64)
    xp[:, :, lo:lo + D, lo:lo + H, lo:lo + W] = x
    od, oh, ow = ((n - 3) // stride + 1 for n in xp.shape[2:])
    y = np.zeros((B, O, od, oh, ow))
    for i, j, l in product(range(od), range(oh), range(ow)):
        win = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3, l * stride:l * stride + 3]
        y[:, :, i, j, l] = np.einsum("bcxyz,ocxyz->bo", win, k)
    if b is not None:
        y += b[None, :, None, None, None]
    return y


def tconv3d_naive(x, k, b=None):
    """Stride-2 transposed conv by scattering: y[2p+d] += k[d] x[p], cropped to 2n."""
    B, C, D, H, W = x.shape
    O = k.shape[1]
    y = np.zeros((B, O, 2 * D + 1, 2 * H + 1, 2 * W + 1))
    for p0, p1, p2 in product(range(D), range(H), range(W)):
        for d0, d1, d2 in product(range(3), repeat=3):
            y[:, :, 2 * p0 + d0, 2 * p1 + d1, 2 * p2 + d2] += x[:, :, p0, p1, p2] @ k[:, :, d0, d1, d2]
    y = y[:, :, :2 * D, :2 * H, :2 * W]
    if b is not None:
        y += b[None, :, None, None, None]
    return y


def maxpool_naive(x):
    B, C, D, H, W = x.shape
    y = np.zeros((B, C, D // 2, H // 2, W // 2), dtype=x.dtype)
    for b, c, i, j, l in product(range(B), range(C), range(D // 2), range(H // 2), range(W // 2)):
        y[b, c, i, j, l] = x[b, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * l:2 * l + 2].max()
    return y


def batchnorm_naive(x, g, beta, eps):
    mu = x.mean(axis=(0, 2, 3, 4), keepdims=True)
    var = ((x - mu) ** 2).mean(axis=(0, 2, 3, 4), keepdims=True)
    return g[None, :, None, None, None] * (x - mu) / np.sqrt(var + eps) + beta[None, :, None, None, None]


def numeric_grad(f, arr, h=1e-6):
    """Central differences of scalar ``f()`` with respect to ``arr`` (mutated in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(a, b, floor=1e-7):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def flood_fill_largest(bits, connectivity):
    """BFS labeling; returns the largest component, ties to the earliest seed in C order."""
    bits = np.asarray(bits, dtype=bool)
    if connectivity == 6:
        steps = [s for s in product((-1, 0, 1), repeat=3) if sum(map(abs, s)) == 1]
    else:
        steps = [s for s in product((-1, 0, 1), repeat=3) if s != (0, 0, 0)]
    seen = np.zeros_like(bits)
    best = []
    for seed in zip(*np.nonzero(bits)):
        if seen[seed]:
            continue
        comp, queue = [], deque([seed])
        seen[seed] = True
        while queue:
            p = queue.popleft()
            comp.append(p)
            for s in steps:
                q = (p[0] + s[0], p[1] + s[1], p[2] + s[2])
                if all(0 <= q[i] < bits.shape[i] for i in range(3)) and bits[q] and not seen[q]:
                    seen[q] = True
                    queue.append(q)
        if len(comp) > len(best):
            best = comp
    out = np.zeros_like(bits)
    for p in best:
        out[p] = True
    return out


def brute_dilate(surface, radius):
    """Every voxel within Euclidean ``radius`` of a surface voxel."""
    bits = np.asarray(surface, dtype=bool)
    pts = np.argwhere(bits)
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in bits.shape], indexing="ij"), -1)
    out = np.zeros_like(bits)
    for p in pts:
        out |= ((grid - p) ** 2).sum(-1) <= radius ** 2 + 1e-9
    return out
