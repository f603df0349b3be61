"""Forward and backward kernels for the layer set of the 3D U-Net.

All activations use the ``[batch, channels, depth, height, width]`` layout.
Each differentiable op comes as a pair ``op`` / ``op_backward``; the forward
returns whatever the backward needs as a cache object.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ShapeError

KERNEL = 3


def _im2col(xp: np.ndarray, stride: int, out_spatial: tuple[int, int, int]) -> np.ndarray:
    """Gather 3x3x3 neighbourhoods of a padded tensor.

    Returns an array of shape ``(B, C*27, Do*Ho*Wo)``; row order is
    ``(c, kd, kh, kw)`` which matches ``kernel.reshape(O, C*27)``.
    """
    B, C = xp.shape[:2]
    Do, Ho, Wo = out_spatial
    win = sliding_window_view(xp, (KERNEL, KERNEL, KERNEL), axis=(2, 3, 4))
    win = win[:, :, : (Do - 1) * stride + 1 : stride, : (Ho - 1) * stride + 1 : stride,
              : (Wo - 1) * stride + 1 : stride]
    # (B, C, Do, Ho, Wo, kd, kh, kw) -> (B, C, kd, kh, kw, Do, Ho, Wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 5, 6, 7, 2, 3, 4))
    return cols.reshape(B, C * KERNEL**3, Do * Ho * Wo)


def _col2im(cols: np.ndarray, padded_shape: tuple[int, ...], stride: int,
            out_spatial: tuple[int, int, int]) -> np.ndarray:
    """Scatter-add the adjoint of :func:`_im2col`."""
    B, C = padded_shape[:2]
    Do, Ho, Wo = out_spatial
    cols = cols.reshape(B, C, KERNEL, KERNEL, KERNEL, Do, Ho, Wo)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    span_d, span_h, span_w = (Do - 1) * stride + 1, (Ho - 1) * stride + 1, (Wo - 1) * stride + 1
    for kd in range(KERNEL):
        for kh in range(KERNEL):
            for kw in range(KERNEL):
                out[:, :, kd:kd + span_d:stride, kh:kh + span_h:stride,
                    kw:kw + span_w:stride] += cols[:, :, kd, kh, kw]
    return out


def _batched_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum_b a[b] @ b[b].T`` in fixed batch order."""
    acc = a[0] @ b[0].T
    for i in range(1, a.shape[0]):
        acc += a[i] @ b[i].T
    return acc


def _check_input(x: np.ndarray, in_channels: int, name: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{name}: expected a 5-d tensor [B,C,D,H,W], got shape {x.shape}")
    if x.shape[1] != in_channels:
        raise ShapeError(f"{name}: input has {x.shape[1]} channels, kernel expects {in_channels}")


# --------------------------------------------------------------------------- conv


# below this channel count the per-tap GEMMs degenerate to outer products
_FLAT_MIN_CHANNELS = 4


def _tap_offsets(Hp: int, Wp: int) -> list[int]:
    return [kd * Hp * Wp + kh * Wp + kw
            for kd in range(KERNEL) for kh in range(KERNEL) for kw in range(KERNEL)]


def _flat_correlate(xf, padded_shape, taps, out_spatial):
    """Valid 3x3x3 correlation of a flattened padded volume.

    ``xf`` is ``(B, Cin, Dp*Hp*Wp)``, ``taps`` is ``(27, Cout, Cin)``.
    """
    B = xf.shape[0]
    out_ch = taps.shape[1]
    _, _, Dp, Hp, Wp = padded_shape
    Do, Ho, Wo = out_spatial
    span = (Do - 1) * Hp * Wp + (Ho - 1) * Wp + Wo
    offs = _tap_offsets(Hp, Wp)
    yf = np.zeros((B, out_ch, Do * Hp * Wp), dtype=xf.dtype)
    for b in range(B):
        acc = taps[0] @ xf[b, :, offs[0]:offs[0] + span]
        for t in range(1, len(offs)):
            acc += taps[t] @ xf[b, :, offs[t]:offs[t] + span]
        yf[b, :, :span] = acc
    return np.ascontiguousarray(yf.reshape(B, out_ch, Do, Hp, Wp)[:, :, :, :Ho, :Wo])


def conv3d(x, kernel, bias, stride=1, padding=1):
    """Cross-correlate ``x`` with ``kernel`` of shape ``(Cout, Cin, 3, 3, 3)``.

    ``padding`` is either an int (symmetric zero padding) or a pair
    ``(before, after)`` applied to every spatial axis.

    Stride 1 runs as 27 GEMMs over shifted windows of the flattened padded
    volume: a tap ``(kd, kh, kw)`` is a constant offset in flat index space,
    so every window is a strided view and nothing is gathered. Outputs are
    computed on the padded row pitch and the junk columns are dropped.
    """
    out_ch, in_ch = kernel.shape[:2]
    _check_input(x, in_ch, "conv3d")
    before, after = (padding, padding) if np.isscalar(padding) else padding
    xp = np.pad(x, ((0, 0), (0, 0)) + ((before, after),) * 3) if (before or after) else x
    out_spatial = tuple((n - KERNEL) // stride + 1 for n in xp.shape[2:])
    if min(out_spatial) < 1:
        raise ShapeError(f"conv3d: spatial dims {x.shape[2:]} too small for the kernel")
    B = x.shape[0]
    if stride != 1 or in_ch < _FLAT_MIN_CHANNELS:
        cols = _im2col(xp, stride, out_spatial)
        y = np.matmul(kernel.reshape(out_ch, -1), cols)
        y = y.reshape((B, out_ch) + out_spatial)
        cache = ("cols", cols, xp.shape, (before, after), stride, out_spatial, kernel)
    else:
        xf = np.ascontiguousarray(xp).reshape(B, in_ch, -1)
        taps = np.ascontiguousarray(kernel.transpose(2, 3, 4, 0, 1)).reshape(-1, out_ch, in_ch)
        y = _flat_correlate(xf, xp.shape, taps, out_spatial)
        cache = ("flat", xf, xp.shape, (before, after), out_spatial, kernel)
    if bias is not None:
        y += bias[None, :, None, None, None]
    return y, cache


def conv3d_backward(dy, cache, need_input_grad=True):
    """Return ``(dx, dkernel, dbias)`` for :func:`conv3d`."""
    B, out_ch = dy.shape[:2]
    dbias = dy.sum(axis=(0, 2, 3, 4))
    if cache[0] == "cols":
        _, cols, xp_shape, (before, after), stride, out_spatial, kernel = cache
        dmat = dy.reshape(B, out_ch, -1)
        dkernel = _batched_outer(dmat, cols).reshape(kernel.shape)
        dxp = None
        if need_input_grad:
            dcols = np.matmul(kernel.reshape(out_ch, -1).T, dmat)
            dxp = _col2im(dcols, xp_shape, stride, out_spatial)
    else:
        _, xf, xp_shape, (before, after), out_spatial, kernel = cache
        in_ch = kernel.shape[1]
        Do, Ho, Wo = out_spatial
        _, _, Dp, Hp, Wp = xp_shape
        dyf = np.zeros((B, out_ch, Do, Hp, Wp), dtype=dy.dtype)
        dyf[:, :, :, :Ho, :Wo] = dy
        span = (Do - 1) * Hp * Wp + (Ho - 1) * Wp + Wo
        dyf = dyf.reshape(B, out_ch, -1)[:, :, :span]
        offs = _tap_offsets(Hp, Wp)
        dtaps = np.zeros((len(offs), out_ch, in_ch), dtype=dy.dtype)
        for b in range(B):
            for t, off in enumerate(offs):
                dtaps[t] += dyf[b] @ xf[b, :, off:off + span].T
        dkernel = dtaps.reshape((KERNEL,) * 3 + (out_ch, in_ch)).transpose(3, 4, 0, 1, 2)
        dkernel = np.ascontiguousarray(dkernel)
        if need_input_grad and (before, after) == (1, 1) and out_ch >= _FLAT_MIN_CHANNELS:
            # adjoint of a same-size correlation: correlate with the flipped,
            # channel-transposed kernel
            dyp = np.pad(dy, ((0, 0), (0, 0)) + ((1, 1),) * 3)
            flipped = kernel[:, :, ::-1, ::-1, ::-1].transpose(2, 3, 4, 1, 0)
            flipped = np.ascontiguousarray(flipped).reshape(-1, in_ch, out_ch)
            dx = _flat_correlate(dyp.reshape(B, out_ch, -1), dyp.shape, flipped, dy.shape[2:])
            return dx, dkernel, dbias
        dxp = None
        if need_input_grad:
            dmat = dy.reshape(B, out_ch, -1)
            dcols = np.matmul(kernel.reshape(out_ch, -1).T, dmat)
            dxp = _col2im(dcols, xp_shape, 1, out_spatial)
    dx = None
    if need_input_grad:
        D, H, W = xp_shape[2:]
        dx = np.ascontiguousarray(dxp[:, :, before:D - after, before:H - after, before:W - after])
    return dx, dkernel, dbias


# --------------------------------------------------------------------------- transposed conv


def tconv3d(x, kernel, bias, stride=2):
    """Transposed convolution with kernel ``(Cin, Cout, 3, 3, 3)``.

    Output sample ``q`` collects ``kernel[..., d] * x[p]`` for every
    ``stride*p + d == q``. The raw result has ``stride*(n-1)+3`` voxels per
    axis; trailing planes are cropped so the output is exactly
    ``stride * n``.
    """
    in_ch, out_ch = kernel.shape[:2]
    _check_input(x, in_ch, "tconv3d")
    B = x.shape[0]
    in_spatial = x.shape[2:]
    full = tuple(stride * (n - 1) + KERNEL for n in in_spatial)
    xmat = x.reshape(B, in_ch, -1)
    # (Cout*27, Cin) @ (B, Cin, N) -> (B, Cout*27, N)
    cols = np.matmul(kernel.reshape(in_ch, -1).T, xmat)
    yfull = _col2im(cols, (B, out_ch) + full, stride, in_spatial)
    target = tuple(stride * n for n in in_spatial)
    y = np.ascontiguousarray(yfull[:, :, : target[0], : target[1], : target[2]])
    if bias is not None:
        y += bias[None, :, None, None, None]
    cache = (xmat, x.shape, kernel, stride, full)
    return y, cache


def tconv3d_backward(dy, cache, need_input_grad=True):
    """Return ``(dx, dkernel, dbias)`` for :func:`tconv3d`."""
    xmat, x_shape, kernel, stride, full = cache
    in_ch, out_ch = kernel.shape[:2]
    B = dy.shape[0]
    pad = [(0, f - n) for f, n in zip(full, dy.shape[2:])]
    dyfull = np.pad(dy, ((0, 0), (0, 0), *pad))
    dcols = _im2col(dyfull, stride, x_shape[2:])  # (B, Cout*27, N)
    dkernel = _batched_outer(xmat, dcols).reshape(kernel.shape)
    dbias = dy.sum(axis=(0, 2, 3, 4))
    dx = None
    if need_input_grad:
        dx = np.matmul(kernel.reshape(in_ch, -1), dcols).reshape(x_shape)
    return dx, dkernel, dbias


# --------------------------------------------------------------------------- pooling


def maxpool3d(x):
    """Max over disjoint 2x2x2 blocks.

    Ties route the gradient to the first block element in row-major order
    (last axis fastest).
    """
    B, C, D, H, W = x.shape
    if D % 2 or H % 2 or W % 2:
        raise ShapeError(f"maxpool3d: spatial dims must be even, got {(D, H, W)}")
    blocks = x.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, D // 2, H // 2, W // 2, 8)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool3d_backward(dy, cache):
    idx, x_shape = cache
    B, C, D, H, W = x_shape
    onehot = np.zeros(dy.shape + (8,), dtype=dy.dtype)
    np.put_along_axis(onehot, idx[..., None], dy[..., None], axis=-1)
    dx = onehot.reshape(B, C, D // 2, H // 2, W // 2, 2, 2, 2)
    dx = dx.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(x_shape)
    return dx


# --------------------------------------------------------------------------- batchnorm


def batchnorm3d_train(x, gamma, beta, eps):
    """Normalize per channel with batch statistics (biased variance).

    Returns ``(y, batch_mean, batch_var, cache)``.
    """
    axes = (0, 2, 3, 4)
    count = x.size // x.shape[1]
    if count < 2:
        raise ShapeError("batchnorm3d: train mode needs at least 2 elements per channel")
    mean = x.mean(axis=axes)
    xc = x - mean[None, :, None, None, None]
    var = np.mean(xc * xc, axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std[None, :, None, None, None]
    y = xhat * gamma[None, :, None, None, None] + beta[None, :, None, None, None]
    return y, mean, var, (xhat, inv_std, gamma)


def batchnorm3d_infer(x, gamma, beta, running_mean, running_var, eps):
    scale = gamma / np.sqrt(running_var + eps)
    shift = beta - running_mean * scale
    return x * scale[None, :, None, None, None] + shift[None, :, None, None, None]


def batchnorm3d_backward(dy, cache):
    """Return ``(dx, dgamma, dbeta)`` for train-mode batch normalization."""
    xhat, inv_std, gamma = cache
    axes = (0, 2, 3, 4)
    dbeta = dy.sum(axis=axes)
    dgamma = np.sum(dy * xhat, axis=axes)
    count = dy.size // dy.shape[1]
    bshape = (None, slice(None), None, None, None)
    dx = (dy - (dbeta / count)[bshape] - xhat * (dgamma / count)[bshape])
    dx *= (gamma * inv_std)[bshape]
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------- activations


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, y):
    return dy * (y > 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy, y):
    return dy * y * (1 - y)
