"""Dense image grids: convolution, Neumann differential operators, metrics.

Images are float64 arrays of shape (H, W); multichannel stacks are
(C, H, W); convolution kernels are (out_channels, in_channels, kh, kw)
with odd spatial dimensions.  All operations are pure and leave their
inputs untouched, so values can be shared freely across threads.

The discrete gradient uses forward differences with a truncated last
row/column and the divergence is its exact negative adjoint (backward
differences).  This makes ``laplacian_neumann`` a symmetric negative
semidefinite operator, which the diffusion solvers and the firm
nonexpansiveness checks rely on.
"""

from __future__ import annotations

import enum

import numpy as np

PSNR_CAP_DB = 200.0  # sentinel for zero (or vanishing) MSE; keeps CSVs total-ordered

SSIM_WINDOW = 7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class PadMode(enum.Enum):
    ZERO = "zero"
    REPLICATE = "replicate"


def _as_chw(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3:
        return x
    raise ValueError(f"expected a (H, W) or (C, H, W) array, got shape {x.shape}")


def _check_kernel(kernel):
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise ValueError(f"kernel must be 4-D (out, in, kh, kw), got shape {kernel.shape}")
    kh, kw = kernel.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel spatial dims must be odd, got {kh}x{kw}")
    if not np.all(np.isfinite(kernel)):
        raise ValueError("kernel contains non-finite values")
    return kernel


def _pad_batched(x, kh, kw, pad):
    ph, pw = kh // 2, kw // 2
    if pad is PadMode.ZERO:
        mode = "constant"
    elif pad is PadMode.REPLICATE:
        mode = "edge"
    else:
        raise ValueError(f"unknown pad mode: {pad!r}")
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode=mode)


def _im2col(x, kh, kw, pad):
    """(B, C, H, W) -> (C*kh*kw, B*H*W) patch matrix for a centered window."""
    b, c, h, w = x.shape
    xp = _pad_batched(x, kh, kw, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # win: (B, C, H, W, kh, kw) -> (C, kh, kw, B, H, W)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * h * w)
    return np.ascontiguousarray(cols)


def conv_batched(x, kernel, pad=PadMode.ZERO):
    """Centered "same" cross-correlation of a batch (B, Cin, H, W) -> (B, Cout, H, W)."""
    b, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if c != ci:
        raise ValueError(f"input has {c} channels but kernel expects {ci}")
    if kh == 1 and kw == 1:  # pointwise: a channel mix, no padding or patches
        return np.tensordot(kernel[:, :, 0, 0], x, axes=([1], [1])).transpose(1, 0, 2, 3)
    cols = _im2col(x, kh, kw, pad)
    out = kernel.reshape(co, ci * kh * kw) @ cols
    return out.reshape(co, b, h, w).transpose(1, 0, 2, 3)


def conv_input_grad(g, kernel):
    """Adjoint of ``conv_batched(..., PadMode.ZERO)`` applied to (B, Cout, H, W)."""
    kh, kw = kernel.shape[2:]
    if kh == 1 and kw == 1:
        return np.tensordot(kernel[:, :, 0, 0].T, g, axes=([1], [1])).transpose(1, 0, 2, 3)
    adj = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return conv_batched(g, np.ascontiguousarray(adj), PadMode.ZERO)


def conv_kernel_grad(x, g, kh, kw):
    """Gradient of ``sum(conv_batched(x, K) * g)`` w.r.t. K, for zero padding."""
    b, c, h, w = x.shape
    co = g.shape[1]
    if kh == 1 and kw == 1:
        gm = g.transpose(1, 0, 2, 3).reshape(co, b * h * w)
        xm = x.transpose(1, 0, 2, 3).reshape(c, b * h * w)
        return (gm @ xm.T).reshape(co, c, 1, 1)
    cols = _im2col(x, kh, kw, PadMode.ZERO)
    gm = g.transpose(1, 0, 2, 3).reshape(co, b * h * w)
    return (gm @ cols.T).reshape(co, c, kh, kw)


def conv2d(x, kernel, pad=PadMode.ZERO):
    """Same-size 2-D cross-correlation of a (C, H, W) stack with a 4-D kernel.

    The kernel is centered (odd spatial dims enforced); out-of-bounds taps
    are zero or replicated edge values depending on ``pad``.  Linear in x.
    """
    kernel = _check_kernel(kernel)
    x3 = _as_chw(x)
    return conv_batched(x3[None], kernel, pad)[0]


def grad_neumann(u):
    """Forward-difference gradient with zero last column (gx) / last row (gy)."""
    u = np.asarray(u, dtype=np.float64)
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def div_neumann(gx, gy):
    """Exact negative adjoint of ``grad_neumann`` (backward differences).

    Satisfies <grad u, p> = -<u, div p> for all u, p, hence the composed
    Laplacian is symmetric negative semidefinite and every output sums to 0.
    """
    gx = np.asarray(gx, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    if gx.shape != gy.shape:
        raise ValueError(f"field shapes differ: {gx.shape} vs {gy.shape}")
    d = np.zeros_like(gx)
    # x part: p[i,j] - p[i,j-1], truncated so the last column only drains
    d[:, :-1] += gx[:, :-1]
    d[:, 1:] -= gx[:, :-1]
    # y part
    d[:-1, :] += gy[:-1, :]
    d[1:, :] -= gy[:-1, :]
    return d


def laplacian_neumann(u):
    """5-point Neumann Laplacian, div(grad u); pixel sum is exactly zero."""
    gx, gy = grad_neumann(u)
    return div_neumann(gx, gy)


def psnr(x, y, peak=1.0):
    """Peak signal-to-noise ratio in dB, capped at the 200 dB sentinel."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak**2 / mse), PSNR_CAP_DB)


def _window_means(x, k):
    """Means of all full k x k windows of a 2-D array (valid positions)."""
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k))
    return win.mean(axis=(2, 3))


def ssim(x, y):
    """Mean local SSIM with a 7x7 uniform window and standard stabilizers.

    Local statistics use unbiased (ddof=1) variance/covariance over full
    windows; the mean runs over all valid window positions.  Images are
    expected in [0, 1] (peak 1).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    k = SSIM_WINDOW
    if x.shape[0] < k or x.shape[1] < k:
        raise ValueError(f"grid {x.shape} smaller than the {k}x{k} SSIM window")
    n = k * k
    bessel = n / (n - 1)
    mx = _window_means(x, k)
    my = _window_means(y, k)
    mxx = _window_means(x * x, k)
    myy = _window_means(y * y, k)
    mxy = _window_means(x * y, k)
    vx = (mxx - mx * mx) * bessel
    vy = (myy - my * my) * bessel
    cxy = (mxy - mx * my) * bessel
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))
