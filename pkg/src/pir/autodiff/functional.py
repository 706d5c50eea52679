"""Convolution, pooling and resampling ops on [B, C, H, W] tensors."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pir.autodiff.tensor import Tensor, _make, as_tensor, matmul
from pir.errors import ShapeError


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of x [B, C, H, W] with weight [O, C, kh, kw] (zero padding)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    # [B, C, Ho, Wo, kh, kw] -> [B, C*kh*kw, Ho*Wo]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, Ho * Wo)
    wmat = weight.data.reshape(O, -1)
    out = (wmat @ cols).reshape(B, O, Ho, Wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, O, 1, 1)
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(B, O, Ho * Wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = (wmat.T @ g2).reshape(B, C, kh, kw, Ho, Wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += gcols[:, :, i, j]
        gx = gxp[:, :, ph:ph + H, pw:pw + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, backward)


def conv1d(x, weight, bias=None, padding=0) -> Tensor:
    """x [B, C, L], weight [O, C, k]; implemented as a height-1 conv2d."""
    x, weight = as_tensor(x), as_tensor(weight)
    B, C, L = x.shape
    O, _, k = weight.shape
    out = conv2d(x.reshape(B, C, 1, L), weight.reshape(O, C, 1, k), bias, stride=1,
                 padding=(0, padding))
    return out.reshape(B, O, out.shape[-1])


def avg_pool2d(x, kernel: int = 2) -> Tensor:
    """Non-overlapping average pooling; H and W must be divisible by ``kernel``."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % kernel or W % kernel:
        raise ShapeError(f"avg_pool2d: {H}x{W} not divisible by {kernel}")
    k = kernel
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (g,)

    return _make(out, (x,), backward)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    f = factor
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, f, W, f).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """[n_out, n_in] interpolation weights, half-pixel centres (align_corners=False)."""
    A = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        A[i, lo] += 1.0 - frac
        A[i, hi] += frac
    return A


def upsample_bilinear(x, factor: int = 2) -> Tensor:
    """Separable bilinear upsampling expressed as two constant matmuls."""
    x = as_tensor(x)
    _, _, H, W = x.shape
    Ah = Tensor(bilinear_matrix(H, H * factor))
    AwT = Tensor(bilinear_matrix(W, W * factor).T.copy())
    return matmul(Ah, matmul(x, AwT))
