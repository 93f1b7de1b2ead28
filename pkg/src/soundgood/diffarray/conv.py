"""Convolution-family ops on :class:`DiffArray`.

All convolutions are cross-correlations computed as a batched matmul against
an im2col patch matrix. Backward rebuilds the patch matrix rather than keeping
it alive between passes.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .core import ContractError, DiffArray, _sigmoid, as_diff, make_result


def _check_bias(bias, c_out: int):
    if bias is None:
        return None
    bias = as_diff(bias)
    if bias.shape != (c_out,):
        raise ContractError(f"bias must have shape ({c_out},), got {bias.shape}")
    return bias


def _columns_1d(xp: np.ndarray, k: int, stride: int, out_len: int) -> np.ndarray:
    """``[b, c, n] -> [b, c * k, out_len]`` patch matrix (a copy)."""
    b, c, _ = xp.shape
    s = xp.strides
    view = as_strided(xp, (b, c, k, out_len), (s[0], s[1], s[2], s[2] * stride), writeable=False)
    return view.reshape(b, c * k, out_len)


def conv1d(x, kernel, bias=None, stride: int = 1, pad: int = 0) -> DiffArray:
    """1-D cross-correlation of ``x[batch, ch_in, len]`` with ``kernel[ch_out, ch_in, k]``."""
    x, kernel = as_diff(x), as_diff(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ContractError(f"conv1d expects 3-d input and kernel, got {x.shape} and {kernel.shape}")
    batch, c_in, n = x.shape
    c_out, k_in, k = kernel.shape
    if k_in != c_in:
        raise ContractError(f"conv1d channel mismatch: input ch_in={c_in}, kernel ch_in={k_in}")
    if stride < 1 or pad < 0:
        raise ContractError(f"conv1d needs stride >= 1 and pad >= 0 (stride={stride}, pad={pad})")
    if k > n + 2 * pad:
        raise ContractError(f"conv1d kernel length {k} exceeds padded input length {n + 2 * pad}")
    bias = _check_bias(bias, c_out)

    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad))) if pad else x.values
    out_len = (n + 2 * pad - k) // stride + 1
    span = stride * (out_len - 1) + 1
    w2 = kernel.values.reshape(c_out, c_in * k)
    out = np.matmul(w2, _columns_1d(xp, k, stride, out_len))
    if bias is not None:
        out += bias.values[None, :, None]

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g).reshape(batch, c_in, k, out_len)
            gxp = np.zeros(xp.shape)
            for j in range(k):
                gxp[:, :, j:j + span:stride] += gcols[:, :, j]
            gx = gxp[:, :, pad:pad + n]
        if kernel.requires_grad:
            cols = _columns_1d(xp, k, stride, out_len)
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result("conv1d", out, inputs, bw if bias is not None else (lambda g: bw(g)[:2]))


def conv_transpose1d(x, kernel, bias=None, stride: int = 1) -> DiffArray:
    """Transposed 1-D convolution, ``kernel[ch_in, ch_out, k]``.

    Input sample ``i`` scatters a scaled copy of the kernel at offset
    ``i * stride``; output length is ``(len - 1) * stride + k``.
    """
    x, kernel = as_diff(x), as_diff(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ContractError(
            f"conv_transpose1d expects 3-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    batch, c_in, n = x.shape
    k_in, c_out, k = kernel.shape
    if k_in != c_in:
        raise ContractError(f"conv_transpose1d channel mismatch: input ch_in={c_in}, kernel ch_in={k_in}")
    if stride < 1:
        raise ContractError(f"conv_transpose1d needs stride >= 1, got {stride}")
    bias = _check_bias(bias, c_out)

    w = kernel.values
    xv = x.values
    out_len = (n - 1) * stride + k
    span = stride * (n - 1) + 1
    out = np.zeros((batch, c_out, out_len))
    for j in range(k):
        out[:, :, j:j + span:stride] += np.matmul(w[:, :, j].T, xv)
    if bias is not None:
        out += bias.values[None, :, None]

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.zeros(xv.shape)
            for j in range(k):
                gx += np.matmul(w[:, :, j], g[:, :, j:j + span:stride])
        if kernel.requires_grad:
            gw = np.empty(w.shape)
            for j in range(k):
                gw[:, :, j] = np.tensordot(xv, g[:, :, j:j + span:stride], axes=([0, 2], [0, 2]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result("conv_transpose1d", out, inputs, bw if bias is not None else (lambda g: bw(g)[:2]))


def _columns_2d(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    """``[b, c, h, w] -> [b, c * kh * kw, oh * ow]`` patch matrix (a copy)."""
    b, c = xp.shape[:2]
    s = xp.strides
    view = as_strided(
        xp, (b, c, kh, kw, oh, ow), (s[0], s[1], s[2], s[3], s[2] * sh, s[3] * sw), writeable=False
    )
    return view.reshape(b, c * kh * kw, oh * ow)


def _col2im_strided(gcols: np.ndarray, shape: tuple, sh: int, sw: int) -> np.ndarray:
    """Scatter-add ``gcols[b, c, kh, kw, oh, ow]`` back onto a ``shape`` input grid.

    Input row ``i + sh * o`` is row ``i // sh + o`` of phase ``i % sh`` (same for
    columns), so every tap adds into a contiguous block of one phase buffer and
    the phases are interleaved once at the end.
    """
    b, c, kh, kw, oh, ow = gcols.shape
    hq, wq = -(-shape[2] // sh), -(-shape[3] // sw)
    phases = np.zeros((sh, sw, b, c, hq, wq))
    for i in range(kh):
        qi, ri = divmod(i, sh)
        for j in range(kw):
            qj, rj = divmod(j, sw)
            phases[ri, rj, :, :, qi:qi + oh, qj:qj + ow] += gcols[:, :, i, j]
    full = phases.transpose(2, 3, 4, 0, 5, 1).reshape(b, c, hq * sh, wq * sw)
    return full[:, :, :shape[2], :shape[3]]


def conv2d(x, kernel, bias=None, stride=(1, 1), pad=(0, 0)) -> DiffArray:
    """2-D cross-correlation of ``x[batch, ch_in, h, w]`` with ``kernel[ch_out, ch_in, kh, kw]``."""
    x, kernel = as_diff(x), as_diff(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ContractError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    batch, c_in, h, wd = x.shape
    c_out, k_in, kh, kw = kernel.shape
    sh, sw = stride
    ph, pw = pad
    if k_in != c_in:
        raise ContractError(f"conv2d channel mismatch: input ch_in={c_in}, kernel ch_in={k_in}")
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ContractError(f"conv2d needs positive strides and nonnegative pads, got {stride}, {pad}")
    if kh > h + 2 * ph:
        raise ContractError(f"conv2d kernel height {kh} exceeds padded input height {h + 2 * ph}")
    if kw > wd + 2 * pw:
        raise ContractError(f"conv2d kernel width {kw} exceeds padded input width {wd + 2 * pw}")
    bias = _check_bias(bias, c_out)

    xp = np.pad(x.values, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.values
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    w2 = kernel.values.reshape(c_out, c_in * kh * kw)
    out = np.matmul(w2, _columns_2d(xp, kh, kw, sh, sw, oh, ow)).reshape(batch, c_out, oh, ow)
    if bias is not None:
        out += bias.values[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        g2 = g.reshape(batch, c_out, oh * ow)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(batch, c_in, kh, kw, oh, ow)
            if sh == 1 and sw == 1:
                gxp = np.zeros(xp.shape)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + oh, j:j + ow] += gcols[:, :, i, j]
            else:
                gxp = _col2im_strided(gcols, xp.shape, sh, sw)
            gx = gxp[:, :, ph:ph + h, pw:pw + wd]
        if kernel.requires_grad:
            cols = _columns_2d(xp, kh, kw, sh, sw, oh, ow)
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result("conv2d", out, inputs, bw if bias is not None else (lambda g: bw(g)[:2]))


def glu(x, axis: int = 1) -> DiffArray:
    """Gated linear unit: split ``axis`` into halves ``a, b`` and return ``a * sigmoid(b)``."""
    x = as_diff(x)
    c = x.shape[axis]
    if c % 2:
        raise ContractError(f"glu needs an even size along axis {axis}, got {c}")
    a, b = np.split(x.values, 2, axis=axis)
    s = _sigmoid(b)
    out = a * s

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=axis),)

    return make_result("glu", out, (x,), bw)
