"""Volumetric kernels (forward and adjoint) on ``(batch, channel, n1, n2, n3)`` arrays.

Convolutions use the cross-correlation convention of deep-learning
frameworks; flipping the kernel recovers the textbook convolution.
"""

import itertools

import numpy as np


def _offsets(k):
    return itertools.product(range(k), repeat=3)


def conv3d_forward(x, w):
    """Stride-1 convolution with zero 'same' padding; ``w`` is ``(Co, Ci, k, k, k)``."""
    B, Ci, n1, n2, n3 = x.shape
    Co, Ci2, k = w.shape[:3]
    if Ci != Ci2:
        raise ValueError(f"conv3d: input has {Ci} channels, kernel expects {Ci2}")
    if k % 2 != 1:
        raise ValueError("conv3d: kernel size must be odd for same padding")
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
    y = np.zeros((B, Co, n1 * n2 * n3))
    for a, b, c in _offsets(k):
        patch = xp[:, :, a:a + n1, b:b + n2, c:c + n3].reshape(B, Ci, -1)
        y += w[:, :, a, b, c] @ patch
    return y.reshape(B, Co, n1, n2, n3)


def conv3d_backward(x, w, gy):
    B, Ci, n1, n2, n3 = x.shape
    Co, _, k = w.shape[:3]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
    gy2 = gy.reshape(B, Co, -1)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for a, b, c in _offsets(k):
        patch = xp[:, :, a:a + n1, b:b + n2, c:c + n3].reshape(B, Ci, -1)
        dw[:, :, a, b, c] = np.einsum("bop,bip->oi", gy2, patch, optimize=True)
        dxp[:, :, a:a + n1, b:b + n2, c:c + n3] += (w[:, :, a, b, c].T @ gy2).reshape(B, Ci, n1, n2, n3)
    dx = dxp[:, :, p:p + n1, p:p + n2, p:p + n3] if p else dxp
    return dx, dw


def transposed_full_size(m, k, stride):
    return (m - 1) * stride + k


def check_output_size(in_size, k, stride, out_size):
    for m, o in zip(in_size, out_size):
        full = transposed_full_size(m, k, stride)
        if not full <= o < full + stride:
            raise ValueError(
                f"transposed conv cannot map size {m} to {o} with kernel {k}, stride {stride}")


def conv3d_transposed_forward(x, w, stride, out_size):
    """Transposed convolution; ``w`` is ``(Ci, Co, k, k, k)``.

    ``out_size`` selects among the admissible output sizes, the extra
    trailing planes receiving no kernel contribution.
    """
    B, Ci, m1, m2, m3 = x.shape
    Ci2, Co, k = w.shape[:3]
    if Ci != Ci2:
        raise ValueError(f"conv3d_transposed: input has {Ci} channels, kernel expects {Ci2}")
    check_output_size((m1, m2, m3), k, stride, out_size)
    y = np.zeros((B, Co) + tuple(out_size))
    x2 = x.reshape(B, Ci, -1)
    s = stride
    for a, b, c in _offsets(k):
        contrib = (w[:, :, a, b, c].T @ x2).reshape(B, Co, m1, m2, m3)
        y[:, :, a:a + s * (m1 - 1) + 1:s, b:b + s * (m2 - 1) + 1:s, c:c + s * (m3 - 1) + 1:s] += contrib
    return y


def conv3d_transposed_backward(x, w, stride, gy):
    B, Ci, m1, m2, m3 = x.shape
    k = w.shape[2]
    s = stride
    x2 = x.reshape(B, Ci, -1)
    dx = np.zeros((B, Ci, m1 * m2 * m3))
    dw = np.zeros_like(w)
    for a, b, c in _offsets(k):
        g = gy[:, :, a:a + s * (m1 - 1) + 1:s, b:b + s * (m2 - 1) + 1:s,
               c:c + s * (m3 - 1) + 1:s].reshape(B, gy.shape[1], -1)
        dx += w[:, :, a, b, c] @ g
        dw[:, :, a, b, c] = np.einsum("bip,bop->io", x2, g, optimize=True)
    return dx.reshape(x.shape), dw


def maxpool3d_forward(x):
    """2x2x2 max pooling, stride 2, floor mode.

    Returns the pooled values and the argmax within each window; ties go to
    the lowest linear index.
    """
    B, C, n1, n2, n3 = x.shape
    m1, m2, m3 = n1 // 2, n2 // 2, n3 // 2
    if min(m1, m2, m3) == 0:
        raise ValueError(f"maxpool3d: volume {x.shape[2:]} too small to pool")
    win = (x[:, :, :2 * m1, :2 * m2, :2 * m3]
           .reshape(B, C, m1, 2, m2, 2, m3, 2)
           .transpose(0, 1, 2, 4, 6, 3, 5, 7)
           .reshape(B, C, m1, m2, m3, 8))
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool3d_backward(x_shape, idx, gy):
    B, C, n1, n2, n3 = x_shape
    m1, m2, m3 = idx.shape[2:]
    g8 = np.zeros((B, C, m1, m2, m3, 8))
    np.put_along_axis(g8, idx[..., None], gy[..., None], axis=-1)
    gwin = (g8.reshape(B, C, m1, m2, m3, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(B, C, 2 * m1, 2 * m2, 2 * m3))
    dx = np.zeros(x_shape)
    dx[:, :, :2 * m1, :2 * m2, :2 * m3] = gwin
    return dx
