"""Raw numpy kernels for 2-D cross-correlation and its two adjoints.

All three maps are bilinear in their two arguments, and each one's partial
derivatives are expressed by the other two, which is what lets the tape
differentiate through convolutions to any order.

Layouts: images are (N, C, H, W), kernels are (O, C, kh, kw).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lcnn.autodiff.errors import ShapeError


def output_hw(in_hw, k_hw, stride, padding):
    h, w = in_hw
    kh, kw = k_hw
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if stride < 1 or padding < 0 or ho < 1 or wo < 1:
        raise ShapeError(
            f"invalid conv geometry: input {in_hw}, kernel {k_hw}, "
            f"stride {stride}, padding {padding}"
        )
    return ho, wo


def _windows(x, k_hw, stride, padding, out_hw):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, k_hw, axis=(2, 3))
    ho, wo = out_hw
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def conv2d(x, w, stride=1, padding=0):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    out_hw = output_hw(x.shape[2:], w.shape[2:], stride, padding)
    win = _windows(x, w.shape[2:], stride, padding, out_hw)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_input_adjoint(g, w, stride, padding, in_hw):
    """Adjoint of ``x -> conv2d(x, w)`` applied to ``g`` (a transposed conv)."""
    n, o, ho, wo = g.shape
    if w.shape[0] != o:
        raise ShapeError(f"adjoint shape mismatch: grad {g.shape}, kernel {w.shape}")
    if output_hw(in_hw, w.shape[2:], stride, padding) != (ho, wo):
        raise ShapeError(f"grad spatial size {(ho, wo)} inconsistent with input {in_hw}")
    c, kh, kw = w.shape[1:]
    h, wd = in_hw
    contrib = np.tensordot(g, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return np.ascontiguousarray(xp[:, :, padding : padding + h, padding : padding + wd])


def conv2d_kernel_adjoint(x, g, stride, padding, k_hw):
    """Adjoint of ``w -> conv2d(x, w)`` applied to ``g`` (the kernel gradient)."""
    out_hw = output_hw(x.shape[2:], k_hw, stride, padding)
    if g.shape[0] != x.shape[0] or tuple(g.shape[2:]) != out_hw:
        raise ShapeError(f"kernel adjoint mismatch: input {x.shape}, grad {g.shape}")
    win = _windows(x, k_hw, stride, padding, out_hw)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw
