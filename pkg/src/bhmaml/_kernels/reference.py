"""Pure-numpy kernels: 3x3 same-padding convolution and 2x2 max pooling.

Layout is channels-last throughout: images are [B, H, W, C] and kernels are
[3, 3, Cin, Cout]. The convolution is a cross-correlation (no kernel flip),
evaluated as im2col + GEMM; its input gradient reuses the forward kernel
with a 180-degree-rotated, channel-swapped filter bank.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "python"


def _patches(x: np.ndarray) -> np.ndarray:
    """im2col view for a 3x3 window with padding 1: [B, H, W, 3, 3, Cin]."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # [B, H, W, Cin, 3, 3]
    return win.transpose(0, 1, 2, 4, 5, 3)


def conv3x3_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.tensordot(_patches(x), w, axes=([3, 4, 5], [0, 1, 2]))


def conv3x3_backward(x: np.ndarray, w: np.ndarray, gy: np.ndarray):
    # dL/dx: correlate gy with the rotated kernel, in/out channels swapped.
    w_rot = w[::-1, ::-1].transpose(0, 1, 3, 2)
    gx = conv3x3_forward(gy, np.ascontiguousarray(w_rot))
    gw = np.tensordot(_patches(x), gy, axes=([0, 1, 2], [0, 1, 2]))
    return gx, gw


def maxpool2_forward(x: np.ndarray):
    """2x2/stride-2 max pool; odd trailing rows/cols are dropped.

    Returns (pooled, idx) where idx in {0..3} encodes the argmax position
    2*di + dj inside each window (first max wins on ties).
    """
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    win = (
        x[:, : h2 * 2, : w2 * 2, :]
        .reshape(b, h2, 2, w2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(b, h2, w2, c, 4)
    )
    idx = np.argmax(win, axis=-1).astype(np.int8)
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(idx: np.ndarray, gy: np.ndarray, h: int, w: int) -> np.ndarray:
    b, h2, w2, c = gy.shape
    gwin = np.zeros((b, h2, w2, c, 4))
    np.put_along_axis(gwin, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    gx = np.zeros((b, h, w, c))
    gx[:, : h2 * 2, : w2 * 2, :] = (
        gwin.reshape(b, h2, w2, c, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(b, h2 * 2, w2 * 2, c)
    )
    return gx
