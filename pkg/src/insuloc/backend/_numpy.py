"""Pure-numpy implementations of the hot kernels.

Same signatures as the compiled module in ``_native.pyx``; all arrays are
C-contiguous float64. These versions lean on strided views and slice
arithmetic, which keeps them vectorized but costs extra memory traffic
compared to the single-pass compiled loops.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, sh, sw, oh, ow):
    """Unfold padded NCHW input into (N, C*kh*kw, oh*ow) patch columns."""
    n, c = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    # win: (N, C, oh, ow, kh, kw) -> (N, C, kh, kw, oh, ow)
    cols = win.transpose(0, 1, 4, 5, 2, 3)
    return np.ascontiguousarray(cols).reshape(n, c * kh * kw, oh * ow)


def col2im(cols, c, hp, wp, kh, kw, sh, sw, oh, ow):
    """Adjoint of im2col: scatter-add patch columns back onto the input grid."""
    n = cols.shape[0]
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    x = np.zeros((n, c, hp, wp), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            x[:, :, u:u + sh * oh:sh, v:v + sw * ow:sw] += cols[:, :, u, v]
    return x


def maxpool2x2_forward(x):
    """2x2/stride-2 max pool; returns (output, argmax in {0..3} per window)."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=4)  # first max wins on ties
    out = np.take_along_axis(win, arg[..., None], axis=4)[..., 0]
    return out, arg.astype(np.int64)


def maxpool2x2_backward(gout, argmax, h, w):
    """Route each upstream gradient to the argmax position of its window."""
    n, c = gout.shape[:2]
    gwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=np.float64)
    np.put_along_axis(gwin, argmax[..., None], gout[..., None], axis=4)
    gwin = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(gwin).reshape(n, c, h, w)


def _sample_grid(lo, hi, s, limit):
    if s == 1:
        pts = np.array([(lo + hi) / 2.0])
    else:
        pts = lo + np.arange(s) * ((hi - lo) / (s - 1))
    return np.clip(pts, 0.0, limit - 1.0)


def crop_resize_forward(feat, y0, x0, y1, x1, s):
    """Bilinearly sample an s*s grid spanning box corners from a CHW map."""
    _, h, w = feat.shape
    ys = _sample_grid(y0, y1, s, h)
    xs = _sample_grid(x0, x1, s, w)
    yi = np.floor(ys).astype(np.int64)
    xi = np.floor(xs).astype(np.int64)
    yi = np.minimum(yi, h - 2) if h > 1 else np.zeros_like(yi)
    xi = np.minimum(xi, w - 2) if w > 1 else np.zeros_like(xi)
    fy = (ys - yi)[:, None]
    fx = (xs - xi)[None, :]
    y2 = np.minimum(yi + 1, h - 1)
    x2 = np.minimum(xi + 1, w - 1)
    tl = feat[:, yi[:, None], xi[None, :]]
    tr = feat[:, yi[:, None], x2[None, :]]
    bl = feat[:, y2[:, None], xi[None, :]]
    br = feat[:, y2[:, None], x2[None, :]]
    out = (tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx
           + bl * fy * (1 - fx) + br * fy * fx)
    return np.ascontiguousarray(out)


def crop_resize_backward(gout, y0, x0, y1, x1, h, w):
    """Adjoint of crop_resize_forward; returns the CHW feature gradient."""
    c, s, _ = gout.shape
    ys = _sample_grid(y0, y1, s, h)
    xs = _sample_grid(x0, x1, s, w)
    yi = np.floor(ys).astype(np.int64)
    xi = np.floor(xs).astype(np.int64)
    yi = np.minimum(yi, h - 2) if h > 1 else np.zeros_like(yi)
    xi = np.minimum(xi, w - 2) if w > 1 else np.zeros_like(xi)
    fy = (ys - yi)[:, None]
    fx = (xs - xi)[None, :]
    y2 = np.minimum(yi + 1, h - 1)
    x2 = np.minimum(xi + 1, w - 1)
    gfeat = np.zeros((c, h, w), dtype=np.float64)
    yg, xg = yi[:, None], xi[None, :]
    y2g, x2g = y2[:, None], x2[None, :]
    np.add.at(gfeat, (slice(None), np.broadcast_to(yg, (s, s)), np.broadcast_to(xg, (s, s))), gout * (1 - fy) * (1 - fx))
    np.add.at(gfeat, (slice(None), np.broadcast_to(yg, (s, s)), np.broadcast_to(x2g, (s, s))), gout * (1 - fy) * fx)
    np.add.at(gfeat, (slice(None), np.broadcast_to(y2g, (s, s)), np.broadcast_to(xg, (s, s))), gout * fy * (1 - fx))
    np.add.at(gfeat, (slice(None), np.broadcast_to(y2g, (s, s)), np.broadcast_to(x2g, (s, s))), gout * fy * fx)
    return gfeat
