"""Pure-numpy kernels for the convolution and pooling hot loops.

This is the fallback backend: the whole library runs on it without the
compiled extension, at im2col-plus-GEMM speed. Contracts are shared with
the Cython backend in ``_fastkernels``:

* images are float64, C-contiguous, laid out (batch, height, width, channels)
* conv weights are (k, k, in_channels, out_channels), bias is (out_channels,)
* SAME padding produces ceil(size/stride) outputs with zero padding split
  low/high (extra pixel on the high side); VALID produces
  floor((size-k)/stride)+1
* maxpool is VALID-only; ties go to the first window position in row-major
  (kh, kw) order
"""

import numpy as np


def same_pad_amounts(size, k, stride):
    """Output extent and (low, high) zero padding for SAME convolution."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return out, lo, total - lo


def conv2d_out_hw(h, w, k, stride, same):
    if same:
        return -(-h // stride), -(-w // stride)
    return (h - k) // stride + 1, (w - k) // stride + 1


def _im2col(x, k, stride, same):
    """Patch matrix of shape (B, OH, OW, k*k*C); patch order is (kh, kw, c)."""
    b, h, w, c = x.shape
    if same:
        oh, pt, pb = same_pad_amounts(h, k, stride)
        ow, pl, pr = same_pad_amounts(w, k, stride)
        if pt or pb or pl or pr:
            x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    else:
        oh = (h - k) // stride + 1
        ow = (w - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, OH, OW, C, k, k)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b, oh, ow, k * k * c)
    return np.ascontiguousarray(cols), oh, ow


def conv2d_forward(x, w, bias, stride, same):
    b = x.shape[0]
    k, _, cin, cout = w.shape
    cols, oh, ow = _im2col(x, k, stride, same)
    y = cols.reshape(b * oh * ow, k * k * cin) @ w.reshape(k * k * cin, cout)
    y += bias
    return y.reshape(b, oh, ow, cout)


def conv2d_backward(x, w, gy, stride, same):
    b, h, width, cin = x.shape
    k = w.shape[0]
    cout = w.shape[3]
    oh, ow = gy.shape[1], gy.shape[2]

    gb = gy.sum(axis=(0, 1, 2))

    cols, _, _ = _im2col(x, k, stride, same)
    gy_mat = gy.reshape(b * oh * ow, cout)
    gw = (cols.reshape(b * oh * ow, k * k * cin).T @ gy_mat).reshape(w.shape)

    # col2im: scatter the per-patch gradients back onto the (padded) input.
    gcols = (gy_mat @ w.reshape(k * k * cin, cout).T).reshape(b, oh, ow, k, k, cin)
    if same:
        _, pt, pb = same_pad_amounts(h, k, stride)
        _, pl, pr = same_pad_amounts(width, k, stride)
    else:
        pt = pb = pl = pr = 0
    gxp = np.zeros((b, h + pt + pb, width + pl + pr, cin))
    for kh in range(k):
        for kw in range(k):
            gxp[:, kh : kh + stride * oh : stride, kw : kw + stride * ow : stride, :] += gcols[:, :, :, kh, kw, :]
    return gxp[:, pt : pt + h, pl : pl + width, :], gw, gb


def maxpool2d_forward(x, k, stride):
    b, h, w, c = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, OH, OW, C, k, k)
    flat = win.reshape(win.shape[:4] + (k * k,))
    y = flat.max(axis=-1)
    arg = flat.argmax(axis=-1).astype(np.int64)
    return np.ascontiguousarray(y), np.ascontiguousarray(arg)


def maxpool2d_backward(gy, arg, x_shape, k, stride):
    b, h, w, c = x_shape
    _, oh, ow, _ = gy.shape
    kh, kw = arg // k, arg % k
    ih = np.arange(oh)[None, :, None, None] * stride + kh
    iw = np.arange(ow)[None, None, :, None] * stride + kw
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, None, None, :]
    flat = ((bi * h + ih) * w + iw) * c + ci
    gx = np.zeros(b * h * w * c)
    # overlapping windows (stride < k) can hit the same input cell twice
    np.add.at(gx, flat.ravel(), gy.ravel())
    return gx.reshape(x_shape)
