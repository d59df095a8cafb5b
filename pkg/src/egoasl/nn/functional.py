"""Differentiable ops used by the localization networks.

Layout is NCHW throughout. Every op takes and returns :class:`Tensor` and
records a backward closure only when some input requires gradients.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    pass


def _conv_out(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _pad2d(x, padding, value=0.0):
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _windows(xp, kh, kw, stride, ho, wo):
    # (N, C, Ho, Wo, kh, kw) strided view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def conv2d(x, weight, bias=None, stride=1, padding=0):
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW weight")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} planes, weight expects {ci}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw}")

    xp = _pad2d(x.data, padding)
    # (N, C*kh*kw, Ho*Wo) so both the product and col2im stay contiguous per plane
    cols = _windows(xp, kh, kw, stride, ho, wo).transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    w2 = weight.data.reshape(o, -1)
    y = np.matmul(w2, cols)
    if bias is not None:
        bias = as_tensor(bias)
        y += bias.data[:, None]
    out = y.reshape(n, o, ho, wo)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g3 = g.reshape(n, o, ho * wo)
        if weight.requires_grad:
            weight._accumulate(np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g3.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g3).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += \
                        dcols[:, :, i, j]
            x._accumulate(dxp[:, :, padding : padding + h, padding : padding + w])

    return make_result(out, parents, backward)


def max_pool2d(x, kernel, stride=None, padding=0):
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, kernel, stride, padding), _conv_out(w, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: input {h}x{w} too small for kernel {kernel}")
    xp = _pad2d(x.data, padding, value=-np.inf)
    win = _windows(xp, kernel, kernel, stride, ho, wo).reshape(n, c, ho, wo, kernel * kernel)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dxp = np.zeros(xp.shape, dtype=x.dtype)
        for t in range(kernel * kernel):
            i, j = divmod(t, kernel)
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += \
                np.where(idx == t, g, 0)
        x._accumulate(dxp[:, :, padding : padding + h, padding : padding + w])

    return make_result(np.ascontiguousarray(out), (x,), backward)


def linear(x, weight, bias=None):
    """``y = x @ weight.T + bias`` with x of shape (N, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        y += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ weight.data)

    return make_result(y, parents, backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        x._accumulate(np.where(mask, g, 0))

    return make_result(out, (x,), backward)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return make_result(a.data + b.data, (a, b), backward)


def scale(x, factor):
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g * factor)

    return make_result(x.data * factor, (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape

    def backward(g):
        x._accumulate(g.reshape(old))

    return make_result(x.data.reshape(shape), (x,), backward)


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def concat(xs, axis=1):
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def getitem(x, index):
    """Basic (slice/int) indexing."""
    x = as_tensor(x)
    out = x.data[index]

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[index] += g
        x._accumulate(full)

    return make_result(np.array(out, copy=True), (x,), backward)


def swap_last(x):
    """Transpose the last two axes."""
    x = as_tensor(x)
    out = np.swapaxes(x.data, -1, -2)

    def backward(g):
        x._accumulate(np.swapaxes(g, -1, -2))

    return make_result(out, (x,), backward)


def resample(x, rows, cols):
    """Separable linear map over the last two axes: ``rows @ x @ cols.T``.

    ``rows`` is (H_out, H_in) and ``cols`` is (W_out, W_in).
    """
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=x.dtype)
    cols = np.asarray(cols, dtype=x.dtype)
    if x.shape[-2] != rows.shape[1] or x.shape[-1] != cols.shape[1]:
        raise ShapeError(f"resample: input {x.shape[-2:]} vs matrices {rows.shape}, {cols.shape}")
    out = rows @ (x.data @ cols.T)

    def backward(g):
        x._accumulate(rows.T @ (g @ cols))

    return make_result(out, (x,), backward)


@lru_cache(maxsize=128)
def _bilinear_matrix(n_in, n_out, dtype_str):
    """Corner-aligned 1-D linear interpolation matrix of shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
    else:
        if n_out == 1:
            pos = np.array([(n_in - 1) / 2.0])
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
        frac = pos - lo
        rows = np.arange(n_out)
        m[rows, lo] += 1.0 - frac
        m[rows, lo + 1] += frac
    m = m.astype(dtype_str)
    m.setflags(write=False)
    return m


def bilinear_matrix(n_in, n_out, dtype=np.float64):
    return _bilinear_matrix(int(n_in), int(n_out), np.dtype(dtype).str)


def bilinear_resize(x, out_h, out_w):
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize: output dims must be >= 1")
    x = as_tensor(x)
    h, w = x.shape[-2:]
    return resample(x, bilinear_matrix(h, out_h, x.dtype), bilinear_matrix(w, out_w, x.dtype))


def softmax(x, axis=1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return make_result(y, (x,), backward)


def _check_one_hot(target, axis):
    t = np.asarray(target)
    if not np.all((t == 0) | (t == 1)) or not np.all(t.sum(axis=axis) == 1):
        raise ValueError("softmax_cross_entropy: target is not one-hot along the class axis")


def log_softmax_np(x, axis=1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, target, axis=1):
    """Mean over all cells of ``-log softmax(logits)[target class]``."""
    logits = as_tensor(logits)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if target.shape != logits.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs target {target.shape}")
    _check_one_hot(target, axis)
    logp = log_softmax_np(logits.data, axis)
    cells = logits.data.size // logits.shape[axis]
    loss = -(target * logp).sum() / cells

    def backward(g):
        logits._accumulate((np.exp(logp) - target) * (g / cells))

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def weighted_sum(x, weights):
    """Scalar ``sum(x * weights)``; ``weights`` is a constant array."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=x.dtype)

    def backward(g):
        x._accumulate(g * w)

    return make_result(np.asarray((x.data * w).sum(), dtype=x.dtype), (x,), backward)
