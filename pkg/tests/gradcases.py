"""Random small instances for finite-difference checks of every differentiable op.

Each factory takes a Generator and returns ``(fn, inputs)`` where ``fn`` maps
Tensors to a scalar and ``inputs`` are float64 arrays.
"""
import numpy as np

from egoasl.nn import functional as F


def _readout(rng, shape):
    return rng.standard_normal(shape)


def case_conv2d(rng):
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = int(rng.integers(k, 7)), int(rng.integers(k, 7))
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    r = _readout(rng, (n, o, ho, wo))
    x, wt, b = rng.standard_normal((n, c, h, w)), rng.standard_normal((o, c, k, k)), rng.standard_normal(o)
    return (lambda x, wt, b: F.weighted_sum(F.conv2d(x, wt, b, stride, pad), r)), [x, wt, b]


def case_max_pool2d(rng):
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, (k + 1) // 2 + 0 if k > 1 else 1))
    pad = min(pad, k // 2)
    h, w = int(rng.integers(k, 8)), int(rng.integers(k, 8))
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    x = rng.permutation(2 * 3 * h * w).reshape(2, 3, h, w) * 0.01 + rng.standard_normal((2, 3, h, w)) * 1e-3
    r = _readout(rng, (2, 3, ho, wo))
    return (lambda x: F.weighted_sum(F.max_pool2d(x, k, stride, pad), r)), [x]


def case_linear(rng):
    n, i, o = rng.integers(1, 5), rng.integers(1, 7), rng.integers(1, 7)
    r = _readout(rng, (n, o))
    args = [rng.standard_normal((n, i)), rng.standard_normal((o, i)), rng.standard_normal(o)]
    return (lambda x, w, b: F.weighted_sum(F.linear(x, w, b), r)), args


def case_relu(rng):
    shape = tuple(int(s) for s in rng.integers(1, 5, size=rng.integers(1, 4)))
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    r = _readout(rng, shape)
    return (lambda x: F.weighted_sum(F.relu(x), r)), [x]


def case_add(rng):
    shape = tuple(int(s) for s in rng.integers(1, 5, size=rng.integers(1, 4)))
    r = _readout(rng, shape)
    return (lambda a, b: F.weighted_sum(F.add(a, b), r)), [rng.standard_normal(shape), rng.standard_normal(shape)]


def case_scale(rng):
    shape = tuple(int(s) for s in rng.integers(1, 5, size=2))
    c = float(rng.standard_normal())
    r = _readout(rng, shape)
    return (lambda x: F.weighted_sum(F.scale(x, c), r)), [rng.standard_normal(shape)]


def case_reshape(rng):
    a, b, c = (int(s) for s in rng.integers(1, 5, size=3))
    r = _readout(rng, (a, b * c))
    return (lambda x: F.weighted_sum(F.flatten(x), r)), [rng.standard_normal((a, b, c))]


def case_concat(rng):
    n, h = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    c1, c2 = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    r = _readout(rng, (n, c1 + c2, h))
    args = [rng.standard_normal((n, c1, h)), rng.standard_normal((n, c2, h))]
    return (lambda a, b: F.weighted_sum(F.concat([a, b], axis=1), r)), args


def case_getitem(rng):
    n, c, h = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(1, 5))
    lo = int(rng.integers(0, c - 1))
    idx = (slice(None), slice(lo, c))
    r = _readout(rng, (n, c - lo, h))
    return (lambda x: F.weighted_sum(F.getitem(x, idx), r)), [rng.standard_normal((n, c, h))]


def case_resample(rng):
    h, w, ho, wo = (int(s) for s in rng.integers(1, 6, size=4))
    rows, cols = rng.standard_normal((ho, h)), rng.standard_normal((wo, w))
    r = _readout(rng, (2, ho, wo))
    return (lambda x: F.weighted_sum(F.resample(x, rows, cols), r)), [rng.standard_normal((2, h, w))]


def case_swap_last(rng):
    h, w = (int(s) for s in rng.integers(1, 7, size=2))
    r = _readout(rng, (3, w, h))
    return (lambda x: F.weighted_sum(F.swap_last(x), r)), [rng.standard_normal((3, h, w))]


def case_bilinear_resize(rng):
    h, w, ho, wo = (int(s) for s in rng.integers(1, 9, size=4))
    r = _readout(rng, (1, 2, ho, wo))
    return (lambda x: F.weighted_sum(F.bilinear_resize(x, ho, wo), r)), [rng.standard_normal((1, 2, h, w))]


def case_softmax(rng):
    n, c, h = int(rng.integers(1, 3)), int(rng.integers(2, 4)), int(rng.integers(1, 4))
    r = _readout(rng, (n, c, h))
    return (lambda x: F.weighted_sum(F.softmax(x, axis=1), r)), [rng.standard_normal((n, c, h))]


def case_softmax_cross_entropy(rng):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    cls = rng.integers(0, 2, size=(n, h, w))
    target = np.stack([cls == 0, cls == 1], axis=1).astype(np.float64)
    return (lambda x: F.softmax_cross_entropy(x, target)), [rng.standard_normal((n, 2, h, w))]


def case_weighted_sum(rng):
    shape = tuple(int(s) for s in rng.integers(1, 5, size=2))
    r = _readout(rng, shape)
    return (lambda x: F.weighted_sum(x, r)), [rng.standard_normal(shape)]


CASES = {
    "conv2d": case_conv2d,
    "max_pool2d": case_max_pool2d,
    "linear": case_linear,
    "relu": case_relu,
    "add": case_add,
    "scale": case_scale,
    "reshape": case_reshape,
    "concat": case_concat,
    "getitem": case_getitem,
    "resample": case_resample,
    "swap_last": case_swap_last,
    "bilinear_resize": case_bilinear_resize,
    "softmax": case_softmax,
    "softmax_cross_entropy": case_softmax_cross_entropy,
    "weighted_sum": case_weighted_sum,
}
