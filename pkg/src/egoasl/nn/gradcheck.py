"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numeric_grad(fn, inputs, index, eps=1e-6):
    """d fn(*inputs) / d inputs[index] by central differences.

    ``fn`` maps Tensors to a scalar Tensor; ``inputs`` are float64 arrays.
    """
    base = [np.array(a, dtype=np.float64, copy=True) for a in inputs]
    target = base[index]
    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        plus = float(fn(*[Tensor(a) for a in base]).data)
        flat[k] = orig - eps
        minus = float(fn(*[Tensor(a) for a in base]).data)
        flat[k] = orig
        gflat[k] = (plus - minus) / (2 * eps)
    return grad


def analytic_grads(fn, inputs):
    ts = [Tensor(np.array(a, dtype=np.float64, copy=True), requires_grad=True) for a in inputs]
    fn(*ts).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn, inputs, eps=1e-6):
    """Max relative error between analytic and numeric gradients over all inputs."""
    analytic = analytic_grads(fn, inputs)
    worst = 0.0
    for i in range(len(inputs)):
        worst = max(worst, relative_error(analytic[i], numeric_grad(fn, inputs, i, eps)))
    return worst
