"""Parameterized layers built on the functional ops."""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import Tensor


def init_rng(seed: int, name: str) -> np.random.Generator:
    """Generator for one parameter, a pure function of (seed, name)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def kaiming_uniform(seed, name, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return init_rng(seed, name).uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal container: attributes that are Tensors or Modules are walked
    in assignment order by :meth:`named_parameters`."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for '{name}': checkpoint {arr.shape}, model {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Module):
    def __init__(self, in_planes, out_planes, kernel, stride=1, padding=0, *,
                 seed=0, name="conv", dtype=np.float32):
        fan_in = in_planes * kernel * kernel
        self.weight = Tensor(kaiming_uniform(seed, name + ".weight", (out_planes, in_planes, kernel, kernel),
                                             fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_planes, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features, out_features, *, seed=0, name="fc", dtype=np.float32):
        self.weight = Tensor(kaiming_uniform(seed, name + ".weight", (out_features, in_features),
                                             in_features, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class MaxPool2d(Module):
    def __init__(self, kernel, stride=None, padding=0):
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x):
        return F.max_pool2d(x, self.kernel, self.stride, self.padding)


class ResBlockB(Module):
    """B(p): identity skip around relu -> conv3x3 -> relu -> conv3x3."""

    def __init__(self, planes, *, seed=0, name="resb", dtype=np.float32):
        self.conv1 = Conv2d(planes, planes, 3, 1, 1, seed=seed, name=name + ".conv1", dtype=dtype)
        self.conv2 = Conv2d(planes, planes, 3, 1, 1, seed=seed, name=name + ".conv2", dtype=dtype)

    def forward(self, x):
        r = self.conv2(F.relu(self.conv1(F.relu(x))))
        return F.add(x, r)


class ResBlockC(Module):
    """C(p, q): strided residual branch with a 1x1 projection skip."""

    def __init__(self, in_planes, out_planes, stride=2, *, seed=0, name="resc", dtype=np.float32):
        self.conv1 = Conv2d(in_planes, out_planes, 3, stride, 1, seed=seed, name=name + ".conv1", dtype=dtype)
        self.conv2 = Conv2d(out_planes, out_planes, 3, 1, 1, seed=seed, name=name + ".conv2", dtype=dtype)
        self.proj = None
        if in_planes != out_planes or stride > 1:
            self.proj = Conv2d(in_planes, out_planes, 1, stride, 0, seed=seed, name=name + ".proj", dtype=dtype)

    def forward(self, x):
        r = self.conv2(F.relu(self.conv1(F.relu(x))))
        skip = self.proj(x) if self.proj is not None else x
        return F.add(skip, r)


class Resize(Module):
    def __init__(self, out_h, out_w):
        self.out_h, self.out_w = out_h, out_w

    def forward(self, x):
        return F.bilinear_resize(x, self.out_h, self.out_w)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_planes: int = 0
    out_planes: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    out_h: int = 0
    out_w: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.kernel < 1:
            raise ValueError("stride and kernel must be >= 1")


LAYER_KINDS = ("conv2d", "maxpool2d", "fc", "relu", "resblock_b", "resblock_c", "resize", "softmax_ce")


def build_layer(spec: LayerSpec, *, seed=0, name="layer", dtype=np.float32) -> Module:
    kind = spec.kind
    if kind == "conv2d":
        return Conv2d(spec.in_planes, spec.out_planes, spec.kernel, spec.stride, spec.padding,
                      seed=seed, name=name, dtype=dtype)
    if kind == "maxpool2d":
        return MaxPool2d(spec.kernel, spec.stride, spec.padding)
    if kind == "fc":
        return Linear(spec.in_planes, spec.out_planes, seed=seed, name=name, dtype=dtype)
    if kind == "relu":
        return ReLU()
    if kind == "resblock_b":
        return ResBlockB(spec.in_planes, seed=seed, name=name, dtype=dtype)
    if kind == "resblock_c":
        return ResBlockC(spec.in_planes, spec.out_planes, spec.stride, seed=seed, name=name, dtype=dtype)
    if kind == "resize":
        return Resize(spec.out_h, spec.out_w)
    raise ValueError("softmax_ce is a loss, use functional.softmax_cross_entropy")
