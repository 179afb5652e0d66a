"""Tiny module system: parameter registration, train/eval mode, layers.

Parameters and running-stat buffers are addressed by dotted attribute
paths (``enc0.pair1.attn.conv2.weight``); that path grammar is what the
FNT1 checkpoints store and validate against.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, batch_norm, conv2d, matmul

__all__ = ["Parameter", "Module", "Conv2d", "BatchNorm2d", "Dense", "he_uniform"]


class Parameter(Tensor):
    """A learnable tensor; always requires a gradient."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """He-style fan-in uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


class Module:
    """Base class tracking parameters, buffers and child modules by name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "_trace_name", None)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        else:
            object.__setattr__(self, name, value)

    def __getattr__(self, name):
        for store in ("_params", "_buffers", "_modules"):
            d = object.__getattribute__(self, store)
            if name in d:
                return d[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = np.asarray(array, dtype=np.float64)

    def set_buffer(self, name: str, array: np.ndarray) -> None:
        if name not in self._buffers:
            raise KeyError(name)
        self._buffers[name] = np.asarray(array, dtype=np.float64)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.named_modules(prefix + name + ".")

    def train(self, flag: bool = True):
        object.__setattr__(self, "training", flag)
        for m in self._modules.values():
            m.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        tracer = _ACTIVE_TRACER
        if tracer is None:
            return self.forward(*args, **kwargs)
        tracer.push(self._trace_name or type(self).__name__)
        try:
            return self.forward(*args, **kwargs)
        finally:
            tracer.pop()


_ACTIVE_TRACER = None


class FlopTracer:
    """Attributes op-level FLOP counts to the innermost module scope."""

    def __init__(self):
        self.stack = []
        self.totals = {}
        self.order = []

    def push(self, name: str) -> None:
        self.stack.append(name)

    def pop(self) -> None:
        self.stack.pop()

    def add(self, n: int) -> None:
        key = self.stack[-1] if self.stack else ""
        if key not in self.totals:
            self.totals[key] = 0
            self.order.append(key)
        self.totals[key] += n


def set_tracer(tracer) -> None:
    global _ACTIVE_TRACER
    _ACTIVE_TRACER = tracer


class Conv2d(Module):
    """Stride-1 same-padding convolution layer with He-uniform init."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 groups: int = 1, bias: bool = False):
        super().__init__()
        if in_ch % groups or out_ch % groups:
            raise ValueError(f"channels ({in_ch}->{out_ch}) not divisible by groups={groups}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.groups = groups
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = Parameter(he_uniform(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in))
        if bias:
            self.bias = Parameter(np.zeros(out_ch))
        self.has_bias = bias

    def forward(self, x):
        return conv2d(x, self.weight, self.bias if self.has_bias else None, self.groups)

    def set_identity(self) -> None:
        """1x1 identity kernel (square channel map); handy for wiring tests."""
        if self.kernel != 1 or self.in_ch != self.out_ch or self.groups != 1:
            raise ValueError("identity init needs a square 1x1 ungrouped conv")
        self.weight.data[:] = np.eye(self.out_ch)[:, :, None, None]
        if self.has_bias:
            self.bias.data[:] = 0.0


class BatchNorm2d(Module):
    """Per-channel batch norm with running statistics (keep factor 0.9)."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta,
                          self._buffers["running_mean"], self._buffers["running_var"],
                          self.training, self.eps, self.momentum)


class Dense(Module):
    """Bias-free linear map on (N, in) -> (N, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(he_uniform(rng, (in_features, out_features), in_features))

    def forward(self, x):
        return matmul(x, self.weight)
