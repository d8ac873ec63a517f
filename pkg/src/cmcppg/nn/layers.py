"""Parameterized layers built on :mod:`cmcppg.nn.tensor`."""
from __future__ import annotations

import numpy as np

from cmcppg.nn import tensor as T
from cmcppg.nn.tensor import Tensor


class Module:
    """Container tracking parameters, buffers and submodules in
    registration order (which fixes the serialization order)."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def state_arrays(self):
        """Parameters then buffers, each in registration order."""
        out = [(n, p.data) for n, p in self.named_parameters()]
        out += list(self.named_buffers())
        return out

    def load_state_arrays(self, arrays):
        names = [n for n, _ in self.state_arrays()]
        if len(arrays) != len(names):
            raise ValueError(f"expected {len(names)} tensors, got {len(arrays)}")
        it = iter(arrays)
        for _, p in self.named_parameters():
            a = next(it)
            if a.shape != p.data.shape:
                raise ValueError(f"shape mismatch {a.shape} vs {p.data.shape}")
            p.data = np.array(a, dtype=p.data.dtype)
        self._load_buffers(it)

    def _load_buffers(self, it):
        for name in self._buffers:
            cur = getattr(self, name)
            cur[...] = next(it)
        for child in self._children.values():
            child._load_buffers(it)

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast parameters and buffers in place (64-bit mode for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        for name in list(self._buffers):
            arr = getattr(self, name).astype(dtype)
            self.register_buffer(name, arr)
        for child in self._children.values():
            child._cast_buffers(dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(array):
    return Tensor(np.asarray(array, dtype=T.default_dtype()), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, zero=False):
        super().__init__()
        if zero:
            w = np.zeros((n_out, n_in))
        else:
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_out, n_in))
        self.weight = _param(w)
        self.bias = _param(np.zeros(n_out)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=None, bias=False):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        std = np.sqrt(2.0 / (c_in * k))
        self.weight = _param(rng.normal(0.0, std, size=(c_out, c_in, k)))
        self.bias = _param(np.zeros(c_out)) if bias else None

    def forward(self, x):
        return T.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm1d(Module):
    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        dt = T.default_dtype()
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dt))
        self.register_buffer("running_var", np.ones(channels, dtype=dt))

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class Identity(Module):
    def forward(self, x):
        return x
