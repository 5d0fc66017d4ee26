"""Parameter containers and the small set of layers the models are built from."""

from __future__ import annotations

import numpy as np

from cpgm.autodiff import functional as F
from cpgm.autodiff.tensor import DTYPE, Tensor


class ParameterSet(dict):
    """Name -> trainable :class:`Tensor`, iterated in sorted name order."""

    def add(self, name, value):
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor = Tensor(value, requires_grad=True, name=name)
        self[name] = tensor
        return tensor

    def __iter__(self):
        return iter(sorted(super().keys()))

    def keys(self):
        return list(iter(self))

    def items(self):
        return [(k, self[k]) for k in self]

    def values(self):
        return [self[k] for k in self]

    def subset(self, prefixes):
        prefixes = tuple(prefixes)
        out = ParameterSet()
        for name in self:
            if name.startswith(prefixes):
                dict.__setitem__(out, name, self[name])
        return out

    def zero_grad(self):
        for p in self.values():
            p.grad = None

    def count(self):
        return sum(p.data.size for p in self.values())


def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, params, name, d_in, d_out, rng, bias=True, zero_init=False):
        self.name = name
        w = np.zeros((d_out, d_in)) if zero_init else he_uniform(rng, (d_out, d_in), d_in)
        self.weight = params.add(f"{name}.weight", w)
        self.bias = params.add(f"{name}.bias", np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d:
    def __init__(self, params, name, c_in, c_out, kernel, stride, padding, rng):
        self.stride, self.padding = stride, padding
        fan_in = c_in * kernel * kernel
        self.weight = params.add(
            f"{name}.weight", he_uniform(rng, (c_out, c_in, kernel, kernel), fan_in)
        )
        self.bias = params.add(f"{name}.bias", np.zeros(c_out))

    def __call__(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d:
    def __init__(self, params, name, c_in, c_out, kernel, stride, padding, output_padding, rng):
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        fan_in = c_in * kernel * kernel
        self.weight = params.add(
            f"{name}.weight", he_uniform(rng, (c_in, c_out, kernel, kernel), fan_in)
        )
        self.bias = params.add(f"{name}.bias", np.zeros(c_out))

    def __call__(self, x):
        return F.conv_transpose2d(
            x, self.weight, self.bias, self.stride, self.padding, self.output_padding
        )


class PReLU:
    def __init__(self, params, name, channels, init=0.25):
        self.slope = params.add(f"{name}.slope", np.full(channels, init))

    def __call__(self, x):
        return F.prelu(x, self.slope)


class BatchNorm:
    """Batch normalisation with running statistics kept in ``buffers``."""

    def __init__(self, params, buffers, name, channels):
        self.gamma = params.add(f"{name}.gamma", np.ones(channels))
        self.beta = params.add(f"{name}.beta", np.zeros(channels))
        self.mean_key = f"{name}.running_mean"
        self.var_key = f"{name}.running_var"
        buffers[self.mean_key] = np.zeros(channels, dtype=DTYPE)
        buffers[self.var_key] = np.ones(channels, dtype=DTYPE)
        self.buffers = buffers

    def __call__(self, x, training):
        return F.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.buffers[self.mean_key],
            self.buffers[self.var_key],
            training,
        )


class ConvBlock:
    """Conv (or transposed conv) followed by batch norm and PReLU."""

    def __init__(self, conv, params, buffers, name, channels):
        self.conv = conv
        self.norm = BatchNorm(params, buffers, f"{name}.bn", channels)
        self.act = PReLU(params, f"{name}.act", channels)

    def __call__(self, x, training):
        return self.act(self.norm(self.conv(x), training))
