"""Differentiable primitives used by the encoder, decoder and heads."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cpgm.autodiff.tensor import DTYPE, Tensor, _unbroadcast, as_tensor
from cpgm.errors import DegenerateBatchError, DomainError, ShapeError

SOFTPLUS_CUTOFF = 30.0
BN_MOMENTUM = 0.9
BN_EPS = 1e-8


# -- convolution kernels (plain ndarrays) ------------------------------------

def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_forward(x, w, stride, padding):
    # cross-correlation, no kernel flip
    win = _windows(x, w.shape[2], w.shape[3], stride, padding)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_weight_grad(x, gout, w_shape, stride, padding):
    win = _windows(x, w_shape[2], w_shape[3], stride, padding)
    return np.tensordot(gout, win, axes=([0, 2, 3], [0, 2, 3]))


def _conv_input_grad(gout, w, x_shape, stride, padding):
    """Adjoint of :func:`_conv_forward` with respect to its input."""
    n, c, h, wd = x_shape
    _, _, kh, kw = w.shape
    oh, ow = gout.shape[2], gout.shape[3]
    full = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(gout, w[:, :, i, j], axes=([1], [0]))
            full[:, :, i : i + stride * (oh - 1) + 1 : stride,
                 j : j + stride * (ow - 1) + 1 : stride] += contrib.transpose(0, 3, 1, 2)
    if padding:
        full = full[:, :, padding:-padding, padding:-padding]
    return full


def _check_conv_args(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"expected 4-D input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``weight[F,C,kh,kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_conv_args(x, weight, stride, padding)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    kh, kw = weight.shape[2:]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    xd, wd = x.data, weight.data
    out = _conv_forward(xd, wd, stride, padding)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        grads = [
            _conv_input_grad(g, wd, xd.shape, stride, padding) if x.requires_grad else None,
            _conv_weight_grad(xd, g, wd.shape, stride, padding) if weight.requires_grad else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._from_op(out, tuple(parents), backward)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution; the linear adjoint of :func:`conv2d`.

    ``weight`` has shape ``[C_in, C_out, kh, kw]`` where ``C_in`` matches
    ``x``. The output spatial size is ``(H-1)*stride - 2*padding + kh +
    output_padding``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_conv_args(x, weight, stride, padding)
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weight expects {weight.shape[0]}"
        )
    if output_padding < 0 or (output_padding and output_padding >= stride):
        raise ShapeError("output_padding must be smaller than stride")
    n, _, h, w = x.shape
    kh, kw = weight.shape[2:]
    oh = (h - 1) * stride - 2 * padding + kh + output_padding
    ow = (w - 1) * stride - 2 * padding + kw + output_padding
    if oh < 1 or ow < 1:
        raise ShapeError("transposed convolution produces an empty output")
    out_shape = (n, weight.shape[1], oh, ow)
    xd, wd = x.data, weight.data
    out = _conv_input_grad(xd, wd, out_shape, stride, padding)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        grads = [
            _conv_forward(g, wd, stride, padding) if x.requires_grad else None,
            _conv_weight_grad(g, xd, wd.shape, stride, padding) if weight.requires_grad else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._from_op(out, tuple(parents), backward)


def linear(x, weight, bias=None):
    """``x[N,D_in] @ weight[D_out,D_in].T + bias``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"cannot apply weight {weight.shape} to input {x.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {wd.shape[0]} outputs")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._from_op(out, tuple(parents), backward)


# -- nonlinearities -----------------------------------------------------------

def _softplus_np(a):
    return np.where(a > SOFTPLUS_CUTOFF, a + np.log1p(np.exp(-np.abs(a))),
                    np.log1p(np.exp(np.minimum(a, SOFTPLUS_CUTOFF))))


def _sigmoid_np(a):
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    x = as_tensor(x)
    a = x.data
    return Tensor._from_op(_softplus_np(a), (x,), lambda g: (g * _sigmoid_np(a),))


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid_np(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward)


# stacks of lists that collect min |x| at every PReLU call (see gradcheck.kink_margin)
_kink_watchers = []


def prelu(x, slope):
    """``x`` where non-negative, ``slope * x`` otherwise.

    ``slope`` is per channel (axis 1) or a scalar.
    """
    x, slope = as_tensor(x), as_tensor(slope)
    a = x.data
    if _kink_watchers and a.size:
        _kink_watchers[-1].append(float(np.min(np.abs(a))))
    s = slope.data
    if s.ndim == 1 and a.ndim > 1:
        s = s.reshape((1, -1) + (1,) * (a.ndim - 2))
    pos = a >= 0
    out = np.where(pos, a, s * a)

    def backward(g):
        gs = _unbroadcast(np.where(pos, 0.0, g * a), np.shape(s))
        return np.where(pos, g, g * s), gs.reshape(slope.shape)

    return Tensor._from_op(out, (x, slope), backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalisation over every axis except axis 1.

    In training mode ``running_mean`` / ``running_var`` (ndarrays) are
    updated in place as ``r <- momentum * r + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    a = x.data
    axes = (0,) + tuple(range(2, a.ndim))
    bshape = (1, -1) + (1,) * (a.ndim - 2)
    if training:
        if a.shape[0] < 2:
            raise DegenerateBatchError("batch normalisation in training mode needs batch size >= 2")
        mean = a.mean(axis=axes)
        var = a.var(axis=axes)
        m = a.size // a.shape[1]
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var * m / max(m - 1, 1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (a - mean.reshape(bshape)) * inv_std.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * gd
        if training:
            n = a.size // a.shape[1]
            dx = (inv_std.reshape(bshape) / n) * (
                n * gx
                - gx.sum(axis=axes, keepdims=True)
                - xhat * (gx * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = gx * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)


# -- reshapes -----------------------------------------------------------------

def flatten(x):
    x = as_tensor(x)
    return x.reshape(x.shape[0], -1)


def unflatten(x, shape):
    """Inverse of :func:`flatten`; ``shape`` excludes the batch axis."""
    x = as_tensor(x)
    shape = tuple(shape)
    if len(shape) and shape[0] == x.shape[0] and int(np.prod(shape[1:])) == x.shape[1]:
        shape = shape[1:]
    if int(np.prod(shape)) != x.shape[1]:
        raise ShapeError(f"cannot unflatten {x.shape} into {shape}")
    return x.reshape((x.shape[0],) + shape)


# -- sampling -----------------------------------------------------------------

def reparameterize(mu, var, rng):
    """Draw ``mu + sqrt(var) * eps`` with ``eps ~ N(0, I)`` from ``rng``."""
    mu, var = as_tensor(mu), as_tensor(var)
    if np.any(var.data < 0):
        raise DomainError("variance must be non-negative")
    if mu.shape != var.shape:
        raise ShapeError(f"mean {mu.shape} and variance {var.shape} differ in shape")
    eps = rng.standard_normal(mu.shape)
    std = np.sqrt(var.data)
    safe = np.where(std > 0, std, 1.0)

    def backward(g):
        # d sqrt(v) / dv is undefined at v = 0; treated as zero there
        return g, np.where(std > 0, g * eps * 0.5 / safe, 0.0)

    return Tensor._from_op(mu.data + std * eps, (mu, var), backward)


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=DTYPE)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
