"""Differentiable operators.  Each returns a Tensor with a hand-derived backward."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_op


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_op(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_op(a.data * b.data, (a, b), back, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (n, k) @ (k, m), got {a.shape} @ {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return make_op(a.data @ b.data, (a, b), back, "matmul")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def back(g):
        grads = (g @ weight.data.T, x.data.T @ g)
        if bias is not None:
            grads += (g.sum(axis=0),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, back, "dense")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return make_op(x.data * mask, (x,), back, "relu")


def total(x: Tensor) -> Tensor:
    def back(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op(np.asarray(x.data.sum()), (x,), back, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def back(g):
        return (np.full(x.shape, g / n, dtype=x.data.dtype),)

    return make_op(np.asarray(x.data.mean()), (x,), back, "mean")


def weighted_sum(terms, weights) -> Tensor:
    """Scalar ``sum_i w_i * t_i`` with fixed float weights."""
    terms = [as_tensor(t) for t in terms]
    weights = [float(w) for w in weights]
    value = 0.0
    for t, w in zip(terms, weights):
        value = value + w * t.data
    value = np.asarray(value, dtype=np.float64)

    def back(g):
        return tuple(g * w * np.ones_like(t.data) for t, w in zip(terms, weights))

    return make_op(value, tuple(terms), back, "weighted_sum")


def _normalize(x: np.ndarray, axes: tuple[int, ...], eps: float):
    mu = x.mean(axis=axes, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return (x - mu) * inv_std, mu, var, inv_std


def _normalize_backward(g_hat, x_hat, inv_std, axes):
    # d/dx of (x - mean) / sqrt(var + eps) over the reduced axes
    g_mean = g_hat.mean(axis=axes, keepdims=True)
    gx_mean = (g_hat * x_hat).mean(axis=axes, keepdims=True)
    return inv_std * (g_hat - g_mean - x_hat * gx_mean)


def _channel_view(param: np.ndarray, ndim: int) -> np.ndarray:
    # (C,) -> broadcastable against (n, C, ...) ; vector mode uses (F,) against (n, F)
    return param.reshape((1, -1) + (1,) * (ndim - 2))


def instance_norm(
    x: Tensor,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    eps: float = 1e-5,
) -> Tensor:
    """Per-sample, per-channel normalization over spatial positions.

    Vector input ``(n, F)`` is normalized over the feature axis of each sample.
    ``gamma``/``beta`` are per-channel (image) or per-feature (vector).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.ndim < 2:
        raise ShapeError(f"instance_norm needs (batch, ...) input, got {x.shape}")
    axes = (1,) if x.ndim == 2 else tuple(range(2, x.ndim))
    if any(x.shape[a] == 0 for a in axes):
        raise ShapeError("instance_norm: zero spatial extent")
    x_hat, _, _, inv_std = _normalize(x.data, axes, eps)
    return _apply_affine(x, x_hat, inv_std, axes, gamma, beta, "instance_norm")


def _apply_affine(x, x_hat, inv_std, axes, gamma, beta, op):
    vector = x.ndim == 2 and axes == (1,)
    if gamma is not None:
        gv = gamma.data.reshape(1, -1) if vector else _channel_view(gamma.data, x.ndim)
        out = x_hat * gv
    else:
        gv = None
        out = x_hat
    if beta is not None:
        out = out + (beta.data.reshape(1, -1) if vector else _channel_view(beta.data, x.ndim))
    param_axes = (0,) if vector else tuple(a for a in range(x.ndim) if a != 1)

    def back(g):
        g_hat = g * gv if gv is not None else g
        grads = [_normalize_backward(g_hat, x_hat, inv_std, axes)]
        if gamma is not None:
            grads.append((g * x_hat).sum(axis=param_axes).reshape(gamma.shape))
        if beta is not None:
            grads.append(g.sum(axis=param_axes).reshape(beta.shape))
        return tuple(grads)

    parents = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)
    return make_op(out, tuple(parents), back, op)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None,
    running_var: np.ndarray | None,
    mode: str = "train",
    eps: float = 1e-5,
):
    """Batch normalization.  Returns ``(out, batch_mean, batch_var)``.

    Train mode uses batch statistics over every axis except channels and hands
    them back so the caller can fold them into running statistics.  Eval mode
    uses the stored statistics and returns ``None`` for both.
    """
    axes = (0,) if x.ndim == 2 else (0,) + tuple(range(2, x.ndim))
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs batch size >= 2")
        x_hat, mu, var, inv_std = _normalize(x.data, axes, eps)
        out = _apply_affine_bn(x, x_hat, inv_std, axes, gamma, beta)
        return out, mu.reshape(-1), var.reshape(-1)
    if mode != "eval":
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    if running_mean is None or running_var is None:
        raise ValueError("batch_norm eval mode: running statistics are uninitialized")
    rm = _channel_view(running_mean, x.ndim)
    inv_std = 1.0 / np.sqrt(_channel_view(running_var, x.ndim) + eps)
    x_hat = (x.data - rm) * inv_std
    gv = _channel_view(gamma.data, x.ndim)
    out = x_hat * gv + _channel_view(beta.data, x.ndim)

    def back(g):
        return (
            g * gv * inv_std,
            (g * x_hat).sum(axis=axes).reshape(gamma.shape),
            g.sum(axis=axes).reshape(beta.shape),
        )

    return make_op(out, (x, gamma, beta), back, "batch_norm_eval"), None, None


def _apply_affine_bn(x, x_hat, inv_std, axes, gamma, beta):
    gv = _channel_view(gamma.data, x.ndim)
    out = x_hat * gv + _channel_view(beta.data, x.ndim)

    def back(g):
        g_hat = g * gv
        return (
            _normalize_backward(g_hat, x_hat, inv_std, axes),
            (g * x_hat).sum(axis=axes).reshape(gamma.shape),
            g.sum(axis=axes).reshape(beta.shape),
        )

    return make_op(out, (x, gamma, beta), back, "batch_norm")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.  ``x``: (n, c_in, h, w); ``weight``: (c_out, c_in, k, k)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match weight {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, _, k, _ = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ShapeError("conv2d: kernel larger than padded input")
    # windows: (n, c_in, oh, ow, k, k)
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c_in * k * k)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, c_out)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gcols = (gmat @ wmat).reshape(n, oh, ow, c_in, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        grads = (gx, gw)
        if bias is not None:
            grads += (gmat.sum(axis=0),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(np.ascontiguousarray(out), parents, back, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, c)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool needs (n, c, h, w), got {x.shape}")
    area = x.shape[2] * x.shape[3]

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),)

    return make_op(x.data.mean(axis=(2, 3)), (x,), back, "global_avg_pool")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def back(g):
        return (g.reshape(x.shape),)

    return make_op(x.data.reshape(shape), (x,), back, "reshape")


def take_rows(x: Tensor, index) -> Tensor:
    """Select rows ``x[index]``; the backward pass scatter-adds."""
    index = np.asarray(index, dtype=np.intp)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return make_op(x.data[index], (x,), back, "take_rows")
