"""Batch norm, ReLU, inverted dropout, BCE-with-logits and Adam."""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .rng import rng_for


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), **kw)


def _channel_view(x):
    """Axes reduced per channel and the broadcast shape of a channel vector."""
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 5:
        return (0, 2, 3, 4), (1, -1, 1, 1, 1)
    raise ValueError(f"batchnorm expects [N,C] or [N,C,D,H,W], got shape {x.shape}")


def batchnorm_forward(x, gamma, beta, running_mean, running_var, *, train: bool,
                      momentum: float = 0.1, eps: float = 1e-5, update_stats: bool = True):
    """Normalize per channel; returns ``(y, cache)``.

    Train mode uses biased batch statistics and, when ``update_stats``, folds
    them into the running arrays in place by exponential moving average.
    """
    axes, bshape = _channel_view(x)
    x64 = x.astype(np.float64)
    if train:
        count = x.size // x.shape[1]
        if count < 2:
            raise ValueError("batchnorm in train mode needs at least 2 values per channel")
        mean = x64.mean(axis=axes)
        var = ((x64 - mean.reshape(bshape)) ** 2).mean(axis=axes)
        if update_stats:
            running_mean[...] = (1 - momentum) * running_mean + momentum * mean
            running_var[...] = (1 - momentum) * running_var + momentum * var
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mean.reshape(bshape)) * inv_std.reshape(bshape)
    y = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    cache = (xhat, inv_std, gamma, train, axes, bshape, x.dtype)
    return y.astype(x.dtype), cache


def batchnorm_backward(g, cache, out_dtype=None):
    """Return ``(grad_x, grad_gamma, grad_beta)``; ``grad_x`` in ``out_dtype``.

    The default is the wider of the upstream and input dtypes.
    """
    xhat, inv_std, gamma, train, axes, bshape, dtype = cache
    g64 = g.astype(np.float64)
    dgamma = (g64 * xhat).sum(axis=axes)
    dbeta = g64.sum(axis=axes)
    scale = (gamma.astype(np.float64) * inv_std).reshape(bshape)
    if train:
        m = g.size // g.shape[1]
        dx = scale / m * (m * g64 - dbeta.reshape(bshape) - xhat * dgamma.reshape(bshape))
    else:
        dx = scale * g64
    return dx.astype(out_dtype or np.result_type(g, dtype)), dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)


def batchnorm3d(x, state: BatchNormState, train: bool):
    return batchnorm_forward(x, state.gamma, state.beta, state.running_mean, state.running_var,
                             train=train, momentum=state.momentum, eps=state.eps)


_pattern = threading.local()


@contextmanager
def relu_pattern():
    """Collect the activity mask of every ReLU evaluated inside the block (this thread only)."""
    log: list[np.ndarray] = []
    prev = getattr(_pattern, "log", None)
    _pattern.log = log
    try:
        yield log
    finally:
        _pattern.log = prev


def relu(x):
    log = getattr(_pattern, "log", None)
    if log is not None:
        log.append(np.packbits(x > 0))
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(g, x):
    # subgradient at exactly 0 is 0
    return np.where(x > 0, g, 0).astype(g.dtype, copy=False)


@dataclass(frozen=True)
class DropoutSpec:
    rate: float
    train: bool = True
    stream: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")


def dropout(x, spec: DropoutSpec):
    """Inverted dropout; returns ``(y, scale_mask)`` where ``y = x * scale_mask``."""
    if not spec.train or spec.rate == 0.0:
        return x, None
    keep = rng_for(spec.stream[0], "dropout", *spec.stream[1:]).random(x.shape) >= spec.rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - spec.rate)
    return x * mask, mask


def dropout_backward(g, mask):
    return g if mask is None else g * mask


def bce_with_logits(z, y):
    """Mean binary cross-entropy on logits; returns ``(loss, dloss/dz)``."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape != y.shape or z.ndim != 1:
        raise ValueError(f"bce: logits {z.shape} and labels {y.shape} must be matching vectors")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce: labels must be 0 or 1")
    n = z.size
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(loss.sum() / n), (sigmoid(z) - y) / n


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("Adam lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update of ``params`` in place (moments kept in float64)."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"adam: gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam: non-finite gradient for parameter {name}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        g64 = g.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g64)
            state.v[name] = np.zeros_like(g64)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g64
        v *= state.beta2
        v += (1 - state.beta2) * g64 * g64
        p = params[name]
        p[...] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
