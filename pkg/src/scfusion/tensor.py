"""Dense float64 primitives with explicit backward rules.

A "tensor" here is a C-contiguous ``numpy.ndarray`` of dtype float64.
Every forward op returns a fresh array; inputs are never written to.
Backward functions take the upstream gradient ``g`` (same shape as the
forward output) plus whatever the forward needed, and return gradients
with the shapes of the corresponding inputs.

Leading batch axes are allowed wherever the math is per-row, so the same
code serves one feature map or a whole mini-batch.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import NumericError, ParameterError, ShapeError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def tensor(data, dims=None) -> np.ndarray:
    """Build a float64 tensor, optionally reshaping flat row-major ``data``."""
    out = np.array(data, dtype=np.float64, copy=True, order="C")
    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if any(d < 1 for d in dims):
            raise ShapeError(f"dims must be positive, got {dims}")
        if out.size != math.prod(dims):
            raise ShapeError(f"{out.size} values cannot fill dims {dims}")
        out = out.reshape(dims)
    return check_finite(out)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.matmul(a, b)
    return check_finite(out, "matmul output")


def matmul_backward(g: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Return ``(g @ b.T, a.T @ g)``, summing over broadcast batch axes."""
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_backward(g: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient through softmax given its output ``y``."""
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Normalize over the last axis. Returns ``(y, cache)``."""
    if eps < 0:
        raise ParameterError("eps must be non-negative")
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layernorm: gamma/beta {gamma.shape}, {beta.shape} vs x {x.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma)


def layernorm_backward(g: np.ndarray, cache):
    """Return ``(grad_x, grad_gamma, grad_beta)``; param grads sum over leading axes."""
    xhat, inv_std, gamma = cache
    lead = tuple(range(g.ndim - 1))
    ggamma = (g * xhat).sum(axis=lead)
    gbeta = g.sum(axis=lead)
    gxhat = g * gamma
    gx = inv_std * (
        gxhat
        - gxhat.mean(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return gx, ggamma, gbeta


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)``."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def tanh_backward(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient through tanh given its output ``y``."""
    return g * (1.0 - y * y)


def l2_normalize(x: np.ndarray, eps: float = 1e-12):
    """Scale rows of ``x`` to unit norm. Returns ``(y, norm)``."""
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(norm, eps), norm


def l2_normalize_backward(g: np.ndarray, y: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return (g - y * (g * y).sum(axis=-1, keepdims=True)) / norm
