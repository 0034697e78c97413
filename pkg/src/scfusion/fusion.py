"""Semantic consistency cross-attention fusion.

Two feature maps of identical shape ``(C, H, W)`` are fused: ``xs`` (the
discriminative, contrastively trained branch) receives information from
``xv`` (the reconstruction-trained branch).

* Channel cross-attention: every channel of a feature map is one token of
  length ``d = H*W``.  ``A[i, j] = softmax_j(<Q_s[i], K_v[j]> / sqrt(d))``
  tells how much of ``xv``'s channel ``j`` flows into channel ``i``.
* Spatial consistency: ``A'[h, w] = tanh(mean_c (Q'_s - K'_v)^2)`` gates
  the injected features per position.
* ``X' = A' * (A @ V_v)``, then the block adds ``xs`` as a residual,
  layer-normalizes over channels and applies a residual FFN with a second
  layer norm.

All functions accept an optional leading batch axis: ``(B, C, H, W)``.
Parameters live in a flat dict; see :func:`init_fusion_params`.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import NamedTuple

import numpy as np

from . import layers
from . import tensor as T
from .errors import ShapeError

PROJECTIONS = ("W_q", "W_k", "W_v", "Wp_q", "Wp_k")
LN_EPS = 1e-5

# Instrumentation: how often each operation ran in this process.
calls: Counter = Counter()


class Projections(NamedTuple):
    q: np.ndarray  # (..., C, d)
    k: np.ndarray  # (..., C, d)
    v: np.ndarray  # (..., C, d)
    qp: np.ndarray  # (..., C, H, W)
    kp: np.ndarray  # (..., C, H, W)


def init_fusion_params(channels: int, hidden: int | None = None, rng=None) -> dict:
    """Weights ~ U(-1/sqrt(C), 1/sqrt(C)); norms at identity; biases zero."""
    rng = np.random.default_rng(rng)
    hidden = 4 * channels if hidden is None else hidden
    p = {name: layers.uniform_weight(rng, (channels, channels), channels) for name in PROJECTIONS}
    for ln in ("norm1", "norm2"):
        p[ln + "_gamma"] = np.ones(channels)
        p[ln + "_beta"] = np.zeros(channels)
    p.update(layers.init_ffn(rng, "", channels, hidden))
    return p


def validate_params(params: dict) -> tuple[int, int]:
    """Check shape consistency; return ``(C, C_ff)``."""
    c = params["W_q"].shape[0]
    c_ff = params["ffn_W1"].shape[1]
    expected = {name: (c, c) for name in PROJECTIONS}
    expected.update(
        norm1_gamma=(c,), norm1_beta=(c,), norm2_gamma=(c,), norm2_beta=(c,),
        ffn_W1=(c, c_ff), ffn_b1=(c_ff,), ffn_W2=(c_ff, c), ffn_b2=(c,),
    )
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f"fusion param {name}: expected {shape}, got {params[name].shape}")
    return c, c_ff


def _mix(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    # 1x1 convolution == channel mixing matrix applied at every position
    return T.matmul(w, x)


def project(params: dict, xs: np.ndarray, xv: np.ndarray) -> Projections:
    if xs.shape != xv.shape or xs.ndim < 3:
        raise ShapeError(f"project: xs {xs.shape} and xv {xv.shape} must match as (..., C, H, W)")
    if params["W_q"].shape[1] != xs.shape[-3]:
        raise ShapeError(f"project: weights are for C={params['W_q'].shape[1]}, got C={xs.shape[-3]}")
    calls["project"] += 1
    *lead, c, h, w = xs.shape
    fs = xs.reshape(*lead, c, h * w)
    fv = xv.reshape(*lead, c, h * w)
    return Projections(
        q=_mix(params["W_q"], fs),
        k=_mix(params["W_k"], fv),
        v=_mix(params["W_v"], fv),
        qp=_mix(params["Wp_q"], fs).reshape(xs.shape),
        kp=_mix(params["Wp_k"], fv).reshape(xs.shape),
    )


def channel_attention(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-stochastic ``(C, C)`` map; row ``i`` is a distribution over key channels."""
    if q.shape != k.shape:
        raise ShapeError(f"channel_attention: {q.shape} vs {k.shape}")
    calls["channel_attention"] += 1
    d = q.shape[-1]
    scores = T.matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(d)
    return T.softmax(scores, axis=-1)


def spatial_consistency(qp: np.ndarray, kp: np.ndarray) -> np.ndarray:
    """``tanh`` of the channel-mean squared difference, shape ``(..., H, W)``."""
    if qp.shape != kp.shape:
        raise ShapeError(f"spatial_consistency: {qp.shape} vs {kp.shape}")
    calls["spatial_consistency"] += 1
    diff = qp - kp
    return np.tanh((diff * diff).mean(axis=-3))


def fuse(a: np.ndarray, ap: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``ap * (a @ v)`` reshaped to ``(..., C, H, W)``."""
    h, w = ap.shape[-2:]
    if v.shape[-1] != h * w or a.shape[-1] != v.shape[-2] or a.shape[-2] != a.shape[-1]:
        raise ShapeError(f"fuse: A {a.shape}, A' {ap.shape}, V {v.shape} are incompatible")
    calls["fuse"] += 1
    m = T.matmul(a, v)
    return m.reshape(*m.shape[:-1], h, w) * ap[..., None, :, :]


def _tokens(x: np.ndarray) -> np.ndarray:
    # (..., C, H, W) -> (..., H*W, C)
    return np.swapaxes(x.reshape(*x.shape[:-2], -1), -1, -2)


def _untokens(t: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(np.swapaxes(t, -1, -2)).reshape(*t.shape[:-2], t.shape[-1], h, w)


def fusion_block(params: dict, xs: np.ndarray, xv: np.ndarray):
    """Forward pass returning ``(Z, cache)``; see :func:`fusion_block_backward`."""
    validate_params(params)
    calls["fusion_block"] += 1
    proj = project(params, xs, xv)
    a = channel_attention(proj.q, proj.k)
    ap = spatial_consistency(proj.qp, proj.kp)
    injected = fuse(a, ap, proj.v)
    h, w = xs.shape[-2:]
    y, ln1_c = T.layernorm(_tokens(xs + injected), params["norm1_gamma"], params["norm1_beta"], LN_EPS)
    f, ffn_c = layers.ffn_forward(params, "", y)
    z, ln2_c = T.layernorm(y + f, params["norm2_gamma"], params["norm2_beta"], LN_EPS)
    out = T.check_finite(_untokens(z, h, w), "fusion block output")
    cache = (xs, xv, proj, a, ap, ln1_c, ffn_c, ln2_c)
    return out, cache


def fusion_block_forward(params: dict, xs: np.ndarray, xv: np.ndarray) -> np.ndarray:
    return fusion_block(params, xs, xv)[0]


def fusion_block_backward(params: dict, xs: np.ndarray, xv: np.ndarray, upstream: np.ndarray, cache=None):
    """Analytic gradients of the block.

    Returns ``(grads, grad_xs, grad_xv)`` where ``grads`` has one entry per
    parameter (summed over any batch axis).  Pass the ``cache`` from
    :func:`fusion_block` to skip recomputing the forward pass.
    """
    if upstream.shape != xs.shape:
        raise ShapeError(f"upstream gradient {upstream.shape} does not match output {xs.shape}")
    if cache is None:
        _, cache = fusion_block(params, xs, xv)
    xs, xv, proj, a, ap, ln1_c, ffn_c, ln2_c = cache
    *lead, c, h, w = xs.shape
    d = h * w
    grads: dict = {}

    gr, grads["norm2_gamma"], grads["norm2_beta"] = T.layernorm_backward(_tokens(upstream), ln2_c)
    gy = gr + layers.ffn_backward(params, "", gr, ffn_c, grads)
    gu, grads["norm1_gamma"], grads["norm1_beta"] = T.layernorm_backward(gy, ln1_c)
    gu = _untokens(gu, h, w).reshape(*lead, c, d)

    # fuse: X' = ap * M with M = A @ V
    m = T.matmul(a, proj.v)
    ap_flat = ap.reshape(*lead, 1, d)
    g_ap = (gu * m).sum(axis=-2)
    gm = gu * ap_flat
    ga, gv = T.matmul_backward(gm, a, proj.v)

    # spatial consistency: ap = tanh(mean_c diff^2)
    diff = (proj.qp - proj.kp).reshape(*lead, c, d)
    g_mean = T.tanh_backward(g_ap, ap.reshape(*lead, d))
    g_diff = g_mean[..., None, :] * diff * (2.0 / c)

    # channel attention: A = softmax(q k^T / sqrt(d))
    gs = T.softmax_backward(ga, a) / math.sqrt(d)
    gq = np.matmul(gs, proj.k)
    gk = np.matmul(np.swapaxes(gs, -1, -2), proj.q)

    fs = xs.reshape(*lead, c, d)
    fv = xv.reshape(*lead, c, d)
    gfs = gu.copy()
    gfv = np.zeros_like(fv)
    for name, gproj, src, gsrc in (
        ("W_q", gq, fs, gfs),
        ("W_k", gk, fv, gfv),
        ("W_v", gv, fv, gfv),
        ("Wp_q", g_diff, fs, gfs),
        ("Wp_k", -g_diff, fv, gfv),
    ):
        gw, gx = T.matmul_backward(gproj, params[name], src)
        grads[name] = gw
        gsrc += gx
    return grads, gfs.reshape(xs.shape), gfv.reshape(xv.shape)
