"""Token-wise building blocks shared by the fusion block and the encoders.

All functions work on token tensors shaped ``(..., T, C)``.  Parameters
come from a flat ``dict`` and are looked up under a name prefix, so a
block can live at ``"layers.0."`` in one model and at ``""`` in another.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T


def ffn_forward(p: dict, prefix: str, y: np.ndarray):
    """``gelu(y @ W1 + b1) @ W2 + b2`` applied per token."""
    h = T.matmul(y, p[prefix + "ffn_W1"]) + p[prefix + "ffn_b1"]
    a = T.gelu(h)
    out = T.matmul(a, p[prefix + "ffn_W2"]) + p[prefix + "ffn_b2"]
    return out, (y, h, a)


def ffn_backward(p: dict, prefix: str, g: np.ndarray, cache, grads: dict) -> np.ndarray:
    y, h, a = cache
    lead = tuple(range(g.ndim - 1))
    ga, grads[prefix + "ffn_W2"] = T.matmul_backward(g, a, p[prefix + "ffn_W2"])
    grads[prefix + "ffn_b2"] = g.sum(axis=lead)
    gh = T.gelu_backward(ga, h)
    gy, grads[prefix + "ffn_W1"] = T.matmul_backward(gh, y, p[prefix + "ffn_W1"])
    grads[prefix + "ffn_b1"] = gh.sum(axis=lead)
    return gy


def attention_forward(p: dict, prefix: str, x: np.ndarray):
    """Single-head scaled dot-product self-attention over the token axis."""
    q = T.matmul(x, p[prefix + "W_Q"])
    k = T.matmul(x, p[prefix + "W_K"])
    v = T.matmul(x, p[prefix + "W_V"])
    scale = 1.0 / math.sqrt(x.shape[-1])
    s = T.matmul(q, np.swapaxes(k, -1, -2)) * scale
    attn = T.softmax(s, axis=-1)
    o = T.matmul(attn, v)
    out = T.matmul(o, p[prefix + "W_O"])
    return out, (x, q, k, v, attn, o, scale)


def attention_backward(p: dict, prefix: str, g: np.ndarray, cache, grads: dict) -> np.ndarray:
    x, q, k, v, attn, o, scale = cache
    go, grads[prefix + "W_O"] = T.matmul_backward(g, o, p[prefix + "W_O"])
    gattn, gv = T.matmul_backward(go, attn, v)
    gs = T.softmax_backward(gattn, attn) * scale
    gq = np.matmul(gs, k)
    gk = np.matmul(np.swapaxes(gs, -1, -2), q)
    gx = np.zeros_like(x)
    for name, gproj in (("W_Q", gq), ("W_K", gk), ("W_V", gv)):
        gxi, grads[prefix + name] = T.matmul_backward(gproj, x, p[prefix + name])
        gx += gxi
    return gx


def block_forward(p: dict, prefix: str, x: np.ndarray, eps: float = 1e-5):
    """Post-norm transformer block: ``LN2(y + FFN(y))`` with ``y = LN1(x + Attn(x))``."""
    att, att_c = attention_forward(p, prefix, x)
    y, ln1_c = T.layernorm(x + att, p[prefix + "ln1_gamma"], p[prefix + "ln1_beta"], eps)
    f, ffn_c = ffn_forward(p, prefix, y)
    z, ln2_c = T.layernorm(y + f, p[prefix + "ln2_gamma"], p[prefix + "ln2_beta"], eps)
    return z, (att_c, ln1_c, ffn_c, ln2_c)


def block_backward(p: dict, prefix: str, g: np.ndarray, cache, grads: dict) -> np.ndarray:
    att_c, ln1_c, ffn_c, ln2_c = cache
    gr, grads[prefix + "ln2_gamma"], grads[prefix + "ln2_beta"] = T.layernorm_backward(g, ln2_c)
    gy = gr + ffn_backward(p, prefix, gr, ffn_c, grads)
    gu, grads[prefix + "ln1_gamma"], grads[prefix + "ln1_beta"] = T.layernorm_backward(gy, ln1_c)
    return gu + attention_backward(p, prefix, gu, att_c, grads)


def init_block(rng: np.random.Generator, prefix: str, dim: int, hidden: int) -> dict:
    p = {}
    for name in ("W_Q", "W_K", "W_V", "W_O"):
        p[prefix + name] = uniform_weight(rng, (dim, dim), dim)
    p.update(init_ffn(rng, prefix, dim, hidden))
    for ln in ("ln1", "ln2"):
        p[prefix + ln + "_gamma"] = np.ones(dim)
        p[prefix + ln + "_beta"] = np.zeros(dim)
    return p


def init_ffn(rng: np.random.Generator, prefix: str, dim: int, hidden: int) -> dict:
    return {
        prefix + "ffn_W1": uniform_weight(rng, (dim, hidden), dim),
        prefix + "ffn_b1": np.zeros(hidden),
        prefix + "ffn_W2": uniform_weight(rng, (hidden, dim), dim),
        prefix + "ffn_b2": np.zeros(dim),
    }


def uniform_weight(rng: np.random.Generator, shape, dim: int) -> np.ndarray:
    """Uniform(-1/sqrt(dim), 1/sqrt(dim)) with ``dim`` the model width."""
    bound = 1.0 / math.sqrt(dim)
    return rng.uniform(-bound, bound, size=shape)
