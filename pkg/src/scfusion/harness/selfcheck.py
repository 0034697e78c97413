"""Gradient and invariant checks runnable from the command line."""

from __future__ import annotations

import math

import numpy as np

from .. import backbones as bb
from .. import fusion, ssl
from .. import gradcheck as gc
from .. import tensor as T


def _perturbed_fusion_params(rng, c):
    p = fusion.init_fusion_params(c, rng=rng)
    # move norms and biases off their init values so every path is exercised
    for k in p:
        if k.endswith(("gamma", "beta")) or k.startswith("ffn_b"):
            p[k] = p[k] + rng.normal(0.0, 0.3, p[k].shape)
    return p


def fusion_gradients(seed: int = 0, c: int = 3, h: int = 2, w: int = 2) -> list[gc.GradReport]:
    rng = np.random.default_rng(seed)
    p = _perturbed_fusion_params(rng, c)
    xs, xv, r = (rng.normal(size=(c, h, w)) for _ in range(3))
    grads, gxs, gxv = fusion.fusion_block_backward(p, xs, xv, r)

    def f(params=p, a=xs, b=xv):
        return float((fusion.fusion_block_forward(params, a, b) * r).sum())

    reports = gc.check_params(lambda q: f(params=q), p, grads, prefix="fusion.")
    reports.append(gc.check(gxs, gc.finite_diff(lambda x: f(a=x), xs), name="fusion.xs"))
    reports.append(gc.check(gxv, gc.finite_diff(lambda x: f(b=x), xv), name="fusion.xv"))
    return reports


def tensor_gradients(seed: int = 0) -> list[gc.GradReport]:
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    r = rng.normal(size=(3, 2))
    ga, gb = T.matmul_backward(r, a, b)
    out = [
        gc.check(ga, gc.finite_diff(lambda x: float((T.matmul(x, b) * r).sum()), a), name="matmul.a"),
        gc.check(gb, gc.finite_diff(lambda x: float((T.matmul(a, x) * r).sum()), b), name="matmul.b"),
    ]
    x, rs = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    y = T.softmax(x)
    out.append(gc.check(T.softmax_backward(rs, y), gc.finite_diff(lambda z: float((T.softmax(z) * rs).sum()), x),
                        name="softmax"))
    gamma, beta = rng.normal(size=5), rng.normal(size=5)
    _, cache = T.layernorm(x, gamma, beta)
    gx, gg, gbt = T.layernorm_backward(rs, cache)

    def ln(x_=x, g_=gamma, b_=beta):
        return float((T.layernorm(x_, g_, b_)[0] * rs).sum())

    out.append(gc.check(gx, gc.finite_diff(lambda z: ln(x_=z), x), name="layernorm.x"))
    out.append(gc.check(gg, gc.finite_diff(lambda z: ln(g_=z), gamma), name="layernorm.gamma"))
    out.append(gc.check(gbt, gc.finite_diff(lambda z: ln(b_=z), beta), name="layernorm.beta"))
    out.append(gc.check(T.gelu_backward(rs, x), gc.finite_diff(lambda z: float((T.gelu(z) * rs).sum()), x),
                        name="gelu"))
    out.append(gc.check(T.tanh_backward(rs, np.tanh(x)), gc.finite_diff(lambda z: float((np.tanh(z) * rs).sum()), x),
                        name="tanh"))
    return out


def loss_gradients(seed: int = 0) -> list[gc.GradReport]:
    # Unit-norm embeddings and tau >= 0.2, as in training.  Unbounded logits
    # push some gradient entries below the finite-difference round-off floor.
    rng = np.random.default_rng(seed)
    q = T.l2_normalize(rng.normal(size=6))[0]
    keys = T.l2_normalize(rng.normal(size=(5, 6)))[0]
    tau = rng.uniform(0.2, 1.0)
    _, gq, gk = ssl.info_nce(q, keys, 2, tau)
    out = [
        gc.check(gq, gc.finite_diff(lambda z: ssl.info_nce(z, keys, 2, tau)[0], q), name="contrastive.q"),
        gc.check(gk, gc.finite_diff(lambda z: ssl.info_nce(q, z, 2, tau)[0], keys), name="contrastive.keys"),
    ]
    z1, z2 = T.l2_normalize(rng.normal(size=(4, 6)))[0], T.l2_normalize(rng.normal(size=(4, 6)))[0]
    _, g1, g2 = ssl.batch_info_nce(z1, z2, tau)
    out.append(gc.check(g1, gc.finite_diff(lambda z: ssl.batch_info_nce(z, z2, tau)[0], z1), name="batch_nce.z1"))
    out.append(gc.check(g2, gc.finite_diff(lambda z: ssl.batch_info_nce(z1, z, tau)[0], z2), name="batch_nce.z2"))
    p_rec, p_org = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    mask = np.array([True, False, True, True])
    _, g = ssl.reconstruction_loss(p_rec, p_org, mask)
    out.append(gc.check(g, gc.finite_diff(lambda z: ssl.reconstruction_loss(z, p_org, mask)[0], p_rec),
                        name="reconstruction"))
    return out


def backbone_gradients(seed: int = 0) -> list[gc.GradReport]:
    """Image 8x8, patch 4, C=4, one layer; masked encode -> reconstruct, and windowed embed."""
    rng = np.random.default_rng(seed)
    cfg = bb.EncoderConfig(image_size=8, patch=4, dim=4, num_layers=1, window=0, hidden=16)
    enc, dec = bb.init_encoder(cfg, rng), bb.init_decoder(cfg, rng)
    images = rng.uniform(size=(2, 1, 8, 8))
    mask = np.array([[True, False, True, False], [False, True, True, True]])
    target = bb.patchify(images, cfg.patch)

    def rec_loss(et, dt, im=images):
        feats = bb.encode(bb.EncoderParams(cfg, et), im, mask)
        return ssl.reconstruction_loss(bb.reconstruct(bb.DecoderParams(cfg, dt), feats), target, mask)[0]

    feats, ec = bb.encode_cached(enc, images, mask)
    pixels, dc = bb.reconstruct_cached(dec, feats)
    _, g_pix = ssl.reconstruction_loss(pixels, target, mask)
    gd, g_feats = bb.reconstruct_backward(dec, dc, g_pix)
    ge, _ = bb.encode_backward(enc, ec, g_feats)
    out = gc.check_params(lambda t: rec_loss(t, dec.tensors), enc.tensors, ge, prefix="global.")
    out += gc.check_params(lambda t: rec_loss(enc.tensors, t), dec.tensors, gd, prefix="decoder.")

    wcfg = bb.EncoderConfig(image_size=8, patch=2, dim=4, num_layers=1, window=2, hidden=16)
    wenc = bb.init_encoder(wcfg, rng)
    imgs = rng.uniform(size=(3, 1, 8, 8))
    r = rng.normal(size=(3, 4))
    _, cache = bb.embed_cached(wenc, imgs)
    gw, gi = bb.embed_backward(wenc, cache, r)

    def emb_loss(t=wenc.tensors, im=imgs):
        return float((bb.embed_global(bb.EncoderParams(wcfg, t), im) * r).sum())

    out += gc.check_params(lambda t: emb_loss(t=t), wenc.tensors, gw, prefix="windowed.")
    out.append(gc.check(gi, gc.finite_diff(lambda x: emb_loss(im=x), imgs), name="windowed.image"))
    return out


def gradient_suite(seed: int = 0) -> list[gc.GradReport]:
    return tensor_gradients(seed) + loss_gradients(seed) + fusion_gradients(seed) + backbone_gradients(seed)


def invariant_suite(seed: int = 0) -> list[tuple[str, bool]]:
    """Quick equation-level invariants as ``(name, passed)`` pairs."""
    rng = np.random.default_rng(seed)
    c, h, w = 4, 3, 3
    p = fusion.init_fusion_params(c, rng=rng)
    xs, xv = rng.normal(size=(c, h, w)), rng.normal(size=(c, h, w))
    proj = fusion.project(p, xs, xv)
    a = fusion.channel_attention(proj.q, proj.k)
    ap = fusion.spatial_consistency(proj.qp, proj.kp)
    tied = {**p, "Wp_k": p["Wp_q"]}
    tproj = fusion.project(tied, xs, xs)
    zero_inj = fusion.fuse(
        fusion.channel_attention(tproj.q, tproj.k), fusion.spatial_consistency(tproj.qp, tproj.kp), tproj.v
    )
    x = rng.normal(size=7)
    same = np.tile(rng.normal(size=5), (4, 1))
    return [
        ("attention rows sum to 1", bool(np.all(np.abs(a.sum(axis=-1) - 1) <= 1e-12))),
        ("consistency map in [0, 1)", bool(np.all((ap >= 0) & (ap < 1)))),
        ("zero injection when tied", bool(np.all(zero_inj == 0.0))),
        ("softmax shift invariance", bool(np.max(np.abs(T.softmax(x + 3.7) - T.softmax(x))) <= 1e-12)),
        ("contrastive symmetry = ln K",
         abs(ssl.info_nce(rng.normal(size=5), same, 0, 0.2)[0] - math.log(4)) <= 1e-10),
    ]
