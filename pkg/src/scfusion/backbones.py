"""Tiny patch-token transformer encoders.

Two flavours share one implementation:

* global attention (``window == 0``): every token attends to every other
  token; supports masked-token input and pairs with a small decoder for
  pixel reconstruction;
* windowed attention (``window > 0``): tokens attend only within
  non-overlapping ``window x window`` squares of the token grid.

Windowing is realised by permuting tokens into window-major order once,
running every layer on groups of ``window**2`` tokens, and undoing the
permutation at the end.  LayerNorm and the FFN act per token, so the
grouping is invisible to them.

Images are ``(B, C_in, H, W)`` (a single ``(C_in, H, W)`` image is also
accepted); feature maps come out as ``(B, C, H/patch, W/patch)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from . import tensor as T
from .errors import ParameterError, ShapeError
from .ssl import MaskSpec

LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 16
    in_channels: int = 1
    patch: int = 4
    dim: int = 8
    num_layers: int = 2
    window: int = 0
    hidden: int = 32

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ShapeError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.window and self.grid % self.window:
            raise ShapeError(f"window {self.window} does not tile a {self.grid}x{self.grid} token grid")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.in_channels

    @property
    def is_global(self) -> bool:
        return self.window == 0 or self.window == self.grid


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict


@dataclass
class DecoderParams:
    config: EncoderConfig
    tensors: dict


def init_encoder(config: EncoderConfig, rng=None, mask_token: bool | None = None) -> EncoderParams:
    """``mask_token`` defaults to True for global-attention encoders."""
    rng = np.random.default_rng(rng)
    c = config.dim
    p = {
        "patch_embed": layers.uniform_weight(rng, (config.patch_dim, c), c),
        "pos_embed": layers.uniform_weight(rng, (config.num_tokens, c), c),
    }
    if mask_token if mask_token is not None else config.window == 0:
        p["mask_token"] = layers.uniform_weight(rng, (c,), c)
    for i in range(config.num_layers):
        p.update(layers.init_block(rng, f"layers.{i}.", c, config.hidden))
    return EncoderParams(config, p)


def init_decoder(config: EncoderConfig, rng=None) -> DecoderParams:
    rng = np.random.default_rng(rng)
    c = config.dim
    p = layers.init_block(rng, "layers.0.", c, config.hidden)
    p["head_W"] = layers.uniform_weight(rng, (c, config.patch_dim), c)
    p["head_b"] = np.zeros(config.patch_dim)
    return DecoderParams(config, p)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, C, H, W) -> (B, T, patch*patch*C)``, tokens in row-major grid order."""
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 3, 5, 1).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens: np.ndarray, patch: int, channels: int, size: int) -> np.ndarray:
    b = tokens.shape[0]
    g = size // patch
    x = tokens.reshape(b, g, g, patch, patch, channels)
    return x.transpose(0, 5, 1, 3, 2, 4).reshape(b, channels, size, size)


def window_order(grid: int, window: int) -> np.ndarray:
    """Token indices sorted window-major; identity for global attention."""
    if window == 0 or window == grid:
        return np.arange(grid * grid)
    idx = np.arange(grid * grid).reshape(grid // window, window, grid // window, window)
    return idx.transpose(0, 2, 1, 3).reshape(-1)


def _as_batch(images: np.ndarray, config: EncoderConfig):
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != (config.in_channels, config.image_size, config.image_size):
        raise ShapeError(
            f"expected images (B, {config.in_channels}, {config.image_size}, {config.image_size}), "
            f"got {images.shape}"
        )
    return images, single


def _mask_rows(mask, batch: int, num_tokens: int) -> np.ndarray:
    m = mask.as_bool() if isinstance(mask, MaskSpec) else np.asarray(mask, dtype=bool)
    if m.shape[-1] != num_tokens:
        raise ShapeError(f"mask covers {m.shape[-1]} tokens, encoder has {num_tokens}")
    return np.broadcast_to(m, (batch, num_tokens))


def encode_cached(params: EncoderParams, images: np.ndarray, mask=None):
    """Forward pass returning ``(features, cache)``."""
    cfg, p = params.config, params.tensors
    images, single = _as_batch(images, cfg)
    b = images.shape[0]
    patches = patchify(images, cfg.patch)
    x = T.matmul(patches, p["patch_embed"]) + p["pos_embed"]
    m = None
    if mask is not None:
        if not cfg.window == 0 or "mask_token" not in p:
            raise ParameterError("masking is only supported by the global-attention encoder")
        m = _mask_rows(mask, b, cfg.num_tokens)
        x = np.where(m[..., None], p["mask_token"] + p["pos_embed"], x)

    order = window_order(cfg.grid, cfg.window)
    group = cfg.window**2 if cfg.window else cfg.num_tokens
    h = x[:, order].reshape(b, cfg.num_tokens // group, group, cfg.dim)
    block_caches = []
    for i in range(cfg.num_layers):
        h, bc = layers.block_forward(p, f"layers.{i}.", h, LN_EPS)
        block_caches.append(bc)
    tokens = np.empty((b, cfg.num_tokens, cfg.dim))
    tokens[:, order] = h.reshape(b, cfg.num_tokens, cfg.dim)
    feats = tokens.transpose(0, 2, 1).reshape(b, cfg.dim, cfg.grid, cfg.grid)
    feats = T.check_finite(np.ascontiguousarray(feats), "encoder output")
    cache = (patches, m, order, group, block_caches, single)
    return (feats[0] if single else feats), cache


def encode(params: EncoderParams, images: np.ndarray, mask=None) -> np.ndarray:
    return encode_cached(params, images, mask)[0]


def encode_backward(params: EncoderParams, cache, g_feats: np.ndarray):
    """Returns ``(grads, grad_images)``."""
    cfg, p = params.config, params.tensors
    patches, m, order, group, block_caches, single = cache
    if single:
        g_feats = g_feats[None]
    b = patches.shape[0]
    grads: dict = {}
    g_tok = g_feats.reshape(b, cfg.dim, cfg.num_tokens).transpose(0, 2, 1)
    g = g_tok[:, order].reshape(b, cfg.num_tokens // group, group, cfg.dim)
    for i in reversed(range(cfg.num_layers)):
        g = layers.block_backward(p, f"layers.{i}.", g, block_caches[i], grads)
    gx = np.empty((b, cfg.num_tokens, cfg.dim))
    gx[:, order] = g.reshape(b, cfg.num_tokens, cfg.dim)

    grads["pos_embed"] = gx.sum(axis=0)
    if m is not None:
        m3 = m[..., None]
        grads["mask_token"] = np.where(m3, gx, 0.0).sum(axis=(0, 1))
        gx = np.where(m3, 0.0, gx)
    elif "mask_token" in p:
        grads["mask_token"] = np.zeros_like(p["mask_token"])
    g_patches, grads["patch_embed"] = T.matmul_backward(gx, patches, p["patch_embed"])
    g_images = unpatchify(g_patches, cfg.patch, cfg.in_channels, cfg.image_size)
    return grads, (g_images[0] if single else g_images)


def features_to_tokens(feats: np.ndarray) -> np.ndarray:
    b, c = feats.shape[:2]
    return feats.reshape(b, c, -1).transpose(0, 2, 1)


def reconstruct_cached(dec: DecoderParams, feats: np.ndarray):
    cfg, p = dec.config, dec.tensors
    single = feats.ndim == 3
    if single:
        feats = feats[None]
    if feats.shape[1:] != (cfg.dim, cfg.grid, cfg.grid):
        raise ShapeError(f"decoder expects features (B, {cfg.dim}, {cfg.grid}, {cfg.grid}), got {feats.shape}")
    tokens = features_to_tokens(feats)
    h, bc = layers.block_forward(p, "layers.0.", tokens, LN_EPS)
    pixels = T.matmul(h, p["head_W"]) + p["head_b"]
    return (pixels[0] if single else pixels), (h, bc, single)


def reconstruct(dec: DecoderParams, feats: np.ndarray) -> np.ndarray:
    """Per-token pixel predictions ``(B, T, patch*patch*C_in)``."""
    return reconstruct_cached(dec, feats)[0]


def reconstruct_backward(dec: DecoderParams, cache, g_pixels: np.ndarray):
    """Returns ``(grads, grad_features)``."""
    cfg, p = dec.config, dec.tensors
    h, bc, single = cache
    if single:
        g_pixels = g_pixels[None]
    grads: dict = {}
    gh, grads["head_W"] = T.matmul_backward(g_pixels, h, p["head_W"])
    grads["head_b"] = g_pixels.sum(axis=(0, 1))
    g_tok = layers.block_backward(p, "layers.0.", gh, bc, grads)
    b = g_tok.shape[0]
    g_feats = g_tok.transpose(0, 2, 1).reshape(b, cfg.dim, cfg.grid, cfg.grid)
    return grads, (g_feats[0] if single else g_feats)


def mean_pool(feats: np.ndarray) -> np.ndarray:
    """``(..., C, H, W) -> (..., C)``."""
    return feats.mean(axis=(-2, -1))


def mean_pool_backward(g: np.ndarray, shape) -> np.ndarray:
    h, w = shape[-2:]
    return np.broadcast_to(g[..., None, None] / (h * w), shape).copy()


def embed_cached(params: EncoderParams, images: np.ndarray):
    feats, enc_cache = encode_cached(params, images)
    pooled = mean_pool(feats)
    z, norm = T.l2_normalize(pooled)
    return z, (feats.shape, enc_cache, z, norm)


def embed_global(params: EncoderParams, images: np.ndarray) -> np.ndarray:
    """Unit-norm image embedding: encode, mean-pool over positions, L2-normalize."""
    return embed_cached(params, images)[0]


def embed_backward(params: EncoderParams, cache, g_z: np.ndarray):
    shape, enc_cache, z, norm = cache
    g_pooled = T.l2_normalize_backward(g_z, z, norm)
    return encode_backward(params, enc_cache, mean_pool_backward(g_pooled, shape))
