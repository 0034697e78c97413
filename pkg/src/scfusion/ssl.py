"""Self-supervised objectives: masked-token reconstruction and InfoNCE.

Also holds the data preparation both objectives need: random token
masking and two-view augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError

DEFAULT_MASK_RATIO = 0.75
DEFAULT_TAU = 0.2


@dataclass(frozen=True)
class MaskSpec:
    num_tokens: int
    masked: frozenset
    mask_ratio: float

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.num_tokens, dtype=bool)
        out[sorted(self.masked)] = True
        return out


@dataclass(frozen=True)
class ContrastiveBatch:
    """One query against ``K`` keys; ``k_all[pos_index]`` is the positive."""

    q: np.ndarray
    k_all: np.ndarray  # (K, D)
    pos_index: int
    tau: float = DEFAULT_TAU

    @property
    def k_pos(self) -> np.ndarray:
        return self.k_all[self.pos_index]


def num_masked(num_tokens: int, mask_ratio: float) -> int:
    if not 0.0 < mask_ratio < 1.0:
        raise ParameterError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    if num_tokens < 2:
        raise ParameterError("need at least two tokens to mask")
    n = round(mask_ratio * num_tokens)
    if n == 0 or n == num_tokens:
        raise ParameterError(f"ratio {mask_ratio} masks {n} of {num_tokens} tokens")
    return n


def mask_tokens(num_tokens: int, mask_ratio: float, rng_seed) -> MaskSpec:
    """Uniform random subset of ``round(ratio * num_tokens)`` token indices."""
    n = num_masked(num_tokens, mask_ratio)
    rng = np.random.default_rng(rng_seed)
    idx = rng.choice(num_tokens, size=n, replace=False)
    return MaskSpec(num_tokens, frozenset(int(i) for i in idx), mask_ratio)


def random_masks(batch: int, num_tokens: int, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Independent masks for a mini-batch as a ``(batch, num_tokens)`` bool array."""
    n = num_masked(num_tokens, mask_ratio)
    out = np.zeros((batch, num_tokens), dtype=bool)
    for b in range(batch):
        out[b, rng.choice(num_tokens, size=n, replace=False)] = True
    return out


def _mask_array(mask, shape) -> np.ndarray:
    m = mask.as_bool() if isinstance(mask, MaskSpec) else np.asarray(mask, dtype=bool)
    if m.shape[-1] != shape[-2]:
        raise ShapeError(f"mask covers {m.shape[-1]} tokens, target has {shape[-2]}")
    return m


def reconstruction_loss(p_rec: np.ndarray, p_origin: np.ndarray, mask):
    """Sum of squared pixel errors over masked tokens only.

    ``p_rec`` and ``p_origin`` are ``(..., T, P)``; ``mask`` is a
    :class:`MaskSpec` or a bool array ``(..., T)``.  Returns
    ``(loss, grad_p_rec)``; with a batch axis the loss is summed over it.
    """
    if p_rec.shape != p_origin.shape:
        raise ShapeError(f"p_rec {p_rec.shape} vs p_origin {p_origin.shape}")
    m = _mask_array(mask, p_rec.shape)[..., None]
    diff = np.where(m, p_rec - p_origin, 0.0)
    return float((diff * diff).sum()), 2.0 * diff


def contrastive_loss(batch: ContrastiveBatch):
    """InfoNCE for a single query. Returns ``(loss, grad_q)``.

    The denominator runs over all ``K`` keys, the positive included, so a
    fully symmetric batch scores exactly ``ln K``.
    """
    loss, grad_q, _ = info_nce(batch.q, batch.k_all, batch.pos_index, batch.tau)
    return loss, grad_q


def info_nce(q: np.ndarray, keys: np.ndarray, pos_index: int, tau: float):
    """Returns ``(loss, grad_q, grad_keys)``."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    keys = np.atleast_2d(keys)
    if keys.shape[0] < 2 or keys.shape[1] != q.shape[-1]:
        raise ShapeError(f"need K >= 2 keys of dim {q.shape[-1]}, got {keys.shape}")
    if not 0 <= pos_index < keys.shape[0]:
        raise ParameterError(f"positive index {pos_index} outside {keys.shape[0]} keys")
    logits = T.matmul(keys, q[:, None])[:, 0] / tau
    shift = logits.max()
    log_z = shift + np.log(np.exp(logits - shift).sum())
    loss = float(log_z - logits[pos_index])
    g_logits = T.softmax(logits)
    g_logits[pos_index] -= 1.0
    g_logits /= tau
    return loss, keys.T @ g_logits, np.outer(g_logits, q)


def batch_info_nce(z1: np.ndarray, z2: np.ndarray, tau: float = DEFAULT_TAU):
    """Symmetric in-batch InfoNCE over paired views ``z1[i] <-> z2[i]``.

    Each view of image ``i`` is a query whose keys are the other view of
    every image in the batch, so ``K`` equals the batch size.  The loss is
    the mean of the ``2B`` per-query terms.  Returns ``(loss, g1, g2)``.
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if z1.shape != z2.shape or z1.shape[0] < 2:
        raise ShapeError(f"views must be matching (B>=2, D) arrays, got {z1.shape}, {z2.shape}")
    b = z1.shape[0]
    logits = T.matmul(z1, z2.T) / tau
    idx = np.arange(b)
    p12 = T.softmax(logits, axis=1)
    p21 = T.softmax(logits, axis=0)
    lse12 = np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1)) + logits.max(axis=1)
    lse21 = np.log(np.exp(logits - logits.max(axis=0, keepdims=True)).sum(axis=0)) + logits.max(axis=0)
    diag = logits[idx, idx]
    loss = float(((lse12 - diag).sum() + (lse21 - diag).sum()) / (2 * b))
    g = p12 + p21
    g[idx, idx] -= 2.0
    g /= 2 * b * tau
    return loss, g @ z2, g.T @ z1


def _bilinear_crop(image: np.ndarray, top: float, left: float, size_h: float, size_w: float) -> np.ndarray:
    """Resample the crop window back to the full ``H x W`` grid."""
    c, h, w = image.shape
    ys = top + (np.arange(h) + 0.5) * size_h / h - 0.5
    xs = left + (np.arange(w) + 0.5) * size_w / w - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top_row = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot_row = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top_row * (1 - wy) + bot_row * wy


def augment(
    image: np.ndarray,
    rng: np.random.Generator,
    scale=(0.5, 1.0),
    flip_p: float = 0.5,
    noise: float = 0.05,
) -> np.ndarray:
    """Random crop-and-resize (area fraction in ``scale``), flip, Gaussian noise."""
    c, h, w = image.shape
    area = rng.uniform(*scale)
    side = np.sqrt(area)
    size_h, size_w = side * h, side * w
    top = rng.uniform(0.0, h - size_h)
    left = rng.uniform(0.0, w - size_w)
    out = _bilinear_crop(image, top, left, size_h, size_w)
    if rng.uniform() < flip_p:
        out = out[:, :, ::-1]
    out = out + noise * rng.standard_normal(out.shape)
    return np.ascontiguousarray(out)


def two_view_augment(image: np.ndarray, rng_seed, **kwargs):
    """Two independently augmented views of ``image`` (``C x H x W``, H, W >= 4)."""
    if image.ndim != 3 or image.shape[1] < 4 or image.shape[2] < 4:
        raise ShapeError(f"expected C x H x W with H, W >= 4, got {image.shape}")
    rng = np.random.default_rng(rng_seed)
    return augment(image, rng, **kwargs), augment(image, rng, **kwargs)
