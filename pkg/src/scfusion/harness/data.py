"""Synthetic glyph images standing in for real target / pre-fine-tune data.

* ``TASK_A`` (target task): an axis-aligned filled rectangle (class 0) or
  a plus-shaped cross (class 1) at random position, size and contrast,
  on a noisy background.  Glyph polarity (bright or dark) is random, so
  no linear function of the raw pixels separates the classes well.
* ``TASK_B`` (similar but different): the same glyph family, rotated by a
  random angle.  Used as the matched pre-fine-tune domain.
* ``MISMATCHED``: smooth random Gaussian blobs with no glyph structure.

Every image is ``1 x 16 x 16``; classes are exactly balanced.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError

IMAGE_SIZE = 16
NUM_CLASSES = 2
NOISE_SIGMA = 0.1
HALF_SIZE = (4.0, 6.5)
RECT_ASPECT = (0.75, 1.0)
BAR_HALF_WIDTH = (0.7, 1.1)
CONTRAST = (0.5, 1.0)


class Domain(str, enum.Enum):
    TASK_A = "task_a"
    TASK_B = "task_b"
    MISMATCHED = "mismatched"


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (N, 1, 16, 16)
    labels: np.ndarray  # (N,) int
    domain: Domain
    seed: int

    def __len__(self) -> int:
        return len(self.labels)


def _grid(size: int):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="ij")


def _glyph(rng: np.random.Generator, label: int, angle: float, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    half = rng.uniform(*HALF_SIZE)
    cy, cx = rng.uniform(half + 0.5, size - half - 0.5, size=2)
    cos, sin = np.cos(angle), np.sin(angle)
    u = cos * (xx - cx) + sin * (yy - cy)
    v = -sin * (xx - cx) + cos * (yy - cy)
    if label == 0:
        aspect = rng.uniform(*RECT_ASPECT)
        a, b = (half, half * aspect) if rng.uniform() < 0.5 else (half * aspect, half)
        shape = (np.abs(u) < a) & (np.abs(v) < b)
    else:
        t = rng.uniform(*BAR_HALF_WIDTH)
        shape = ((np.abs(u) < half) & (np.abs(v) < t)) | ((np.abs(u) < t) & (np.abs(v) < half))
    contrast = rng.uniform(*CONTRAST)
    if rng.uniform() < 0.5:
        contrast = -contrast
    return contrast * shape.astype(np.float64)


def _blobs(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    img = np.zeros((size, size))
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, size, size=2)
        s = rng.uniform(1.5, 4.0)
        img += rng.uniform(0.4, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return img


def gen_dataset(domain: Domain | str, size: int, seed: int) -> SyntheticDataset:
    domain = Domain(domain)
    if size < 2 * NUM_CLASSES:
        raise ParameterError(f"dataset size must be at least {2 * NUM_CLASSES}, got {size}")
    rng = np.random.default_rng([seed, list(Domain).index(domain)])
    labels = np.arange(size) % NUM_CLASSES
    rng.shuffle(labels)
    images = np.empty((size, 1, IMAGE_SIZE, IMAGE_SIZE))
    for i, label in enumerate(labels):
        if domain is Domain.MISMATCHED:
            img = _blobs(rng, IMAGE_SIZE)
        else:
            angle = rng.uniform(0.0, np.pi / 2) if domain is Domain.TASK_B else 0.0
            img = _glyph(rng, int(label), angle, IMAGE_SIZE)
        images[i, 0] = img + NOISE_SIGMA * rng.standard_normal((IMAGE_SIZE, IMAGE_SIZE))
    return SyntheticDataset(images, labels.astype(np.int64), domain, seed)
