"""Synthetic piecewise-constant / smooth test images in [0, 1]."""

from __future__ import annotations

import numpy as np

from .estimators import Dataset
from .sampling import stream

KINDS = ("blocks", "bumps", "mixed")


def _blocks(rng, h, w):
    img = np.full((h, w), rng.uniform(0.1, 0.5))
    for _ in range(rng.integers(2, 6)):
        bh, bw = rng.integers(h // 8, h // 2 + 1), rng.integers(w // 8, w // 2 + 1)
        r0, c0 = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
        img[r0:r0 + bh, c0:c0 + bw] = rng.uniform(0.0, 1.0)
    return img


def _bumps(rng, h, w):
    rr, cc = np.mgrid[0:h, 0:w]
    img = np.full((h, w), rng.uniform(0.0, 0.3))
    scale = min(h, w)
    for _ in range(rng.integers(2, 6)):
        r, c = rng.uniform(0, h), rng.uniform(0, w)
        width = rng.uniform(scale / 16, scale / 5)
        img += rng.uniform(0.2, 0.7) * np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * width ** 2))
    return img


def synthetic_image(kind: str, size, seed: int, index: int) -> np.ndarray:
    h, w = size
    rng = stream(seed, index)
    if kind == "mixed":
        kind = "blocks" if rng.random() < 0.5 else "bumps"
    if kind == "blocks":
        img = _blocks(rng, h, w)
    elif kind == "bumps":
        img = _bumps(rng, h, w)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    return np.clip(img, 0.0, 1.0)


def gen_synthetic_dataset(kind: str = "mixed", size=(32, 32), count: int = 100, seed: int = 0,
                          sigma: float | None = None, divisor: int = 4) -> Dataset:
    """``count`` single-channel images of shape ``(1, h, w)``.

    With ``sigma`` the inputs are noisy copies of the clean images (noise drawn
    from an independent stream); otherwise inputs equal the clean images.
    """
    h, w = size
    if h % divisor or w % divisor:
        raise ValueError(f"image size {size} must be divisible by {divisor}")
    clean = np.stack([synthetic_image(kind, size, seed, i)[None] for i in range(count)]) \
        if count else np.zeros((0, 1, h, w))
    if sigma is None:
        return Dataset(clean.copy(), clean=clean)
    noise = np.stack([stream(seed, 1 << 20, i).standard_normal((1, h, w)) for i in range(count)]) \
        if count else np.zeros_like(clean)
    return Dataset(clean + sigma * noise, clean=clean)
