"""Random input masks and noisy augmentation.

Every draw uses its own Philox stream keyed by ``(seed, k)``, so mask ``k`` of
a set does not depend on how many masks were drawn before it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc

DEFAULT_P = 0.9


def stream(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class MaskPattern:
    kind: str
    values: np.ndarray
    p: float
    seed: int
    lo: float | None = None
    hi: float | None = None

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class BoostConfig:
    """How to draw the K masks ``{L_k}``: Bernoulli(p) or Uniform[lo, hi] weights."""

    K: int = 8
    kind: str = "bernoulli"
    p: float = DEFAULT_P
    lo: float = 0.8
    hi: float = 1.2
    base_seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.kind not in ("bernoulli", "weights"):
            raise ValueError(f"unknown mask kind {self.kind!r}")

    @property
    def mean(self) -> float:
        return self.p if self.kind == "bernoulli" else 0.5 * (self.lo + self.hi)


def draw_bernoulli_mask(shape, p: float = DEFAULT_P, seed: int = 0, k: int = 0) -> MaskPattern:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    values = (stream(seed, k).random(shape) < p).astype(np.float64)
    return MaskPattern("bernoulli", values, float(p), int(seed))


def draw_weight_mask(shape, lo: float = 0.8, hi: float = 1.2, seed: int = 0, k: int = 0) -> MaskPattern:
    if not lo < hi:
        raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
    values = stream(seed, k).uniform(lo, hi, size=shape)
    return MaskPattern("weights", values, 0.5 * (lo + hi), int(seed), lo, hi)


def draw_masks(cfg: BoostConfig, shape, seed: int | None = None) -> list[MaskPattern]:
    """The K masks of a boost configuration; ``seed`` overrides ``base_seed``."""
    seed = cfg.base_seed if seed is None else seed
    if cfg.kind == "bernoulli":
        return [draw_bernoulli_mask(shape, cfg.p, seed, k) for k in range(cfg.K)]
    return [draw_weight_mask(shape, cfg.lo, cfg.hi, seed, k) for k in range(cfg.K)]


def ones_mask(shape) -> MaskPattern:
    return MaskPattern("bernoulli", np.ones(shape), 1.0, 0)


def apply_mask(x, L: MaskPattern | np.ndarray) -> np.ndarray:
    x = tc.as_tensor(x)
    values = L.values if isinstance(L, MaskPattern) else tc.as_tensor(L)
    tc.check_same_shape(x, values, "apply_mask")
    return x * values


def noise_augment(x, sigma_lo: float = 10 / 255, sigma_hi: float = 40 / 255, seed=None) -> np.ndarray:
    """Add Gaussian noise to a measurement, with one sigma ~ U[lo, hi] per call.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if sigma_lo < 0 or sigma_hi < 0:
        raise ValueError("noise standard deviations must be non-negative")
    if sigma_lo > sigma_hi:
        raise ValueError(f"sigma_lo={sigma_lo} exceeds sigma_hi={sigma_hi}")
    x = tc.as_tensor(x)
    rng = np.random.default_rng(seed)
    sigma = rng.uniform(sigma_lo, sigma_hi) if sigma_hi > sigma_lo else sigma_lo
    if sigma == 0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape)
