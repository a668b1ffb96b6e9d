"""PSNR and single-scale SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor_core as tc


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; ``inf`` for identical inputs."""
    a, b = tc.as_tensor(a), tc.as_tensor(b)
    tc.check_same_shape(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def _ssim_2d(a, b, peak, win, k1, k2):
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    wa = sliding_window_view(a, (win, win))
    wb = sliding_window_view(b, (win, win))
    mu_a, mu_b = wa.mean(axis=(-2, -1)), wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak: float = 1.0, win: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all ``win x win`` windows (population moments).

    Accepts 2-D images or ``(channels, h, w)``; channels are averaged.
    """
    a, b = tc.as_tensor(a), tc.as_tensor(b)
    tc.check_same_shape(a, b, "ssim")
    if a.ndim == 2:
        return _ssim_2d(a, b, peak, win, k1, k2)
    if a.ndim == 3:
        return float(np.mean([_ssim_2d(x, y, peak, win, k1, k2) for x, y in zip(a, b)]))
    raise tc.DimensionError(f"ssim needs 2-D or 3-D images, got shape {a.shape}")


@dataclass
class MetricsRecord:
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    def summary(self) -> dict:
        return {"psnr": self.mean_psnr, "ssim": self.mean_ssim, "count": len(self.psnr)}


def evaluate(outputs, references, peak: float = 1.0) -> MetricsRecord:
    rec = MetricsRecord()
    for y, r in zip(outputs, references):
        rec.psnr.append(psnr(y, r, peak))
        rec.ssim.append(ssim(y, r, peak))
    return rec
