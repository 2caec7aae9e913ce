"""Image-quality metrics for held-out view evaluation.

PSNR and single-scale SSIM (11x11 Gaussian window, sigma 1.5, the standard
C1/C2 stabilizers) over sRGB-encoded images. Renders are linear radiance, so
callers tone map first; evaluate_views applies scene.tonemap to both sides.
Identical images give infinite PSNR, serialized as the string "inf" since
JSON has no infinity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import ConfigError
from .scene import tonemap

_WINDOW = 11
_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


def _as_image(arr) -> np.ndarray:
    return np.ascontiguousarray(getattr(arr, "data", arr), dtype=np.float64)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ConfigError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) over all pixel-channels; inf for equal images."""
    a = _as_image(a)
    b = _as_image(b)
    _check_pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window() -> np.ndarray:
    half = (_WINDOW - 1) / 2.0
    x = np.arange(_WINDOW) - half
    g = np.exp(-(x * x) / (2.0 * _SIGMA * _SIGMA))
    k = np.outer(g, g)
    return k / k.sum()


_KERNEL = _gaussian_window()


def ssim(a, b) -> float:
    """Mean SSIM over fully interior windows, per channel, then averaged.

    Inputs are display-space images in [0, 1]; grayscale (h, w) and
    multichannel (h, w, c) shapes are accepted.
    """
    a = _as_image(a)
    b = _as_image(b)
    _check_pair(a, b)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim != 3:
        raise ConfigError(f"expected (h, w) or (h, w, c) images, got {a.shape}")
    h, w = a.shape[:2]
    if h < _WINDOW or w < _WINDOW:
        raise ConfigError(
            f"image {h}x{w} is smaller than the {_WINDOW}x{_WINDOW} SSIM window"
        )

    total = 0.0
    for ch in range(a.shape[2]):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mu_x = convolve2d(x, _KERNEL, mode="valid")
        mu_y = convolve2d(y, _KERNEL, mode="valid")
        var_x = convolve2d(x * x, _KERNEL, mode="valid") - mu_x * mu_x
        var_y = convolve2d(y * y, _KERNEL, mode="valid") - mu_y * mu_y
        cov = convolve2d(x * y, _KERNEL, mode="valid") - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + _C1) * (2.0 * cov + _C2)
        den = (mu_x * mu_x + mu_y * mu_y + _C1) * (var_x + var_y + _C2)
        total += float((num / den).mean())
    return total / a.shape[2]


@dataclass
class MetricReport:
    """Per-view metrics plus aggregates, JSON-serializable via to_dict."""

    psnr_views: list[float]
    ssim_views: list[float]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_views))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_views))

    def to_dict(self) -> dict:
        def enc(v: float):
            return "inf" if math.isinf(v) else float(v)

        return {
            "views": [
                {"psnr": enc(p), "ssim": float(s)}
                for p, s in zip(self.psnr_views, self.ssim_views)
            ],
            "mean_psnr": enc(self.mean_psnr),
            "mean_ssim": float(self.mean_ssim),
        }


def evaluate_views(pred_linear, gt_linear) -> MetricReport:
    """Tone map linear render/reference pairs and collect PSNR/SSIM."""
    if len(pred_linear) != len(gt_linear):
        raise ConfigError(
            f"got {len(pred_linear)} predictions for {len(gt_linear)} references"
        )
    if not pred_linear:
        raise ConfigError("metric evaluation needs at least one view")
    ps, ss = [], []
    for p, g in zip(pred_linear, gt_linear):
        pt = tonemap(_as_image(p))
        gt = tonemap(_as_image(g))
        ps.append(psnr(pt, gt))
        ss.append(ssim(pt, gt))
    return MetricReport(ps, ss)
