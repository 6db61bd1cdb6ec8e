"""PSNR and SSIM with fixed clamping ranges.

PSNR is computed on the full array (2D or 3D) after clamping both inputs to
the configured range; identical inputs report ``inf``. SSIM follows the
standard Gaussian-windowed luminance/contrast/structure product; the 3D
variant averages slice-wise 2D SSIM along the three orthogonal axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

__all__ = ["MetricConfig", "psnr", "ssim2d", "ssim3"]


@dataclass(frozen=True)
class MetricConfig:
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if not self.clamp_hi > self.clamp_lo:
            raise ValueError("clamp range must have hi > lo")
        if self.ssim_window % 2 != 1 or self.ssim_window < 3:
            raise ValueError("ssim_window must be odd and >= 3")


def _clamp_pair(x, ref, cfg):
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    lo, hi = cfg.clamp_lo, cfg.clamp_hi
    return (np.clip(x.astype(np.float64), lo, hi),
            np.clip(ref.astype(np.float64), lo, hi))


def psnr(x: np.ndarray, ref: np.ndarray, cfg: MetricConfig = MetricConfig()) -> float:
    """Peak signal-to-noise ratio in dB over the clamped range; inf when equal."""
    xc, rc = _clamp_pair(np.asarray(x), np.asarray(ref), cfg)
    mse = float(np.mean((xc - rc) ** 2))
    if mse == 0.0:
        return math.inf
    peak = cfg.clamp_hi - cfg.clamp_lo
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = window // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _ssim_2d_clamped(x: np.ndarray, ref: np.ndarray, cfg: MetricConfig) -> float:
    # Inputs already clamped float64; reflective padding at the borders.
    kern = _gaussian_kernel(cfg.ssim_window, cfg.ssim_sigma)

    def smooth(a):
        a = correlate1d(a, kern, axis=0, mode="mirror")
        return correlate1d(a, kern, axis=1, mode="mirror")

    mu_x = smooth(x)
    mu_y = smooth(ref)
    xx = smooth(x * x) - mu_x * mu_x
    yy = smooth(ref * ref) - mu_y * mu_y
    xy = smooth(x * ref) - mu_x * mu_y
    peak = cfg.clamp_hi - cfg.clamp_lo
    c1 = (cfg.k1 * peak) ** 2
    c2 = (cfg.k2 * peak) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def ssim2d(x: np.ndarray, ref: np.ndarray, cfg: MetricConfig = MetricConfig()) -> float:
    """Gaussian-windowed SSIM between two 2D images."""
    x = np.asarray(x)
    ref = np.asarray(ref)
    if x.ndim != 2:
        raise ValueError("ssim2d expects 2D arrays")
    if min(x.shape) < cfg.ssim_window:
        raise ValueError(f"image dims {x.shape} smaller than SSIM window {cfg.ssim_window}")
    xc, rc = _clamp_pair(x, ref, cfg)
    return _ssim_2d_clamped(xc, rc, cfg)


def ssim3(x: np.ndarray, ref: np.ndarray, cfg: MetricConfig = MetricConfig()) -> float:
    """Mean over axial/coronal/sagittal of slice-wise 2D SSIM on a 3D volume."""
    x = np.asarray(x)
    ref = np.asarray(ref)
    if x.ndim != 3:
        raise ValueError("ssim3 expects 3D volumes")
    if min(x.shape) < cfg.ssim_window:
        raise ValueError(f"volume dims {x.shape} smaller than SSIM window {cfg.ssim_window}")
    xc, rc = _clamp_pair(x, ref, cfg)
    axis_means = []
    for ax in range(3):
        xs = np.moveaxis(xc, ax, 0)
        rs = np.moveaxis(rc, ax, 0)
        vals = [_ssim_2d_clamped(xs[i], rs[i], cfg) for i in range(xs.shape[0])]
        axis_means.append(float(np.mean(vals)))
    return float(np.mean(axis_means))
