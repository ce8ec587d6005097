"""Cube quality metrics: band-averaged PSNR and SSIM, and the mean spectral angle.

All metrics assume [0,1]-normalized reference cubes (peak 1.0, equivalently
255 on the 8-bit scale). PSNR is computed per band and averaged; a zero-MSE
band reports the configured cap (default 100 dB). SSIM uses the standard
11x11 Gaussian window (sigma 1.5, K1=0.01, K2=0.03) per band, evaluated only
where the window fully fits. The spectral angle is averaged over pixels,
skipping (and counting) pixels where either spectrum has zero norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ConfigError, NumericError, ShapeError

PSNR_CAP_DB = 100.0


def _check_pair(ref: np.ndarray, test: np.ndarray):
    ref = np.asarray(ref)
    test = np.asarray(test)
    if ref.shape != test.shape:
        raise ShapeError(f"cube shapes differ: {ref.shape} vs {test.shape}")
    if ref.ndim != 3:
        raise ShapeError(f"expected (B,H,W) cubes, got shape {ref.shape}")
    return ref.astype(np.float64), test.astype(np.float64)


def psnr_per_band(
    ref: np.ndarray, test: np.ndarray, peak: float = 1.0, cap: float = PSNR_CAP_DB
) -> np.ndarray:
    ref, test = _check_pair(ref, test)
    mse = np.mean((ref - test) ** 2, axis=(1, 2))
    out = np.full(mse.shape, cap)
    nz = mse > 0
    out[nz] = np.minimum(10.0 * np.log10(peak**2 / mse[nz]), cap)
    return out


def mpsnr(
    ref: np.ndarray, test: np.ndarray, peak: float = 1.0, cap: float = PSNR_CAP_DB
) -> float:
    return float(np.mean(psnr_per_band(ref, test, peak, cap)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _windowed_mean(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    out = correlate1d(img, win, axis=0, mode="constant")
    return correlate1d(out, win, axis=1, mode="constant")


def ssim_band(
    x: np.ndarray,
    y: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    dynamic_range: float = 1.0,
) -> float:
    """SSIM of one band pair over all fully-covered window positions."""
    h, w = x.shape
    if h < window or w < window:
        raise ConfigError(
            f"spatial dims {h}x{w} are smaller than the {window}x{window} SSIM window"
        )
    win = _gaussian_window(window, sigma)
    mu_x = _windowed_mean(x, win)
    mu_y = _windowed_mean(y, win)
    sxx = _windowed_mean(x * x, win) - mu_x * mu_x
    syy = _windowed_mean(y * y, win) - mu_y * mu_y
    sxy = _windowed_mean(x * y, win) - mu_x * mu_y
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    )
    m = window // 2
    return float(np.mean(ssim_map[m : h - m, m : w - m]))


def mssim(
    ref: np.ndarray,
    test: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    dynamic_range: float = 1.0,
) -> float:
    ref, test = _check_pair(ref, test)
    vals = [
        ssim_band(ref[b], test[b], window, sigma, k1, k2, dynamic_range)
        for b in range(ref.shape[0])
    ]
    return float(np.mean(vals))


def sam_detailed(ref: np.ndarray, test: np.ndarray) -> tuple[float, int]:
    """Mean spectral angle in radians plus the count of skipped pixels."""
    ref, test = _check_pair(ref, test)
    b = ref.shape[0]
    r = ref.reshape(b, -1)
    t = test.reshape(b, -1)
    dots = np.sum(r * t, axis=0)
    nr = np.linalg.norm(r, axis=0)
    nt = np.linalg.norm(t, axis=0)
    valid = (nr > 0) & (nt > 0)
    skipped = int(np.count_nonzero(~valid))
    if not valid.any():
        raise NumericError("every pixel has a zero-norm spectrum")
    cos = np.clip(dots[valid] / (nr[valid] * nt[valid]), -1.0, 1.0)
    return float(np.mean(np.arccos(cos))), skipped


def sam(ref: np.ndarray, test: np.ndarray) -> float:
    return sam_detailed(ref, test)[0]


@dataclass
class QualityReport:
    mpsnr: float
    mssim: float
    sam: float
    per_band_psnr: np.ndarray = field(repr=False)
    sam_skipped: int = 0


def quality_report(
    ref: np.ndarray, test: np.ndarray, peak: float = 1.0, cap: float = PSNR_CAP_DB
) -> QualityReport:
    per_band = psnr_per_band(ref, test, peak, cap)
    angle, skipped = sam_detailed(ref, test)
    return QualityReport(
        mpsnr=float(np.mean(per_band)),
        mssim=mssim(ref, test),
        sam=angle,
        per_band_psnr=per_band,
        sam_skipped=skipped,
    )
