"""Synthetic corruption of clean cubes: Gaussian levels and complex cases.

Sigma values are quoted on the 0-255 scale and applied as sigma/255 to
[0,1]-normalized cubes. Corruption is deterministic given (seed, cube_id)
and never clipped, so the analytic PSNR of a Gaussian-corrupted cube stays
exactly 20*log10(255/sigma).

Complex cases:

* case1 — non-i.i.d. Gaussian, per-band sigma ~ U(10, 70)/255;
* case2 — case1 plus constant additive offsets on 5-15% of the columns of a
  third of the bands (stripes);
* case3 — case1, then 5-15% of the columns of a third of the bands forced to
  exactly zero (deadlines);
* case4 — case1 plus salt-and-pepper impulses (voxels set to exactly 0 or 1)
  at a ratio ~ U(0.1, 0.7) on a third of the bands;
* case5 — every band independently receives the treatment of one of cases
  1-4, chosen uniformly.

The case parameters follow the conventions common to the mixed-noise
denoising literature; all of them are fields on :class:`NoiseSpec` and can
be overridden.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

KINDS = ("gaussian", "blind", "case1", "case2", "case3", "case4", "case5")


@dataclass
class NoiseSpec:
    kind: str
    sigma: float = 50.0
    sigma_range: tuple[float, float] = (30.0, 70.0)
    seed: int = 0
    cube_id: int = 0
    band_fraction: float = 1.0 / 3.0
    band_sigma_range: tuple[float, float] = (10.0, 70.0)
    stripe_col_fraction: tuple[float, float] = (0.05, 0.15)
    stripe_offset_range: tuple[float, float] = (-0.25, 0.25)
    deadline_col_fraction: tuple[float, float] = (0.05, 0.15)
    impulse_ratio_range: tuple[float, float] = (0.1, 0.7)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}, expected one of {KINDS}")


def _pick_bands(rng: np.random.Generator, bands: int, fraction: float) -> np.ndarray:
    count = max(1, round(bands * fraction))
    return np.sort(rng.choice(bands, size=count, replace=False))


def _pick_columns(rng, width, frac_range) -> np.ndarray:
    frac = rng.uniform(*frac_range)
    count = max(1, round(width * frac))
    return np.sort(rng.choice(width, size=count, replace=False))


def _band_gaussian(rng, shape, sigma_range):
    b = shape[0]
    sigmas = rng.uniform(*sigma_range, size=b) / 255.0
    return rng.standard_normal(shape) * sigmas[:, None, None]


def _stripe_band(rng, band, spec):
    cols = _pick_columns(rng, band.shape[1], spec.stripe_col_fraction)
    offsets = rng.uniform(*spec.stripe_offset_range, size=cols.size)
    band[:, cols] += offsets[None, :]


def _deadline_band(rng, band, spec):
    cols = _pick_columns(rng, band.shape[1], spec.deadline_col_fraction)
    band[:, cols] = 0.0


def _impulse_band(rng, band, spec):
    ratio = rng.uniform(*spec.impulse_ratio_range)
    hit = rng.random(band.shape) < ratio
    salt = rng.random(band.shape) < 0.5
    band[hit & salt] = 1.0
    band[hit & ~salt] = 0.0


def corrupt(clean: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Apply the corruption described by ``spec`` to a clean [0,1] cube."""
    clean = np.asarray(clean)
    if clean.ndim != 3:
        raise DomainError(f"expected a (B,H,W) cube, got shape {clean.shape}")
    if clean.min() < 0.0 or clean.max() > 1.0:
        raise DomainError(
            f"clean cube values must lie in [0,1], got "
            f"[{clean.min():.4g}, {clean.max():.4g}]"
        )
    rng = np.random.default_rng((spec.seed, spec.cube_id))
    x = clean.astype(np.float64)
    bands = x.shape[0]

    if spec.kind == "gaussian":
        if spec.sigma > 0:
            x = x + rng.normal(0.0, spec.sigma / 255.0, size=x.shape)
    elif spec.kind == "blind":
        sigma = rng.uniform(*spec.sigma_range)
        x = x + rng.normal(0.0, sigma / 255.0, size=x.shape)
    elif spec.kind == "case1":
        x = x + _band_gaussian(rng, x.shape, spec.band_sigma_range)
    elif spec.kind in ("case2", "case3", "case4"):
        x = x + _band_gaussian(rng, x.shape, spec.band_sigma_range)
        affected = _pick_bands(rng, bands, spec.band_fraction)
        extra = {"case2": _stripe_band, "case3": _deadline_band, "case4": _impulse_band}
        for b in affected:
            extra[spec.kind](rng, x[b], spec)
    else:  # case5
        sigmas = rng.uniform(*spec.band_sigma_range, size=bands) / 255.0
        choices = rng.integers(1, 5, size=bands)
        for b in range(bands):
            x[b] += rng.standard_normal(x.shape[1:]) * sigmas[b]
            if choices[b] == 2:
                _stripe_band(rng, x[b], spec)
            elif choices[b] == 3:
                _deadline_band(rng, x[b], spec)
            elif choices[b] == 4:
                _impulse_band(rng, x[b], spec)
    return x.astype(clean.dtype)


def spec_from_token(token: str, seed: int = 0, cube_id: int = 0) -> NoiseSpec:
    """Build a NoiseSpec from a short CLI token: g30|g50|g70|blind|c1..c5."""
    if token.startswith("g") and token[1:].isdigit():
        return NoiseSpec("gaussian", sigma=float(token[1:]), seed=seed, cube_id=cube_id)
    if token == "blind":
        return NoiseSpec("blind", seed=seed, cube_id=cube_id)
    if token.startswith("c") and token[1:] in "12345" and len(token) == 2:
        return NoiseSpec(f"case{token[1:]}", seed=seed, cube_id=cube_id)
    raise ValueError(f"unknown noise token {token!r} (expected g<sigma>, blind, c1..c5)")
