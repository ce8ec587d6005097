"""Cube file I/O, synthetic phantom generation, and patch sampling.

The ``.hsc`` container is deliberately minimal: magic ``HSC1``, then B, H, W
as little-endian u32, then float32 little-endian samples in band-major order
(band slowest, then rows, then columns), 16 + 4*B*H*W bytes total.

Phantoms stand in for natural hyperspectral captures at desk scale: smooth
low-frequency backgrounds, Gaussian blobs, and piecewise-constant regions,
each modulated by its own smooth spectral signature, so values stay in [0,1]
and adjacent bands remain strongly correlated.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

HSC_MAGIC = b"HSC1"
HSC_HEADER_BYTES = 16


def write_hsc(path: str | Path, cube: np.ndarray) -> int:
    """Write a (B,H,W) cube; returns the number of bytes written."""
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ShapeError(f"expected a (B,H,W) cube, got shape {cube.shape}")
    b, h, w = cube.shape
    payload = HSC_MAGIC + struct.pack("<III", b, h, w)
    payload += np.ascontiguousarray(cube, dtype="<f4").tobytes()
    Path(path).write_bytes(payload)
    return len(payload)


def read_hsc(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HSC_HEADER_BYTES:
        raise FormatError(
            f"truncated header: expected {HSC_HEADER_BYTES} bytes, file has "
            f"{len(raw)} (at byte offset 0)"
        )
    if raw[:4] != HSC_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r} at byte offset 0")
    b, h, w = struct.unpack_from("<III", raw, 4)
    count = b * h * w
    if count == 0 or count > 2**31:
        raise FormatError(
            f"header at byte offset 4 declares unusable dims {b}x{h}x{w}"
        )
    expected = HSC_HEADER_BYTES + 4 * count
    if len(raw) != expected:
        raise FormatError(
            f"expected {expected} bytes for dims {b}x{h}x{w}, file has {len(raw)} "
            f"(data starts at byte offset {HSC_HEADER_BYTES})"
        )
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=HSC_HEADER_BYTES)
    return data.reshape(b, h, w).copy()


@dataclass
class PhantomSpec:
    bands: int = 31
    height: int = 64
    width: int = 64
    blobs: int = 8
    regions: int = 4
    seed: int = 0

    def __post_init__(self):
        if min(self.bands, self.height, self.width) < 8:
            raise ShapeError("phantom dims must each be at least 8")


def _smooth_signature(rng: np.random.Generator, bands: int) -> np.ndarray:
    """A slowly varying positive spectral curve on [0.1, 1]."""
    t = np.linspace(0.0, 1.0, bands)
    center = rng.uniform(0.1, 0.9)
    width = rng.uniform(0.25, 0.6)
    sig = (
        rng.uniform(0.3, 0.8)
        + rng.uniform(-0.4, 0.4) * t
        + rng.uniform(0.2, 0.7) * np.exp(-((t - center) ** 2) / (2 * width**2))
    )
    sig -= sig.min()
    rng_span = sig.max()
    if rng_span > 0:
        sig /= rng_span
    return 0.1 + 0.9 * sig


def _lowfreq_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    field = np.zeros((h, w))
    for _ in range(4):
        u, v = rng.integers(1, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (u * yy + v * xx) + phase)
    field -= field.min()
    if field.max() > 0:
        field /= field.max()
    return field


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Deterministic synthetic cube in [0,1] with smooth spectra."""
    rng = np.random.default_rng(spec.seed)
    b, h, w = spec.bands, spec.height, spec.width
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")

    cube = _smooth_signature(rng, b)[:, None, None] * _lowfreq_field(rng, h, w)[None]

    for _ in range(spec.blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.05, 0.2) * min(h, w)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2))
        cube += 0.6 * _smooth_signature(rng, b)[:, None, None] * blob[None]

    for _ in range(spec.regions):
        y0 = rng.integers(0, h - 4)
        x0 = rng.integers(0, w - 4)
        y1 = rng.integers(y0 + 4, h + 1)
        x1 = rng.integers(x0 + 4, w + 1)
        rect = np.zeros((h, w))
        rect[y0:y1, x0:x1] = 1.0
        cube += 0.3 * _smooth_signature(rng, b)[:, None, None] * rect[None]

    cube -= cube.min()
    peak = cube.max()
    if peak > 0:
        cube /= peak
    # keep strictly inside (0,1): no all-zero spectra, headroom under the peak
    cube = 0.03 + 0.94 * cube
    return cube.astype(np.float32)


def sample_patches(
    cube: np.ndarray,
    patch: tuple[int, int, int],
    count: int,
    seed: int = 0,
) -> list[np.ndarray]:
    """Random spatial crops at full band depth, deterministic per seed."""
    cube = np.asarray(cube)
    b, h, w = cube.shape
    pb, ph, pw = patch
    if pb != b:
        raise ShapeError(
            f"patch band depth {pb} must equal cube band depth {b}: the "
            f"spectral axis is never cropped"
        )
    if ph > h or pw > w:
        raise ShapeError(f"patch {patch} does not fit cube {cube.shape}")
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, h - ph + 1, size=count)
    xs = rng.integers(0, w - pw + 1, size=count)
    return [cube[:, y : y + ph, x : x + pw].copy() for y, x in zip(ys, xs)]
