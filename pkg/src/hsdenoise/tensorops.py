"""Dense array primitives: matrix product, receptive-field unfolding, SVD rank.

Arrays are plain numpy ndarrays throughout the library:

* a spectral cube is a ``(B, H, W)`` array (band, height, width),
* a feature volume is a ``(C, B, H, W)`` array (channel first),
* a matrix is a 2-D row-major array.

Analysis paths run in float64; training paths may use float32.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

ANALYSIS_DTYPE = np.float64
TRAINING_DTYPE = np.float32

DEFAULT_RANK_TOL = 1e-8


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of two 2-D matrices, with an explicit shape check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def unfold_input(
    x: np.ndarray,
    kernel_shape: tuple[int, int, int],
    padding: tuple[int, int, int] = (0, 0, 0),
    stride: int = 1,
) -> np.ndarray:
    """Unfold a feature volume into the patch matrix of a sliding-kernel pass.

    Parameters
    ----------
    x : (C, B, H, W) array
    kernel_shape : (kb, kh, kw)
    padding : (pb, ph, pw), zero padding per axis
    stride : fixed at 1

    Returns
    -------
    (kb*kh*kw*C, B'*H'*W') matrix. Column j holds the zero-padded receptive
    field of output position j (positions enumerated with b slowest, w
    fastest). Rows are ordered channel-major: index ((c*kb + ib)*kh + ih)*kw + iw.
    """
    if stride != 1:
        raise ShapeError(f"unfold_input supports stride 1 only, got {stride}")
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"unfold_input expects a (C,B,H,W) volume, got {x.shape}")
    kb, kh, kw = kernel_shape
    pb, ph, pw = padding
    c, b, h, w = x.shape
    out_dims = (b + 2 * pb - kb + 1, h + 2 * ph - kh + 1, w + 2 * pw - kw + 1)
    if min(out_dims) < 1:
        raise ShapeError(
            f"kernel {kernel_shape} does not fit input {x.shape[1:]} "
            f"with padding {padding}"
        )
    xp = np.pad(x, ((0, 0), (pb, pb), (ph, ph), (pw, pw)))
    # windows: (C, B', H', W', kb, kh, kw)
    win = sliding_window_view(xp, kernel_shape, axis=(1, 2, 3))
    cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(
        c * kb * kh * kw, out_dims[0] * out_dims[1] * out_dims[2]
    )
    return np.ascontiguousarray(cols)


def flatten_kernels(weights: np.ndarray) -> np.ndarray:
    """Flatten an (M, C, kb, kh, kw) weight tensor to an M x (C*kb*kh*kw) matrix.

    Row ordering matches the column ordering of :func:`unfold_input`, so
    ``flatten_kernels(w) @ unfold_input(x, ...)`` is the convolution output.
    """
    w = np.asarray(weights)
    if w.ndim != 5:
        raise ShapeError(f"expected (M,C,kb,kh,kw) weights, got {w.shape}")
    return w.reshape(w.shape[0], -1)


def svd_singular_values(m: np.ndarray) -> np.ndarray:
    """Singular values of a matrix, sorted descending, computed in float64."""
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise NumericError("matrix contains non-finite entries")
    s = np.linalg.svd(m.astype(ANALYSIS_DTYPE, copy=False), compute_uv=False)
    return np.sort(s)[::-1]


def numerical_rank(m: np.ndarray, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Count of singular values above ``rel_tol * sigma_max``; 0 for a zero matrix."""
    s = svd_singular_values(m)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tol * s[0]))


def stable_rank(singular_values: np.ndarray) -> float:
    """Tolerance-robust rank proxy: sum(sigma^2) / sigma_max^2."""
    s = np.asarray(singular_values, dtype=ANALYSIS_DTYPE)
    if s.size == 0 or s[0] == 0.0:
        return 0.0
    return float(np.sum(s**2) / s[0] ** 2)
