"""Unfolded kernel matrices and rank analysis of the five extraction schemes.

Every scheme that maps C input channels to output features with kernels of
size k can be written as a 2-D matrix acting on the unfolded input patch
matrix. This module builds those matrices:

* ``conv3d``    — dense M x k^3*C rows, one flattened kernel per row,
* ``seq1d``     — composite of three chained 1-D layers, M x k^3*C,
* ``seq1d2d``   — composite of a 2-D spatial layer and a spectral 1-D layer,
* ``par1d2d``   — 2M x k^3*C, the 2-D and spectral blocks stacked,
* ``reconvset`` — 3M x k^3*C, three axis-aligned 1-D blocks stacked, each row
  carrying k*C nonzero slots on the centered axis fibers; the union of
  nonzero columns spans (3k-2)*C columns.

Multiplying the built matrix by the unfolded input reproduces the scheme's
convolution output. For the stacked schemes this holds with "same" padding;
for the sequential composites it holds in valid (unpadded) mode, since zero
padding applied between chained layers is not expressible as a single matrix.

Rank bounds follow from the matrix shapes: M for the single-output-row
schemes, 2M and 3M for the stacked ones. Biases never enter this analysis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import ConvSpec, KernelSet, conv_forward, same_padding
from .errors import EmptySpectrumError, ShapeError
from .tensorops import (
    DEFAULT_RANK_TOL,
    flatten_kernels,
    numerical_rank,
    stable_rank,
    svd_singular_values,
    unfold_input,
)

SCHEMES = ("conv3d", "seq1d", "seq1d2d", "par1d2d", "reconvset")

SEQUENTIAL_SCHEMES = ("seq1d", "seq1d2d")
PARALLEL_SCHEMES = ("par1d2d", "reconvset")


def validate_scheme(scheme: str) -> str:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
    return scheme


def scheme_kernel_shapes(scheme: str, k: int) -> tuple[tuple[int, int, int], ...]:
    """Kernel shapes of a scheme's layers (sequential) or branches (parallel).

    Branch order for the parallel schemes matches the channel-concat order of
    the extractor blocks: spatial before spectral for par1d2d; spectral,
    vertical, horizontal for reconvset.
    """
    validate_scheme(scheme)
    shapes = {
        "conv3d": ((k, k, k),),
        "seq1d": ((k, 1, 1), (1, k, 1), (1, 1, k)),
        "seq1d2d": ((1, k, k), (k, 1, 1)),
        "par1d2d": ((1, k, k), (k, 1, 1)),
        "reconvset": ((k, 1, 1), (1, k, 1), (1, 1, k)),
    }
    return shapes[scheme]


def scheme_layer_channels(scheme: str, M: int, C: int) -> tuple[tuple[int, int], ...]:
    """(in, out) channel counts per layer/branch, pre-compression."""
    validate_scheme(scheme)
    n = len(scheme_kernel_shapes(scheme, 3))
    if scheme in SEQUENTIAL_SCHEMES:
        return tuple((C if i == 0 else M, M) for i in range(n))
    return tuple((C, M) for _ in range(n))


def random_scheme_kernels(
    scheme: str, M: int, C: int, k: int, rng: np.random.Generator, dtype=np.float64
) -> list[KernelSet]:
    """Continuous uniform U(-1,1) weights for every layer/branch, no bias."""
    out = []
    for (cin, cout), ks in zip(
        scheme_layer_channels(scheme, M, C), scheme_kernel_shapes(scheme, k)
    ):
        w = rng.uniform(-1.0, 1.0, size=(cout, cin) + ks).astype(dtype)
        out.append(KernelSet(w, None))
    return out


@dataclass
class UnfoldedKernelMatrix:
    matrix: np.ndarray
    scheme: str
    M: int
    C: int
    k: int


@dataclass
class RankReport:
    scheme: str
    M: int
    C: int
    k: int
    predicted_upper_bound: int
    measured_rank: int
    singular_values: np.ndarray
    stable_rank: float


def embed_kernel(weights: np.ndarray, k: int) -> np.ndarray:
    """Embed an axis-aligned kernel into a centered (M, C, k, k, k) zero cube.

    Axes of size 1 are placed at the center index (k-1)//2, so the embedded
    full-size kernel convolves identically to the low-dimensional one under
    matching "same" padding.
    """
    m, c, kb, kh, kw = weights.shape
    for kd in (kb, kh, kw):
        if kd not in (1, k):
            raise ShapeError(f"kernel dim {kd} is neither 1 nor k={k}")
    out = np.zeros((m, c, k, k, k), dtype=weights.dtype)
    ob, oh, ow = ((k - kd) // 2 for kd in (kb, kh, kw))
    out[:, :, ob : ob + kb, oh : oh + kh, ow : ow + kw] = weights
    return out


def _check_scheme_kernels(scheme, kernels, M, C, k):
    shapes = scheme_kernel_shapes(scheme, k)
    channels = scheme_layer_channels(scheme, M, C)
    if len(kernels) != len(shapes):
        raise ShapeError(
            f"{scheme} expects {len(shapes)} kernel sets, got {len(kernels)}"
        )
    for ks, (cin, cout), kern in zip(shapes, channels, kernels):
        expected = (cout, cin) + ks
        if kern.weights.shape != expected:
            raise ShapeError(
                f"{scheme} kernel shape {kern.weights.shape}, expected {expected}"
            )


def build_kernel_matrix(
    scheme: str,
    kernels: list[KernelSet] | KernelSet,
    M: int,
    C: int,
    k: int,
) -> UnfoldedKernelMatrix:
    """Build the 2-D matrix form of one extraction scheme.

    For the parallel schemes the per-branch blocks are stacked in the order
    the kernel sets are given (the canonical order of
    :func:`scheme_kernel_shapes`); for the sequential schemes the layers are
    composed into a single effective kernel before flattening.
    """
    validate_scheme(scheme)
    if isinstance(kernels, KernelSet):
        kernels = [kernels]
    _check_scheme_kernels(scheme, kernels, M, C, k)

    if scheme == "conv3d":
        mat = flatten_kernels(kernels[0].weights)
    elif scheme == "seq1d":
        w1 = kernels[0].weights[:, :, :, 0, 0]  # spectral (M,C,k)
        w2 = kernels[1].weights[:, :, 0, :, 0]  # vertical (M,M,k)
        w3 = kernels[2].weights[:, :, 0, 0, :]  # horizontal (M,M,k)
        composite = np.einsum("qpw,pmh,mcb->qcbhw", w3, w2, w1)
        mat = flatten_kernels(composite)
    elif scheme == "seq1d2d":
        u1 = kernels[0].weights[:, :, 0, :, :]  # spatial (M,C,k,k)
        u2 = kernels[1].weights[:, :, :, 0, 0]  # spectral (M,M,k)
        composite = np.einsum("qmb,mchw->qcbhw", u2, u1)
        mat = flatten_kernels(composite)
    else:  # par1d2d, reconvset
        blocks = [flatten_kernels(embed_kernel(kern.weights, k)) for kern in kernels]
        mat = np.concatenate(blocks, axis=0)
    return UnfoldedKernelMatrix(mat, scheme, M, C, k)


def predicted_rank_bound(scheme: str, M: int, C: int, k: int) -> int:
    """Upper bound on the rank of the scheme's output feature matrix."""
    validate_scheme(scheme)
    if M < 1 or C < 1 or k < 1:
        raise ValueError("M, C, k must be positive")
    if scheme == "par1d2d":
        return min(2 * M, k**3 * C)
    if scheme == "reconvset":
        return min(3 * M, (3 * k - 2) * C)
    return M


def measure_rank(ukm: UnfoldedKernelMatrix, rel_tol: float = DEFAULT_RANK_TOL) -> RankReport:
    """SVD-based rank report of a built kernel matrix."""
    s = svd_singular_values(ukm.matrix)
    bound = predicted_rank_bound(ukm.scheme, ukm.M, ukm.C, ukm.k)
    measured = numerical_rank(ukm.matrix, rel_tol)
    if measured > bound:
        raise AssertionError(
            f"measured rank {measured} exceeds predicted bound {bound} for {ukm.scheme}"
        )
    return RankReport(
        scheme=ukm.scheme,
        M=ukm.M,
        C=ukm.C,
        k=ukm.k,
        predicted_upper_bound=bound,
        measured_rank=measured,
        singular_values=s,
        stable_rank=stable_rank(s),
    )


def scheme_forward(
    scheme: str,
    kernels: list[KernelSet],
    x: np.ndarray,
    mode: str = "same",
) -> np.ndarray:
    """Pre-compression feature output of one scheme on a (C,B,H,W) volume.

    ``mode="same"`` preserves dims (the trainable-path semantics);
    ``mode="valid"`` applies no padding, which is the regime in which the
    sequential composites match their single-matrix form exactly. Biases are
    ignored: this is the analysis path.
    """
    validate_scheme(scheme)
    if mode not in ("same", "valid"):
        raise ValueError(f"unknown mode {mode!r}")
    k = max(max(kern.weights.shape[2:]) for kern in kernels)

    if scheme in SEQUENTIAL_SCHEMES or scheme == "conv3d":
        h = x
        for kern in kernels:
            ks = kern.weights.shape[2:]
            pad = same_padding(ks) if mode == "same" else (0, 0, 0)
            spec = ConvSpec(
                kern.weights.shape[0], kern.weights.shape[1], ks, pad, bias_enabled=False
            )
            h = conv_forward(spec, KernelSet(kern.weights, None), h)
        return h

    # parallel schemes: in valid mode run each branch through its centered
    # full-size embedding so all branches share output dims
    outs = []
    for kern in kernels:
        if mode == "same":
            ks = kern.weights.shape[2:]
            w = kern.weights
        else:
            ks = (k, k, k)
            w = embed_kernel(kern.weights, k)
        pad = same_padding(ks) if mode == "same" else (0, 0, 0)
        spec = ConvSpec(w.shape[0], w.shape[1], ks, pad, bias_enabled=False)
        outs.append(conv_forward(spec, KernelSet(w, None), x))
    return np.concatenate(outs, axis=0)


def kernel_matrix_apply(ukm: UnfoldedKernelMatrix, x: np.ndarray, mode: str = "same") -> np.ndarray:
    """Apply a built kernel matrix to a volume via the unfold+matmul route."""
    k = ukm.k
    pad = same_padding((k, k, k)) if mode == "same" else (0, 0, 0)
    cols = unfold_input(x, (k, k, k), pad)
    b, h, w = x.shape[1:]
    out_dims = (
        (b + 2 * pad[0] - k + 1, h + 2 * pad[1] - k + 1, w + 2 * pad[2] - k + 1)
        if mode == "valid"
        else (b, h, w)
    )
    return (ukm.matrix @ cols).reshape((ukm.matrix.shape[0],) + out_dims)


def feature_spectrum(
    scheme: str,
    kernels: list[KernelSet],
    x: np.ndarray,
) -> np.ndarray:
    """Normalized singular values of the matricized pre-compression output.

    The output volume is reshaped to (channels, voxels), decomposed, and the
    singular values divided by the largest, so the first entry is 1.0.
    """
    out = scheme_forward(scheme, kernels, x, mode="same")
    mat = out.reshape(out.shape[0], -1)
    if not mat.any():
        raise EmptySpectrumError(f"{scheme} produced an all-zero feature volume")
    s = svd_singular_values(mat)
    return s / s[0]


def decay_index(normalized_sigmas: np.ndarray, threshold: float = 0.01) -> int:
    """Count of normalized singular values at or above the threshold."""
    return int(np.count_nonzero(np.asarray(normalized_sigmas) >= threshold))


def count_params(
    scheme: str, M: int, C: int, k: int, include_compression: bool = True
) -> int:
    """Weight count of one extraction block (biases counted separately)."""
    validate_scheme(scheme)
    if scheme == "conv3d":
        return M * C * k**3
    if scheme == "seq1d":
        return M * C * k + 2 * M * M * k
    if scheme == "seq1d2d":
        return M * C * k**2 + M * M * k
    if scheme == "par1d2d":
        return M * C * k**2 + M * C * k + (2 * M * M if include_compression else 0)
    return 3 * M * C * k + (3 * M * M if include_compression else 0)


def count_biases(scheme: str, M: int, include_compression: bool = True) -> int:
    """Bias count of one extraction block with biases enabled everywhere."""
    validate_scheme(scheme)
    n_layers = len(scheme_kernel_shapes(scheme, 3))
    n = n_layers * M
    if scheme in PARALLEL_SCHEMES and include_compression:
        n += M
    return n
