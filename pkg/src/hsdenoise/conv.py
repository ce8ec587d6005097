"""Forward and backward 3-D convolution over (C, B, H, W) feature volumes.

Two independent forward routes are provided and must agree:

* ``direct`` — accumulates weighted shifted slices of the padded input,
  one kernel tap at a time (no intermediate patch matrix),
* ``matmul`` — flattens the kernels and multiplies against the unfolded
  input patch matrix.

Kernel shapes are restricted to the axis-aligned factorizations of a single
odd size k: full (k,k,k), spatial (1,k,k), spectral (k,1,1), vertical
(1,k,1), horizontal (1,1,k), and pointwise (1,1,1). Stride is 1; strided
variants used for network downsampling live in the private helpers.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError
from .tensorops import flatten_kernels, matmul, unfold_input


def same_padding(kernel_shape: tuple[int, int, int]) -> tuple[int, int, int]:
    """Zero padding that keeps output dims equal to input dims at stride 1."""
    return tuple((k - 1) // 2 for k in kernel_shape)


def _validate_kernel_shape(kernel_shape: tuple[int, int, int]) -> None:
    ks = tuple(kernel_shape)
    if len(ks) != 3 or any(k < 1 or k % 2 == 0 for k in ks):
        raise ShapeError(f"kernel dims must be positive odd, got {ks}")
    sizes = {k for k in ks if k != 1}
    if len(sizes) > 1:
        raise ShapeError(f"kernel dims must each be 1 or a common k, got {ks}")


@dataclass
class ConvSpec:
    """Static description of one convolution layer."""

    out_channels: int
    in_channels: int
    kernel_shape: tuple[int, int, int]
    padding: tuple[int, int, int] | None = None  # None -> "same"
    bias_enabled: bool = True

    def __post_init__(self):
        _validate_kernel_shape(self.kernel_shape)
        if self.out_channels < 1 or self.in_channels < 1:
            raise ShapeError("channel counts must be positive")
        if self.padding is None:
            self.padding = same_padding(self.kernel_shape)
        self.padding = tuple(self.padding)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels) + tuple(self.kernel_shape)


@dataclass
class KernelSet:
    """Learnable weights of one convolution layer: weights (M,C,kb,kh,kw), optional bias (M,)."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        if self.weights.ndim != 5:
            raise ShapeError(f"weights must be (M,C,kb,kh,kw), got {self.weights.shape}")
        if not np.isfinite(self.weights).all():
            raise NumericError("kernel weights contain non-finite entries")
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.shape != (self.weights.shape[0],):
                raise ShapeError(
                    f"bias shape {self.bias.shape} does not match M={self.weights.shape[0]}"
                )
            if not np.isfinite(self.bias).all():
                raise NumericError("bias contains non-finite entries")


def init_kernels(spec: ConvSpec, rng: np.random.Generator, dtype=np.float64) -> KernelSet:
    """Uniform fan-in initialization: U(-a, a) with a = sqrt(6 / fan_in)."""
    fan_in = spec.in_channels * int(np.prod(spec.kernel_shape))
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=spec.weight_shape).astype(dtype)
    b = np.zeros(spec.out_channels, dtype=dtype) if spec.bias_enabled else None
    return KernelSet(w, b)


def conv_output_dims(
    in_dims: tuple[int, int, int],
    kernel_shape: tuple[int, int, int],
    padding: tuple[int, int, int],
    stride: tuple[int, int, int] = (1, 1, 1),
) -> tuple[int, int, int]:
    out = tuple(
        (d + 2 * p - k) // s + 1
        for d, k, p, s in zip(in_dims, kernel_shape, padding, stride)
    )
    if min(out) < 1:
        raise ShapeError(
            f"kernel {kernel_shape} with padding {padding} does not fit input {in_dims}"
        )
    return out


def _tap_slices(kernel_shape, padding, stride, out_dims):
    """Yield (tap index triple, slice triple into the padded input) pairs."""
    kb, kh, kw = kernel_shape
    sb, sh, sw = stride
    bo, ho, wo = out_dims
    for ib, ih, iw in product(range(kb), range(kh), range(kw)):
        sl = (
            slice(ib, ib + sb * (bo - 1) + 1, sb),
            slice(ih, ih + sh * (ho - 1) + 1, sh),
            slice(iw, iw + sw * (wo - 1) + 1, sw),
        )
        yield (ib, ih, iw), sl


def _pad_volume(x: np.ndarray, padding) -> np.ndarray:
    pb, ph, pw = padding
    if pb == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (pb, pb), (ph, ph), (pw, pw)))


def tap_conv_forward(
    x: np.ndarray,
    weights: np.ndarray,
    padding: tuple[int, int, int],
    stride: tuple[int, int, int] = (1, 1, 1),
) -> np.ndarray:
    """Direct convolution: accumulate one GEMM per kernel tap. x: (C,B,H,W)."""
    m, c = weights.shape[:2]
    kernel_shape = weights.shape[2:]
    out_dims = conv_output_dims(x.shape[1:], kernel_shape, padding, stride)
    xp = _pad_volume(x, padding)
    n = int(np.prod(out_dims))
    y = np.zeros((m, n), dtype=np.result_type(x, weights))
    for (ib, ih, iw), sl in _tap_slices(kernel_shape, padding, stride, out_dims):
        xs = xp[:, sl[0], sl[1], sl[2]].reshape(c, n)
        y += weights[:, :, ib, ih, iw] @ xs
    return y.reshape((m,) + out_dims)


def tap_conv_input_grad(
    grad_out: np.ndarray,
    weights: np.ndarray,
    padding: tuple[int, int, int],
    input_dims: tuple[int, int, int],
    stride: tuple[int, int, int] = (1, 1, 1),
) -> np.ndarray:
    """Gradient of the tap convolution w.r.t. its input volume."""
    m, c = weights.shape[:2]
    kernel_shape = weights.shape[2:]
    out_dims = grad_out.shape[1:]
    pb, ph, pw = padding
    padded_dims = (input_dims[0] + 2 * pb, input_dims[1] + 2 * ph, input_dims[2] + 2 * pw)
    g2 = grad_out.reshape(m, -1)
    gxp = np.zeros((c,) + padded_dims, dtype=grad_out.dtype)
    for (ib, ih, iw), sl in _tap_slices(kernel_shape, padding, stride, out_dims):
        contrib = weights[:, :, ib, ih, iw].T @ g2
        gxp[:, sl[0], sl[1], sl[2]] += contrib.reshape((c,) + tuple(out_dims))
    b, h, w = input_dims
    return np.ascontiguousarray(gxp[:, pb : pb + b, ph : ph + h, pw : pw + w])


def tap_conv_weight_grad(
    grad_out: np.ndarray,
    x: np.ndarray,
    kernel_shape: tuple[int, int, int],
    padding: tuple[int, int, int],
    stride: tuple[int, int, int] = (1, 1, 1),
) -> np.ndarray:
    """Gradient of the tap convolution w.r.t. its weight tensor."""
    m = grad_out.shape[0]
    c = x.shape[0]
    out_dims = grad_out.shape[1:]
    xp = _pad_volume(x, padding)
    g2 = grad_out.reshape(m, -1)
    gw = np.zeros((m, c) + tuple(kernel_shape), dtype=grad_out.dtype)
    n = g2.shape[1]
    for (ib, ih, iw), sl in _tap_slices(kernel_shape, padding, stride, out_dims):
        xs = xp[:, sl[0], sl[1], sl[2]].reshape(c, n)
        gw[:, :, ib, ih, iw] = g2 @ xs.T
    return gw


def conv_forward(
    spec: ConvSpec,
    kernels: KernelSet,
    x: np.ndarray,
    path: str = "direct",
) -> np.ndarray:
    """Convolve a (C, B, H, W) volume; returns (M, B', H', W').

    ``path`` selects the direct tap-loop route or the unfold+matmul route;
    both produce the same values to floating-point accuracy.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"expected (C,B,H,W) input, got {x.shape}")
    if x.shape[0] != spec.in_channels:
        raise ShapeError(
            f"input has {x.shape[0]} channels, spec expects {spec.in_channels}"
        )
    if kernels.weights.shape != spec.weight_shape:
        raise ShapeError(
            f"kernel shape {kernels.weights.shape} does not match spec {spec.weight_shape}"
        )
    if path == "direct":
        y = tap_conv_forward(x, kernels.weights, spec.padding)
    elif path == "matmul":
        cols = unfold_input(x, spec.kernel_shape, spec.padding)
        out_dims = conv_output_dims(x.shape[1:], spec.kernel_shape, spec.padding)
        y = matmul(flatten_kernels(kernels.weights), cols).reshape(
            (spec.out_channels,) + out_dims
        )
    else:
        raise ValueError(f"unknown conv path {path!r}")
    if spec.bias_enabled and kernels.bias is not None:
        y = y + kernels.bias[:, None, None, None]
    return y


def conv_backward(
    spec: ConvSpec,
    kernels: KernelSet,
    x: np.ndarray,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Gradients of sum(grad_out * conv_forward(...)) w.r.t. input, weights, bias."""
    x = np.asarray(x)
    grad_out = np.asarray(grad_out)
    out_dims = conv_output_dims(x.shape[1:], spec.kernel_shape, spec.padding)
    expected = (spec.out_channels,) + out_dims
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {expected}")
    gx = tap_conv_input_grad(grad_out, kernels.weights, spec.padding, x.shape[1:])
    gw = tap_conv_weight_grad(grad_out, x, spec.kernel_shape, spec.padding)
    gb = None
    if spec.bias_enabled and kernels.bias is not None:
        gb = grad_out.sum(axis=(1, 2, 3), dtype=np.float64).astype(grad_out.dtype)
    return gx, gw, gb


def flops_estimate(spec: ConvSpec, output_dims: tuple[int, int, int]) -> int:
    """Multiply-add count of one forward pass, counting a MAC as 2 ops."""
    if min(output_dims) < 1:
        raise ShapeError(f"output dims must be positive, got {output_dims}")
    kb, kh, kw = spec.kernel_shape
    nvox = int(np.prod(output_dims))
    return 2 * spec.in_channels * spec.out_channels * kb * kh * kw * nvox


# ---------------------------------------------------------------------------
# channels-last kernels (B, H, W, C): the training fast path.
#
# A convolution here is a patch-matrix build plus GEMM; per-tap GEMMs lose
# badly because BLAS repacks its K panel on every call. The patch matrix is
# assembled differently per kernel family, driven by what the memory layout
# makes cheap:
#
# * (1,1,kw): the kw*C scalars a patch reads are one contiguous span, so the
#   whole matrix is a single sliding-window copy, then one GEMM;
# * (kb,1,1) / (1,kh,1): per-tap channel-block copies, then one GEMM;
# * kernels extended along W and another axis: the full patch matrix would be
#   kb*kh times the input and copies at strided-access speed, so it is never
#   built. Instead one W-span matrix over the whole padded grid feeds kb*kh
#   sectioned GEMMs whose outputs are row-shifted and summed.
# ---------------------------------------------------------------------------

def _padded(x: np.ndarray, padding) -> np.ndarray:
    if not x.flags.c_contiguous:
        x = np.ascontiguousarray(x)
    pb, ph, pw = padding
    if pb == ph == pw == 0:
        return x
    return np.pad(x, ((pb, pb), (ph, ph), (pw, pw), (0, 0)))


def _wspan_matrix(xp: np.ndarray, kw: int, sw: int, wo: int) -> np.ndarray:
    """(Bp*Hp*wo, kw*C) matrix of contiguous W-spans over the full padded grid."""
    c = xp.shape[-1]
    flat = xp.reshape(xp.shape[0], xp.shape[1], -1)
    win = sliding_window_view(flat, kw * c, axis=2)[:, :, :: sw * c][:, :, :wo]
    return win.reshape(-1, kw * c)  # forces one contiguous copy


def _grid_section(grid4, ib, ih, sb, sh, bo, ho):
    """Rows of a (Bp, Hp, wo, D) grid seen by output voxels at tap (ib, ih)."""
    return grid4[ib : ib + sb * (bo - 1) + 1 : sb, ih : ih + sh * (ho - 1) + 1 : sh]


def unfold_cl(
    x: np.ndarray,
    kernel_shape: tuple[int, int, int],
    padding: tuple[int, int, int],
    stride: tuple[int, int, int] = (1, 1, 1),
) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Patch matrix of a channels-last volume: (voxels, kb*kh*kw*C).

    Columns are ordered tap-major, (ib, ih, iw, c).
    """
    c = x.shape[-1]
    kb, kh, kw = kernel_shape
    sb, sh, sw = stride
    out_dims = conv_output_dims(x.shape[:3], kernel_shape, padding, stride)
    bo, ho, wo = out_dims
    xp = _padded(x, padding)
    n = bo * ho * wo
    if kb == kh == 1:
        win = _wspan_matrix(xp, kw, sw, wo).reshape(xp.shape[0], xp.shape[1], wo, kw * c)
        cols = _grid_section(win, 0, 0, sb, sh, bo, ho).reshape(n, kw * c)
        return np.ascontiguousarray(cols), out_dims
    win = sliding_window_view(xp, kernel_shape, axis=(0, 1, 2))
    if stride != (1, 1, 1):
        win = win[::sb, ::sh, ::sw]
    cols = win.transpose(0, 1, 2, 4, 5, 6, 3).reshape(n, -1)
    return cols, out_dims


def weights_to_cl_matrix(weights: np.ndarray) -> np.ndarray:
    """(M, C, kb, kh, kw) weights as the (kb*kh*kw*C, M) matrix unfold_cl expects."""
    m = weights.shape[0]
    return np.ascontiguousarray(weights.transpose(2, 3, 4, 1, 0).reshape(-1, m))


def _is_sectioned(kernel_shape) -> bool:
    kb, kh, kw = kernel_shape
    return kw > 1 and (kb > 1 or kh > 1)


def conv_forward_cl(
    x: np.ndarray,
    weights: np.ndarray,
    padding: tuple[int, int, int],
    stride: tuple[int, int, int] = (1, 1, 1),
) -> np.ndarray:
    """Convolve a channels-last volume; returns (B', H', W', M)."""
    if x.shape[-1] != weights.shape[1]:
        raise ShapeError(
            f"input has {x.shape[-1]} channels, weights expect {weights.shape[1]}"
        )
    m = weights.shape[0]
    kernel_shape = weights.shape[2:]
    kb, kh, kw = kernel_shape
    sb, sh, sw = stride
    out_dims = conv_output_dims(x.shape[:3], kernel_shape, padding, stride)
    bo, ho, wo = out_dims
    if not _is_sectioned(kernel_shape):
        cols, _ = unfold_cl(x, kernel_shape, padding, stride)
        y = cols @ weights_to_cl_matrix(weights)
        return y.reshape(out_dims + (m,))
    xp = _padded(x, padding)
    span_mat = _wspan_matrix(xp, kw, sw, wo)
    grid = (xp.shape[0], xp.shape[1], wo)
    y = np.zeros(out_dims + (m,), dtype=np.result_type(x, weights))
    # section weights: rows ordered (iw, c) to match the span layout
    wsec = weights.transpose(2, 3, 4, 1, 0)  # (kb, kh, kw, C, M)
    for ib in range(kb):
        for ih in range(kh):
            part = span_mat @ np.ascontiguousarray(wsec[ib, ih].reshape(-1, m))
            y += _grid_section(part.reshape(grid + (m,)), ib, ih, sb, sh, bo, ho)
    return y


def conv_input_grad_cl(
    grad_out: np.ndarray,
    weights: np.ndarray,
    padding: tuple[int, int, int],
    input_dims: tuple[int, int, int],
    stride: tuple[int, int, int] = (1, 1, 1),
) -> np.ndarray:
    """Gradient w.r.t. the channels-last input volume."""
    m, c = weights.shape[:2]
    kernel_shape = weights.shape[2:]
    if stride == (1, 1, 1):
        # full correlation with the tap-flipped kernel, channel roles swapped
        back = np.ascontiguousarray(
            weights.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1]
        )
        back_pad = tuple(k - 1 - p for k, p in zip(kernel_shape, padding))
        gx = conv_forward_cl(grad_out, back, back_pad)
        if gx.shape[:3] != tuple(input_dims):
            raise ShapeError(f"grad dims {gx.shape[:3]} do not match input {input_dims}")
        return gx
    # strided: scatter each tap back onto the padded grid
    pb, ph, pw = padding
    padded = (input_dims[0] + 2 * pb, input_dims[1] + 2 * ph, input_dims[2] + 2 * pw)
    out_dims = grad_out.shape[:3]
    n = int(np.prod(out_dims))
    g2 = grad_out.reshape(n, m)
    gxp = np.zeros(padded + (c,), dtype=grad_out.dtype)
    for (ib, ih, iw), sl in _tap_slices(kernel_shape, padding, stride, out_dims):
        contrib = g2 @ weights[:, :, ib, ih, iw]
        gxp[sl[0], sl[1], sl[2], :] += contrib.reshape(out_dims + (c,))
    b, h, w = input_dims
    return np.ascontiguousarray(gxp[pb : pb + b, ph : ph + h, pw : pw + w, :])


def conv_weight_grad_cl(
    grad_out: np.ndarray,
    x: np.ndarray,
    kernel_shape: tuple[int, int, int],
    padding: tuple[int, int, int],
    stride: tuple[int, int, int] = (1, 1, 1),
) -> np.ndarray:
    """Gradient w.r.t. the (M, C, kb, kh, kw) weight tensor."""
    m = grad_out.shape[-1]
    c = x.shape[-1]
    kb, kh, kw = kernel_shape
    sb, sh, sw = stride
    if not _is_sectioned(kernel_shape):
        cols, out_dims = unfold_cl(x, kernel_shape, padding, stride)
        n = int(np.prod(out_dims))
        gw_mat = cols.T @ grad_out.reshape(n, m)  # (kb*kh*kw*C, M)
        return np.ascontiguousarray(
            gw_mat.reshape(kb, kh, kw, c, m).transpose(4, 3, 0, 1, 2)
        )
    out_dims = conv_output_dims(x.shape[:3], kernel_shape, padding, stride)
    bo, ho, wo = out_dims
    xp = _padded(x, padding)
    span_mat = _wspan_matrix(xp, kw, sw, wo)
    grid = (xp.shape[0], xp.shape[1], wo)
    embedded = np.zeros(grid + (m,), dtype=grad_out.dtype)
    gw = np.empty((m, c) + tuple(kernel_shape), dtype=grad_out.dtype)
    for ib in range(kb):
        for ih in range(kh):
            embedded[...] = 0.0
            _grid_section(embedded, ib, ih, sb, sh, bo, ho)[...] = grad_out
            sec = span_mat.T @ embedded.reshape(-1, m)  # (kw*C, M)
            gw[:, :, ib, ih, :] = sec.reshape(kw, c, m).transpose(2, 1, 0)
    return gw
