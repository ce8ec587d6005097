"""The five feature-extraction blocks as interchangeable trainable units.

Every block maps a channels-last (B, H, W, C) volume to (B, H, W, M) under
"same" padding:

* ``conv3d``    — one full k x k x k convolution,
* ``seq1d``     — chained spectral, vertical, horizontal 1-D convolutions,
* ``seq1d2d``   — a 2-D spatial convolution followed by a spectral 1-D one,
* ``par1d2d``   — 2-D spatial and spectral 1-D branches, compressed 2M -> M,
* ``reconvset`` — spectral, vertical, horizontal 1-D branches, compressed
  3M -> M.

Parallel branches are concatenated in a fixed canonical order (spectral,
vertical, horizontal; spatial before spectral for par1d2d) and the 1x1x1
compression is evaluated branch-by-branch in that same canonical order, so a
block whose branches are stored permuted (with compression columns permuted
to match) computes bit-identical output. Activation is applied once, after
the final convolution or the compression.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Parameter,
    Var,
    compress_channels,
    concat_channels,
    conv3d,
    leaky_relu,
)
from .conv import ConvSpec, flops_estimate, same_padding
from .errors import ConfigError, ShapeError
from .kernel_analysis import (
    PARALLEL_SCHEMES,
    count_biases,
    count_params,
    validate_scheme,
)

CANONICAL_BRANCH_ORDER = {
    "par1d2d": ("spatial2d", "spectral"),
    "reconvset": ("spectral", "vertical", "horizontal"),
}

SEQUENTIAL_ROLES = {
    "conv3d": ("conv3d",),
    "seq1d": ("spectral", "vertical", "horizontal"),
    "seq1d2d": ("spatial2d", "spectral"),
}

ACTIVATION_SLOPES = {"leaky_relu": 0.2, "relu": 0.0}


def role_kernel_shape(role: str, k: int) -> tuple[int, int, int]:
    return {
        "spectral": (k, 1, 1),
        "vertical": (1, k, 1),
        "horizontal": (1, 1, k),
        "spatial2d": (1, k, k),
        "conv3d": (k, k, k),
    }[role]


@dataclass
class ConvLayer:
    """One convolution with its named parameters."""

    role: str
    spec: ConvSpec
    weight: Parameter
    bias: Parameter | None = None

    def forward(self, tape, x: Var) -> Var:
        return conv3d(tape, x, self.weight, self.bias, self.spec.padding)

    def parameters(self) -> list[Parameter]:
        out = [self.weight]
        if self.bias is not None:
            out.append(self.bias)
        return out


@dataclass
class ExtractorBlock:
    scheme: str
    in_channels: int
    out_channels: int
    k: int
    layers: list[ConvLayer]  # sequential order, or parallel branches as stored
    compression: ConvLayer | None = None
    activation: str | None = "leaky_relu"

    def __post_init__(self):
        validate_scheme(self.scheme)
        if self.activation is not None and self.activation not in ACTIVATION_SLOPES:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.scheme in PARALLEL_SCHEMES:
            if self.compression is None:
                raise ConfigError(f"{self.scheme} requires a compression layer")
        elif self.compression is not None:
            raise ConfigError(f"{self.scheme} carries no compression layer")

    def _branch_outputs(self, tape, x: Var) -> dict[str, tuple[Var, tuple[int, int]]]:
        """Branch outputs with each branch's compression-column range."""
        m = self.out_channels
        outs = {}
        for i, layer in enumerate(self.layers):
            outs[layer.role] = (layer.forward(tape, x), (i * m, (i + 1) * m))
        return outs

    def pre_compression(self, tape, x: Var) -> Var:
        """Stacked branch outputs in canonical concat order (parallel schemes)."""
        if self.scheme not in PARALLEL_SCHEMES:
            raise ConfigError(f"{self.scheme} has no pre-compression stack")
        outs = self._branch_outputs(tape, x)
        order = CANONICAL_BRANCH_ORDER[self.scheme]
        return concat_channels(tape, [outs[r][0] for r in order])

    def forward(self, tape, x: Var) -> Var:
        if x.value.shape[-1] != self.in_channels:
            raise ShapeError(
                f"block expects {self.in_channels} channels, got {x.value.shape[-1]}"
            )
        if self.scheme in PARALLEL_SCHEMES:
            outs = self._branch_outputs(tape, x)
            order = CANONICAL_BRANCH_ORDER[self.scheme]
            xs = [outs[r][0] for r in order]
            ranges = [outs[r][1] for r in order]
            y = compress_channels(
                tape, xs, self.compression.weight, ranges, self.compression.bias
            )
        else:
            y = x
            for layer in self.layers:
                y = layer.forward(tape, y)
        if self.activation is not None:
            y = leaky_relu(tape, y, ACTIVATION_SLOPES[self.activation])
        return y

    def parameters(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        if self.compression is not None:
            out.extend(self.compression.parameters())
        return out

    def weight_count(self) -> int:
        n = sum(layer.weight.value.size for layer in self.layers)
        if self.compression is not None:
            n += self.compression.weight.value.size
        return n

    def bias_count(self) -> int:
        n = sum(
            layer.bias.value.size for layer in self.layers if layer.bias is not None
        )
        if self.compression is not None and self.compression.bias is not None:
            n += self.compression.bias.value.size
        return n


def block_param_count(block: ExtractorBlock) -> int:
    """Total trainable scalars: closed-form weight count plus biases."""
    has_comp = block.compression is not None
    n = count_params(
        block.scheme, block.out_channels, block.in_channels, block.k, has_comp
    )
    if block.bias_count() and n != block.weight_count():
        raise AssertionError("closed-form weight count disagrees with stored tensors")
    return n + block.bias_count()


def block_flops(block: ExtractorBlock, dims: tuple[int, int, int]) -> int:
    """Forward multiply-add cost of one block at the given output dims."""
    total = sum(flops_estimate(layer.spec, dims) for layer in block.layers)
    if block.compression is not None:
        total += flops_estimate(block.compression.spec, dims)
    return total


def _init_weight(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def make_extractor(
    scheme: str,
    in_channels: int,
    out_channels: int,
    k: int = 3,
    rng: np.random.Generator | None = None,
    name: str = "block",
    dtype=np.float32,
    activation: str | None = "leaky_relu",
    bias: bool = True,
) -> ExtractorBlock:
    """Construct a block with fan-in uniform weights and zero biases."""
    validate_scheme(scheme)
    rng = rng or np.random.default_rng()
    roles = (
        CANONICAL_BRANCH_ORDER[scheme]
        if scheme in PARALLEL_SCHEMES
        else SEQUENTIAL_ROLES[scheme]
    )
    layers = []
    for i, role in enumerate(roles):
        cin = in_channels if (i == 0 or scheme in PARALLEL_SCHEMES) else out_channels
        ks = role_kernel_shape(role, k)
        spec = ConvSpec(out_channels, cin, ks, bias_enabled=bias)
        w = Parameter(f"{name}.{role}.weight", _init_weight(rng, spec.weight_shape, dtype))
        b = (
            Parameter(f"{name}.{role}.bias", np.zeros(out_channels, dtype=dtype))
            if bias
            else None
        )
        layers.append(ConvLayer(role, spec, w, b))

    compression = None
    if scheme in PARALLEL_SCHEMES:
        stacked = len(roles) * out_channels
        spec = ConvSpec(out_channels, stacked, (1, 1, 1), bias_enabled=bias)
        w = Parameter(
            f"{name}.compress.weight", _init_weight(rng, spec.weight_shape, dtype)
        )
        b = (
            Parameter(f"{name}.compress.bias", np.zeros(out_channels, dtype=dtype))
            if bias
            else None
        )
        compression = ConvLayer("compress", spec, w, b)

    return ExtractorBlock(
        scheme=scheme,
        in_channels=in_channels,
        out_channels=out_channels,
        k=k,
        layers=layers,
        compression=compression,
        activation=activation,
    )
