"""Hyperspectral cube denoising and kernel-matrix rank analysis."""

from .conv import ConvSpec, KernelSet, conv_backward, conv_forward, flops_estimate
from .dataio import PhantomSpec, generate_phantom, read_hsc, sample_patches, write_hsc
from .extractors import ExtractorBlock, block_param_count, make_extractor
from .kernel_analysis import (
    SCHEMES,
    RankReport,
    UnfoldedKernelMatrix,
    build_kernel_matrix,
    count_params,
    feature_spectrum,
    measure_rank,
    predicted_rank_bound,
)
from .metrics import QualityReport, mpsnr, mssim, quality_report, sam
from .network import (
    DenoisingUNet,
    TrainConfig,
    UNetConfig,
    adam_step,
    load_checkpoint_into,
    model_from_checkpoint,
    save_checkpoint,
    train,
)
from .noise import NoiseSpec, corrupt
from .tensorops import matmul, numerical_rank, svd_singular_values, unfold_input

__version__ = "0.1.0"

__all__ = [
    "ConvSpec",
    "KernelSet",
    "conv_forward",
    "conv_backward",
    "flops_estimate",
    "PhantomSpec",
    "generate_phantom",
    "read_hsc",
    "write_hsc",
    "sample_patches",
    "ExtractorBlock",
    "make_extractor",
    "block_param_count",
    "SCHEMES",
    "RankReport",
    "UnfoldedKernelMatrix",
    "build_kernel_matrix",
    "count_params",
    "feature_spectrum",
    "measure_rank",
    "predicted_rank_bound",
    "QualityReport",
    "mpsnr",
    "mssim",
    "sam",
    "quality_report",
    "DenoisingUNet",
    "UNetConfig",
    "TrainConfig",
    "adam_step",
    "train",
    "save_checkpoint",
    "load_checkpoint_into",
    "model_from_checkpoint",
    "NoiseSpec",
    "corrupt",
    "matmul",
    "unfold_input",
    "svd_singular_values",
    "numerical_rank",
]
