"""Pixel-wise gradient norm uncertainty scores for convolutional segmentation heads."""

from pgnseg.tensor import DimensionError, NpyFormatError, conv2d, read_npy, unfold, write_npy
from pgnseg.toynet import ForwardTrace, SegHeadParams, forward, gen_synthetic, softmax
from pgnseg.gradnorm import (
    GradientScoreMap,
    baseline_maps,
    last_layer_grad_factors,
    penult_layer_grad_factors,
    pgn_heatmap,
    pnorm_factored,
)

__all__ = [
    "DimensionError",
    "NpyFormatError",
    "conv2d",
    "unfold",
    "read_npy",
    "write_npy",
    "SegHeadParams",
    "ForwardTrace",
    "softmax",
    "forward",
    "gen_synthetic",
    "GradientScoreMap",
    "last_layer_grad_factors",
    "penult_layer_grad_factors",
    "pnorm_factored",
    "pgn_heatmap",
    "baseline_maps",
]

__version__ = "0.1.0"
