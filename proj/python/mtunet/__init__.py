"""Mixed-Transformer U-Net: python bindings for the core operations."""

from mtunet._core import (
    Model,
    axial_neighborhood,
    conv2d,
    conv_transpose2d,
    dice_score,
    gelu,
    hd95,
    layer_norm,
    matmul,
    softmax,
    synth_generate,
    window_partition,
    window_reverse,
)

__all__ = [
    "Model",
    "axial_neighborhood",
    "conv2d",
    "conv_transpose2d",
    "dice_score",
    "gelu",
    "hd95",
    "layer_norm",
    "matmul",
    "softmax",
    "synth_generate",
    "window_partition",
    "window_reverse",
]
