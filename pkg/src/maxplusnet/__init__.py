"""Morphological (max-plus / min-plus) layers trained with Bouligand derivatives."""

from .maxplus import (
    anti_dilation_forward,
    anti_erosion_forward,
    conv_dilation_forward,
    dilation_forward,
    erosion_forward,
    maxplus_matmul,
    pointwise_max_reduce,
    windows_from_signal,
)

__version__ = "0.1.0"
