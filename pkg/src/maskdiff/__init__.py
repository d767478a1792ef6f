"""Masked-diffusion pretraining of a conditioned ConvNeXt U-Net and frozen
dense-feature segmentation heads."""

__version__ = "0.1.0"
