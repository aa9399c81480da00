"""Learned adaptive thresholding for U-Net segmentation, on a small numpy autodiff core."""

__version__ = "0.1.0"
