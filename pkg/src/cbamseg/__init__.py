"""Desk-scale CBAM instance segmentation: autodiff, attention, a toy segmenter,
synthetic orchard scenes, augmentation, metrics and complexity profiling."""

__version__ = "0.1.0"
