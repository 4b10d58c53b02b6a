"""Motion-guided two-stream video object segmentation, from scratch in NumPy."""

__version__ = "0.1.0"
