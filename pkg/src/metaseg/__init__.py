"""Meta-learned one-shot video object segmentation on a small numpy stack."""

__version__ = "0.1.0"
