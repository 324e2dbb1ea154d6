"""Region-based contrastive 3D transformer for lung-nodule candidate classification."""

__version__ = "0.1.0"
