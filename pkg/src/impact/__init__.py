"""Multi-level interpretability pipeline for small sparse Vision Transformers."""

__version__ = "0.1.0"
