"""Multi-scale patch selection and cross-attention for fine-grained recognition."""

__version__ = "1.0.0"
