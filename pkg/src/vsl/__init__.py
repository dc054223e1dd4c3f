"""Cross-modal retrieval losses that keep image-text similarity rankings consistent with caption semantics."""

__version__ = "0.1.0"
