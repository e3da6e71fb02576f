"""Multi-modal transformer embeddings for file-level bug localization."""

__version__ = "0.1.0"
