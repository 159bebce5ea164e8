"""Label-specific multi-head attention with contrastive KNN inference for multi-label text."""

__version__ = "0.1.0"
