"""Lightweight dermoscopy classification toolkit: archive I/O, statistics,
cluster-based instance selection, embeddings and a small numpy CNN."""

__version__ = "0.1.0"
