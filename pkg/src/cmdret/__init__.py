"""Story-based text-to-video retrieval with contextual mixture-of-experts embeddings."""

__version__ = "0.1.0"
