"""Self-supervised pre-training and frozen-encoder evaluation for small chest-radiograph-style corpora."""

__version__ = "0.1.0"
