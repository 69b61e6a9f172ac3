"""Generative decoders and attentive encoders for marked temporal point processes."""

__version__ = "0.1.0"
