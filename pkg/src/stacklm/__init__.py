"""Language modeling with stack-tape-augmented self-attention."""

__version__ = "0.1.0"
