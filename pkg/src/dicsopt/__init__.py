"""Communication-sparsified consensus and variance-reduced optimization over directed graphs."""

__version__ = "0.1.0"
