"""Structured sparsification of convolutions into learned-shuffle group convolutions."""
__version__ = "0.1.0"
