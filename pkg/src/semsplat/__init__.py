"""Semantic Gaussian splatting with learnable, confidence-aware point drop."""

__version__ = "0.1.0"
