"""Semiclassical heat kernels, Witten Laplacians and Poincaré–Hopf index sums."""

__all__ = ["__version__"]
__version__ = "0.1.0"
