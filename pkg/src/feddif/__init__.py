"""Diffusion-based federated learning over simulated D2D links."""
__version__ = "0.1.0"
