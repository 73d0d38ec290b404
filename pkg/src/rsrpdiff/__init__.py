"""Physics-informed conditional diffusion for RSRP sequence prediction."""

__version__ = "0.1.0"
