"""Self-calibrating projector-camera structured light with geometry-aware
spectral reflectance estimation."""

__version__ = "0.1.0"
