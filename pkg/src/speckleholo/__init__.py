"""Coherent speckle-holography simulation and species-resolved abundance inversion."""

__version__ = "0.1.0"
