"""Discovery and validation of simplex-shaped belief geometries in transformer representations."""

__version__ = "0.1.0"
