"""Joint video frame interpolation and super-resolution (x2 space, x2 time)."""

__version__ = "0.1.0"
