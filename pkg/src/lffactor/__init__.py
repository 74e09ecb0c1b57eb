"""Layer-image synthesis for compressive multi-layer light field displays."""

__version__ = "0.1.0"
