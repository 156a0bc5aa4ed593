"""Speaker-conditioned acoustic modeling with affine feature modulation."""

__version__ = "0.1.0"
