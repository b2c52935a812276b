"""SE(2)-equivariant traffic-agent modeling on the 2D projective geometric algebra."""

__version__ = "0.1.0"
