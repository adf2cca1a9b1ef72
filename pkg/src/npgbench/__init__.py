"""Natural policy gradient training with interchangeable curvature backends."""

__version__ = "0.1.0"
