"""hashbound: binary hash code metrics, performance bounds, and posterior estimation."""

__version__ = "0.1.0"
