"""Camera-style translation and soft-label propagation for cross-domain person re-ID."""

__version__ = "0.1.0"
