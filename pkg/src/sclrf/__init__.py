"""Standard-codec-in-the-loop training for tri-plane radiance fields."""

__version__ = "0.1.0"
