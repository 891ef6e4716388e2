"""Continuous face aging with self-estimated residual age embeddings."""

from resage.profiles import SizeProfile

__all__ = ["SizeProfile"]
__version__ = "0.1.0"
