"""Multimodal entity linking with enhanced entity representations."""

__version__ = "0.1.0"
