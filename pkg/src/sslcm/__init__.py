"""Countermeasure heads, layer probing and score fusion over frozen SSL activations."""

from sslcm.errors import SslcmError

__version__ = "0.1.0"

__all__ = ["SslcmError", "__version__"]
