"""i-vector based spoken pass-phrase classification and verification."""

__version__ = "0.1.0"
