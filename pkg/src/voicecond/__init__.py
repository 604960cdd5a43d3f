"""Speaker-conditioned recognition of overlapped speech, desk scale."""

__version__ = "0.1.0"
