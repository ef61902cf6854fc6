"""Statistical relation network for sequence-level pain estimation from AU time series."""

__version__ = "0.1.0"
