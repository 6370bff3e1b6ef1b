"""Event-based masked autoencoding for irregular triplet time series."""

__version__ = "0.1.0"
