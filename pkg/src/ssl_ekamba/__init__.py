"""Spatiotemporal traffic-risk forecasting with eKAN, selective SSMs and self-supervision."""

__version__ = "0.1.0"
