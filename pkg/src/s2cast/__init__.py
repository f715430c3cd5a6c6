"""Multiscale structured-attention forecasting for irregular weather-station networks."""

__version__ = "0.1.0"
