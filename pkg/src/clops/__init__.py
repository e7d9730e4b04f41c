"""Pre-trained probabilistic forecasting for cloud-operations time series."""

__version__ = "0.1.0"
