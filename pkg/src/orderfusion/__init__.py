"""Probabilistic intraday electricity price forecasting from paired
buy/sell trade sequences, with non-crossing multi-quantile outputs."""

__version__ = "0.1.0"
