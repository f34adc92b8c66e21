"""Dual-surrogate adaptation of frozen univariate forecasters to multivariate panels."""

__version__ = "0.1.0"
