"""Hybrid CNN-transformer vision backbone with a verification harness."""

__version__ = "0.1.0"
