"""Optimal execution and statistical arbitrage in constant-product AMMs."""

__version__ = "0.1.0"
