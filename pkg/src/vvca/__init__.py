"""Automated design of deterministic VVCA combinatorial auctions."""

__version__ = "0.1.0"
