"""Randomized, stateless TCP traceroute with a built-in network simulator."""

__version__ = "0.1.0"
