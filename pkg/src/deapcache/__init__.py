"""Learned cache admission, prefetching and eviction over memory-access traces."""

__version__ = "0.1.0"
