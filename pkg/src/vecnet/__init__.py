"""Vector networks: layers of rank-1 weight atoms selected per sample by sparse settling."""

__version__ = "0.1.0"
