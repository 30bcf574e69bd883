"""Deterministic benchmark generators: bump decoding, function composition, n-body dynamics."""
