"""Decentralized spaceborne GNSS network processing over LEO constellations."""

__version__ = "0.1.0"
