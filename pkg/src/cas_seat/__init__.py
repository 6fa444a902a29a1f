"""Cascaded self-evaluation training-data pipeline and benchmark scorer."""

__version__ = "0.1.0"
