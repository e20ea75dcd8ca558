"""Split SE-PyramidNet image recognition over a simulated fading link."""

__version__ = "0.1.0"
