"""Joint image-caption embedding trainer and evaluation toolkit."""

__version__ = "0.1.0"
