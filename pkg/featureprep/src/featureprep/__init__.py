"""Produces the engine's input files from real datasets: CNN features as
STTF and COCO-style annotations as caption JSONL."""

__version__ = "0.1.0"
