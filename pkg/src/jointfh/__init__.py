"""Joint face hallucination and recognition, from scratch in numpy."""

__version__ = "0.1.0"
