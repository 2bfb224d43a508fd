"""Knowledge-distilled soft prompt decoding for multilingual dense retrieval."""

__version__ = "0.1.0"
