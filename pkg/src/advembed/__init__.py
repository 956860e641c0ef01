"""Hide bit strings in images as the ordered class ranking a secret classifier assigns them."""

__version__ = "0.1.0"
