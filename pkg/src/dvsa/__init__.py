"""Zero-shot learning from ambiguous (partial) labels on numpy."""

__version__ = "0.1.0"
