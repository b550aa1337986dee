"""Media-to-embedding extraction into binary embedding stores."""

__version__ = "0.1.0"
