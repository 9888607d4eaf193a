"""Architecture search as distribution learning over a weight-sharing supernet."""

__version__ = "0.1.0"
