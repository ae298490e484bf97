"""Transfer-attack risk evaluation for merged multi-task models."""

__version__ = "0.1.0"
