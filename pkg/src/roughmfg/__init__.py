"""Mean-field game simulation with deterministic rough-path common noise."""

__version__ = "0.1.0"
