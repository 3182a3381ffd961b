"""Feature-pyramid core architectures with a from-scratch numeric engine."""

__version__ = "0.1.0"
