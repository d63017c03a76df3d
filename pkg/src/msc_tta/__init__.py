"""Multi-stage cell-based test-time adaptation for a fleet of streaming agents."""

__version__ = "0.1.0"
