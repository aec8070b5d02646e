"""Self-supervised time-arrow features for cell event recognition in live-cell movies."""

__version__ = "0.1.0"
