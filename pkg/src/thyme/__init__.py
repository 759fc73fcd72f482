"""Time-aware topic-based publish/subscribe over a simulated wireless ad-hoc network."""

__version__ = "0.1.0"
