"""Feature visualization and token-mixing / robustness probes for vision transformers."""

__version__ = "0.1.0"
