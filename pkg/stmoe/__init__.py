"""Desk-scale geometric multi-hop mixture-of-experts."""

__version__ = "1.0.0"

__all__ = [
    "numkern",
    "data",
    "routing",
    "experts",
    "layer",
    "model",
    "checkpoint",
    "train",
    "probes",
    "stats",
    "config",
    "errors",
    "utils",
    "cli",
    "commands",
]
