"""mlenv: a modular experiment environment built around data, models and methods."""

__version__ = "0.1.0"
