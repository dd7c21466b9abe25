"""Load-flattening schedulers for plug-in vehicle charging."""

__version__ = "0.1.0"
