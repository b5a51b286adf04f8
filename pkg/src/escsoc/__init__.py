"""ESC equivalent-circuit cell modelling, identification and SOC estimation."""

__version__ = "0.1.0"
