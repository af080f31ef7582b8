"""Instruction back-and-forth translation: backtranslate, filter, rewrite, analyze."""

__version__ = "0.1.0"
